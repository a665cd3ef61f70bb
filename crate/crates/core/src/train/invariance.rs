//! Oracle-conditioned invariance residual of the full network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, TAG_PROBE};
use crate::error::Result;
use crate::geom::{PointCloud, Rotate, Rotation};
use crate::model::{prepare_cloud, ModelConfig, ParotModel};
use crate::numkernel::{Mode, ParamStore, Session, Tensor};

/// Outcome of an oracle-conditioned invariance sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleResidual {
    /// Largest absolute output difference between a cloud and any of its
    /// rotated copies.
    pub max_abs: f64,
    pub clouds: usize,
    pub rotations: usize,
}

/// Runs the 64-bit network with oracle content and frames on each cloud and
/// on `rotations` random rotations of it. Patch sampling uses the same seed
/// for every copy, so the sampled indices agree.
pub fn oracle_residual(
    model: &ParotModel,
    store: &mut ParamStore<f64>,
    clouds: &[PointCloud],
    rotations: usize,
    seed: u64,
) -> Result<OracleResidual> {
    let run = |store: &mut ParamStore<f64>, cloud: &PointCloud, prep_seed: u64| -> Result<Tensor<f64>> {
        let prepared = prepare_cloud(cloud, &model.cfg, &mut ChaCha8Rng::seed_from_u64(prep_seed))?;
        let mut s = Session::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let v = model.forward_oracle(&mut s, &[prepared])?;
        Ok(s.tape.value(v).clone())
    };
    let mut max_abs = 0.0f64;
    for (i, cloud) in clouds.iter().enumerate() {
        let prep_seed = derive_seed(seed, TAG_PROBE, 2 * i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_PROBE, 2 * i as u64 + 1));
        let base = run(store, cloud, prep_seed)?;
        for _ in 0..rotations {
            let r = Rotation::random_so3(&mut rng);
            let turned = run(store, &cloud.rotated(&r), prep_seed)?;
            max_abs = max_abs.max(base.max_abs_diff(&turned));
        }
    }
    Ok(OracleResidual {
        max_abs,
        clouds: clouds.len(),
        rotations,
    })
}

/// Builds a freshly initialized 64-bit model for oracle sweeps.
pub fn oracle_model(cfg: &ModelConfig, seed: u64) -> (ParotModel, ParamStore<f64>) {
    let (model, store) = super::init_model(cfg, seed);
    (model, store.cast())
}
