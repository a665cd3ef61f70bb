//! End-to-end networks: patch preparation, the classification network and
//! the segmentation network, plus an oracle-conditioned forward pass that
//! swaps learned content and frames for exact handcrafted ones.

use rand::Rng;

use crate::data::Task;
use crate::disentangle::{AuxLosses, BranchRotations, DisentangleOutput, Disentangler, CONTENT_WIDTH};
use crate::error::{Error, Result};
use crate::geom::{
    fps, global_patches_from, knn, local_patches_at, oracle_equivariant_frame, oracle_invariant_content,
    NeighborSearch, OrientationFrame, Patch, PatchScale, PointCloud,
};
use crate::hierarchy::{ClassifierHead, InterScale, IntraScale, LocalGraph, RelationMode};
use crate::numkernel::{ParamStore, Real, Session, Tensor, Var};
use crate::seghead::{onehot, DenseGraph, Propagation, PropagationMode, SegHead};

/// Architecture hyperparameters shared by both tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Classes (classification) or object categories (segmentation).
    pub num_classes: usize,
    pub num_parts: usize,
    pub n_local: usize,
    pub k_local: usize,
    pub n_global: usize,
    pub k_intra: usize,
    pub k_prop: usize,
    /// Neighbourhood size of the per-point patches feeding propagation.
    pub k_dense: usize,
    pub neighbor_search: NeighborSearch,
    pub relation_mode: RelationMode,
    pub intra: bool,
    pub inter: bool,
    pub propagation: PropagationMode,
}

impl ModelConfig {
    pub fn classification(num_classes: usize) -> Self {
        Self {
            task: Task::Classification,
            num_classes,
            num_parts: 0,
            n_local: 256,
            k_local: 64,
            n_global: 32,
            k_intra: 32,
            k_prop: 11,
            k_dense: 16,
            neighbor_search: NeighborSearch::Knn,
            relation_mode: RelationMode::Full,
            intra: true,
            inter: true,
            propagation: PropagationMode::PoseAware,
        }
    }

    pub fn segmentation(num_categories: usize, num_parts: usize) -> Self {
        Self {
            task: Task::Segmentation,
            num_parts,
            n_global: 64,
            k_intra: 16,
            ..Self::classification(num_categories)
        }
    }

    pub fn validate(&self, points: usize) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(self.num_classes > 0, "num_classes must be positive".into())?;
        check(
            self.n_local >= 1 && self.n_local <= points,
            format!("n_local = {} must lie in 1..={points}", self.n_local),
        )?;
        check(
            self.k_local >= 1 && self.k_local <= points,
            format!("k_local = {} must lie in 1..={points}", self.k_local),
        )?;
        check(
            self.k_intra >= 1 && self.k_intra <= self.n_local,
            format!("k_intra = {} must lie in 1..={}", self.k_intra, self.n_local),
        )?;
        match self.task {
            Task::Classification => {
                check(
                    !self.inter || (self.n_global >= 1 && self.n_global <= points),
                    format!("n_global = {} must lie in 1..={points}", self.n_global),
                )?;
            }
            Task::Segmentation => {
                check(self.num_parts > 0, "num_parts must be positive".into())?;
                check(
                    self.k_prop >= 1 && self.k_prop <= self.n_local,
                    format!("k_prop = {} must lie in 1..={}", self.k_prop, self.n_local),
                )?;
                check(
                    self.k_dense >= 1 && self.k_dense <= points,
                    format!("k_dense = {} must lie in 1..={points}", self.k_dense),
                )?;
            }
        }
        if let NeighborSearch::Ball { radius } = self.neighbor_search {
            check(
                radius > 0.0 && radius.is_finite(),
                format!("radius = {radius} must be positive"),
            )?;
        }
        Ok(())
    }
}

/// Patches and neighbour graphs of one cloud, in world coordinates.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub local: Vec<Patch>,
    pub graph: LocalGraph,
    pub global: Vec<Patch>,
    pub dense: Option<(Vec<Patch>, DenseGraph)>,
    pub class_id: Option<usize>,
    pub labels: Option<Vec<usize>>,
}

/// FPS references (random start), local patches, the static intra-scale
/// graph, and either global patches (classification) or per-point patches
/// with the propagation graph (segmentation).
pub fn prepare_cloud<R: Rng + ?Sized>(cloud: &PointCloud, cfg: &ModelConfig, rng: &mut R) -> Result<PreparedCloud> {
    cfg.validate(cloud.len())?;
    let refs = fps(&cloud.points, cfg.n_local, rng)?;
    let local = local_patches_at(cloud, &refs, cfg.k_local, cfg.neighbor_search)?;
    let ref_points: Vec<_> = local.iter().map(|p| p.anchor).collect();
    let graph = LocalGraph::new(ref_points.clone(), cfg.k_intra)?;
    let mut global = Vec::new();
    let mut dense = None;
    match cfg.task {
        Task::Classification => {
            if cfg.inter {
                let sample: Vec<_> = fps(&cloud.points, cfg.n_global, rng)?
                    .into_iter()
                    .map(|i| cloud.points[i])
                    .collect();
                global = global_patches_from(&sample, &ref_points);
            }
        }
        Task::Segmentation => {
            let members = knn(&cloud.points, &cloud.points, cfg.k_dense)?;
            let patches = cloud
                .points
                .iter()
                .zip(members)
                .map(|(p, idx)| Patch {
                    local_points: idx.iter().map(|&j| cloud.points[j] - p).collect(),
                    reference_point: *p,
                    anchor: *p,
                    scale: PatchScale::Local,
                })
                .collect();
            dense = Some((patches, DenseGraph::new(cloud.points.clone(), ref_points, cfg.k_prop)?));
        }
    }
    Ok(PreparedCloud {
        local,
        graph,
        global,
        dense,
        class_id: cloud.class_id,
        labels: cloud.labels.clone(),
    })
}

/// Patch rotation policy of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchRotation {
    /// Inference: identity, single branch.
    None,
    /// Training: independent random rotations per patch, both siamese
    /// branches when `siamese` is set.
    Random { siamese: bool },
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, C]` for classification, `[B * N, parts]` for segmentation.
    pub logits: Var,
    pub local: Option<DisentangleOutput>,
    pub global: Option<DisentangleOutput>,
    /// Number of degenerate frames among all patches of this pass.
    pub degenerate: usize,
    pub frames: usize,
}

/// Content features and frames for every patch, from the network or from
/// the oracles.
struct Encoded {
    local: Var,
    local_frames: Vec<OrientationFrame>,
    global: Option<(Var, Vec<OrientationFrame>)>,
    dense: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ParotModel {
    pub cfg: ModelConfig,
    local: Disentangler,
    global: Option<Disentangler>,
    intra: Option<IntraScale>,
    inter: Option<InterScale>,
    classifier: Option<ClassifierHead>,
    propagation: Option<Propagation>,
    seg_head: Option<SegHead>,
}

impl ParotModel {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let local = Disentangler::new(store, "local", rng);
        let intra = cfg
            .intra
            .then(|| IntraScale::new(store, "intra", cfg.relation_mode, rng));
        let (mut global, mut inter, mut classifier, mut propagation, mut seg_head) = (None, None, None, None, None);
        match cfg.task {
            Task::Classification => {
                if cfg.inter {
                    global = Some(Disentangler::new(store, "global", rng));
                }
                inter = Some(InterScale::new(store, "inter", cfg.relation_mode, cfg.inter, rng));
                classifier = Some(ClassifierHead::new(store, "classifier", cfg.num_classes, rng));
            }
            Task::Segmentation => {
                propagation = Some(Propagation::new(store, "propagation", cfg.propagation, rng));
                seg_head = Some(SegHead::new(store, "seg_head", cfg.num_classes, cfg.num_parts, rng));
            }
        }
        Self {
            cfg: cfg.clone(),
            local,
            global,
            intra,
            inter,
            classifier,
            propagation,
            seg_head,
        }
    }

    fn rotations<T: Real>(s: &mut Session<T>, count: usize, policy: PatchRotation) -> BranchRotations {
        match policy {
            PatchRotation::None => BranchRotations::Identity,
            PatchRotation::Random { siamese: true } => BranchRotations::random_pair(count, &mut s.rng),
            PatchRotation::Random { siamese: false } => BranchRotations::random_single(count, &mut s.rng),
        }
    }

    /// Full forward pass over a batch of prepared clouds.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        batch: &[PreparedCloud],
        policy: PatchRotation,
    ) -> Result<ForwardOutput> {
        self.forward_with_frames(s, batch, policy, None)
    }

    /// Forward pass whose orientation frames (local, then global) are taken
    /// from `frames` instead of the direction heads. Frames enter the graph
    /// as constants either way, so this evaluates the same function the
    /// reverse pass differentiates.
    pub fn forward_with_frames<T: Real>(
        &self,
        s: &mut Session<T>,
        batch: &[PreparedCloud],
        policy: PatchRotation,
        fixed_frames: Option<(&[OrientationFrame], &[OrientationFrame])>,
    ) -> Result<ForwardOutput> {
        let local_patches: Vec<Patch> = batch.iter().flat_map(|c| c.local.iter().cloned()).collect();
        let rot = Self::rotations(s, local_patches.len(), policy);
        let mut local = self.local.siamese_forward(s, &local_patches, rot)?;
        if let Some((fixed, _)) = fixed_frames {
            replace_frames(&mut local, fixed)?;
        }
        let mut degenerate = local.degenerate;
        let mut frames = local.frames.len();
        let global = match &self.global {
            Some(g) => {
                let patches: Vec<Patch> = batch.iter().flat_map(|c| c.global.iter().cloned()).collect();
                let rot = Self::rotations(s, patches.len(), policy);
                let mut out = g.siamese_forward(s, &patches, rot)?;
                if let Some((_, fixed)) = fixed_frames {
                    replace_frames(&mut out, fixed)?;
                }
                degenerate += out.degenerate;
                frames += out.frames.len();
                Some(out)
            }
            None => None,
        };
        let dense = if self.cfg.task == Task::Segmentation {
            let patches = dense_patches(batch)?;
            let rot = match policy {
                PatchRotation::None => BranchRotations::Identity,
                PatchRotation::Random { .. } => BranchRotations::random_single(patches.len(), &mut s.rng),
            };
            Some(self.local.siamese_forward(s, &patches, rot)?.content())
        } else {
            None
        };
        let encoded = Encoded {
            local: local.content(),
            local_frames: local.frames.clone(),
            global: global.as_ref().map(|g| (g.content(), g.frames.clone())),
            dense,
        };
        let logits = self.head_forward(s, batch, encoded)?;
        Ok(ForwardOutput {
            logits,
            local: Some(local),
            global,
            degenerate,
            frames,
        })
    }

    /// Forward pass with content features from `oracle_invariant_content`
    /// (width 128) and frames from `oracle_equivariant_frame`. Everything
    /// after the disentanglers is the trained network.
    pub fn forward_oracle<T: Real>(&self, s: &mut Session<T>, batch: &[PreparedCloud]) -> Result<Var> {
        let oracle = |s: &mut Session<T>, patches: &[Patch]| -> Result<(Var, Vec<OrientationFrame>)> {
            let mut data = Vec::with_capacity(patches.len() * CONTENT_WIDTH);
            let mut frames = Vec::with_capacity(patches.len());
            for p in patches {
                data.extend(
                    oracle_invariant_content(&p.local_points, CONTENT_WIDTH)
                        .into_iter()
                        .map(T::of),
                );
                frames.push(oracle_equivariant_frame(&p.local_points)?);
            }
            Ok((
                s.constant(Tensor::new(vec![patches.len(), CONTENT_WIDTH], data)?),
                frames,
            ))
        };
        let local_patches: Vec<Patch> = batch.iter().flat_map(|c| c.local.iter().cloned()).collect();
        let (local, local_frames) = oracle(s, &local_patches)?;
        let global = if self.global.is_some() {
            let patches: Vec<Patch> = batch.iter().flat_map(|c| c.global.iter().cloned()).collect();
            Some(oracle(s, &patches)?)
        } else {
            None
        };
        let dense = if self.cfg.task == Task::Segmentation {
            let patches = dense_patches(batch)?;
            let mut data = Vec::with_capacity(patches.len() * CONTENT_WIDTH);
            for p in &patches {
                data.extend(
                    oracle_invariant_content(&p.local_points, CONTENT_WIDTH)
                        .into_iter()
                        .map(T::of),
                );
            }
            Some(s.constant(Tensor::new(vec![patches.len(), CONTENT_WIDTH], data)?))
        } else {
            None
        };
        let encoded = Encoded {
            local,
            local_frames,
            global,
            dense,
        };
        self.head_forward(s, batch, encoded)
    }

    fn head_forward<T: Real>(&self, s: &mut Session<T>, batch: &[PreparedCloud], enc: Encoded) -> Result<Var> {
        let graphs: Vec<LocalGraph> = batch.iter().map(|c| c.graph.clone()).collect();
        let features = match &self.intra {
            Some(intra) => intra.forward(s, enc.local, &graphs, &enc.local_frames)?,
            None => enc.local,
        };
        match self.cfg.task {
            Task::Classification => {
                let inter = self.inter.as_ref().expect("classification network has a fusion stage");
                let (global, global_frames) = match &enc.global {
                    Some((g, f)) => (Some(*g), f.as_slice()),
                    None => (None, &[][..]),
                };
                let fused = inter.forward(s, features, global, &graphs, &enc.local_frames, global_frames)?;
                self.classifier.as_ref().expect("classification head").forward(s, fused)
            }
            Task::Segmentation => {
                let dense_graphs: Vec<DenseGraph> = batch
                    .iter()
                    .map(|c| {
                        c.dense
                            .as_ref()
                            .map(|d| d.1.clone())
                            .ok_or_else(|| Error::invalid("cloud prepared without dense patches"))
                    })
                    .collect::<Result<_>>()?;
                let dense = enc.dense.expect("segmentation pass encodes dense patches");
                let prop = self.propagation.as_ref().expect("segmentation network has propagation");
                let per_point = prop.forward(s, dense, features, &dense_graphs, &enc.local_frames)?;
                let onehots = batch
                    .iter()
                    .map(|c| {
                        let cat = c
                            .class_id
                            .ok_or_else(|| Error::invalid("segmentation sample without category"))?;
                        onehot(cat, self.cfg.num_classes)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let n = dense_graphs.first().map_or(0, |g| g.points.len());
                if dense_graphs.iter().any(|g| g.points.len() != n) {
                    return Err(Error::invalid("segmentation batch clouds differ in size"));
                }
                self.seg_head
                    .as_ref()
                    .expect("segmentation head")
                    .forward(s, per_point, &onehots, n)
            }
        }
    }

    /// Auxiliary losses of both scales.
    pub fn aux_losses<T: Real>(
        &self,
        s: &mut Session<T>,
        out: &ForwardOutput,
        w: &crate::train::LossWeights,
    ) -> Result<(AuxLosses, AuxLosses)> {
        let local = match &out.local {
            Some(l) => self
                .local
                .losses(&mut s.tape, l, w.equi_local, w.inv_local, w.orth_local)?,
            None => AuxLosses::default(),
        };
        let global = match (&self.global, &out.global) {
            (Some(g), Some(o)) => g.losses(&mut s.tape, o, w.equi_global, w.inv_global, w.orth_global)?,
            _ => AuxLosses::default(),
        };
        Ok((local, global))
    }

    pub fn local_disentangler(&self) -> &Disentangler {
        &self.local
    }
}

fn replace_frames(out: &mut DisentangleOutput, frames: &[OrientationFrame]) -> Result<()> {
    if frames.len() != out.frames.len() {
        return Err(Error::invalid(format!(
            "{} frames supplied for {} patches",
            frames.len(),
            out.frames.len()
        )));
    }
    out.frames = frames.to_vec();
    Ok(())
}

fn dense_patches(batch: &[PreparedCloud]) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for c in batch {
        let (patches, _) = c
            .dense
            .as_ref()
            .ok_or_else(|| Error::invalid("cloud prepared without dense patches"))?;
        out.extend(patches.iter().cloned());
    }
    Ok(out)
}
