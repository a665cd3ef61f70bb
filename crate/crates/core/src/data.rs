//! Synthetic datasets, point-file I/O, augmentation and the rotation
//! protocols.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Rotation, Vec3};

pub const CLASS_NAMES: [&str; 4] = ["sphere", "box", "cylinder", "torus"];
pub const SEG_CATEGORY_NAMES: [&str; 2] = ["sphere_with_handle", "box_with_post"];
pub const SEG_PARTS: usize = 2;
const NOISE: f64 = 0.005;
const POOL_FACTOR: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }
}

/// Fixed-size clouds with a class id (the category for segmentation) and,
/// for segmentation, per-point part labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub split: Split,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub num_parts: usize,
    pub samples: Vec<PointCloud>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn points_per_sample(&self) -> usize {
        self.samples.first().map_or(0, PointCloud::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Seed of a split derived from the generation seed, so train and test
/// never share a random stream.
pub fn split_seed(seed: u64, split: Split) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Test => 0x7465_7374_0000_0000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.random()
}

fn unit_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn sample_ellipsoid<R: Rng + ?Sized>(rng: &mut R, axes: Vec3, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| unit_direction(rng).component_mul(&axes)).collect()
}

/// Surface of an axis-aligned box with half extents `h`, faces chosen in
/// proportion to their area.
fn sample_box<R: Rng + ?Sized>(rng: &mut R, h: Vec3, center: Vec3, n: usize) -> Vec<Vec3> {
    let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut t = rng.random_range(0.0..total);
            let mut axis = 2;
            for (i, a) in areas.iter().enumerate() {
                if t < *a {
                    axis = i;
                    break;
                }
                t -= a;
            }
            let mut p = Vec3::new(
                rng.random_range(-h.x..h.x),
                rng.random_range(-h.y..h.y),
                rng.random_range(-h.z..h.z),
            );
            p[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
            p + center
        })
        .collect()
}

/// Cylinder along z from `z0` to `z1`, side plus the requested caps, surface
/// area weighted.
fn sample_cylinder<R: Rng + ?Sized>(
    rng: &mut R,
    radius: f64,
    z0: f64,
    z1: f64,
    caps: (bool, bool),
    n: usize,
) -> Vec<Vec3> {
    let side = 2.0 * PI * radius * (z1 - z0);
    let cap = PI * radius * radius;
    let total = side + cap * (f64::from(u8::from(caps.0)) + f64::from(u8::from(caps.1)));
    (0..n)
        .map(|_| {
            let t = rng.random_range(0.0..total);
            let a = rng.random_range(0.0..2.0 * PI);
            if t < side {
                Vec3::new(radius * a.cos(), radius * a.sin(), rng.random_range(z0..z1))
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                let bottom = caps.0 && (!caps.1 || t < side + cap);
                Vec3::new(r * a.cos(), r * a.sin(), if bottom { z0 } else { z1 })
            }
        })
        .collect()
}

fn cylinder_area(radius: f64, length: f64, caps: usize) -> f64 {
    2.0 * PI * radius * length + caps as f64 * PI * radius * radius
}

/// Torus around z with major radius 1; area-uniform by rejection.
fn sample_torus<R: Rng + ?Sized>(rng: &mut R, tube: f64, n: usize) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (u, v) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        let w = (1.0 + tube * v.cos()) / (1.0 + tube);
        if rng.random::<f64>() <= w {
            let ring = 1.0 + tube * v.cos();
            out.push(Vec3::new(ring * u.cos(), ring * u.sin(), tube * v.sin()));
        }
    }
    out
}

fn add_noise<R: Rng + ?Sized>(rng: &mut R, points: &mut [Vec3]) {
    let normal = Normal::new(0.0, NOISE).expect("valid noise scale");
    for p in points {
        *p += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    }
}

/// Uniform-with-replacement draw of `n` members of `pool`.
fn resample<R: Rng + ?Sized>(rng: &mut R, pool: &[Vec3], n: usize) -> Vec<Vec3> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn classification_shape<R: Rng + ?Sized>(rng: &mut R, class: usize, pool: usize) -> Vec<Vec3> {
    match class {
        0 => {
            let axes = Vec3::new(1.0, rng.random_range(0.8..1.0), rng.random_range(0.8..1.0));
            sample_ellipsoid(rng, axes, pool)
        }
        1 => {
            let h = Vec3::new(1.0, rng.random_range(0.45..1.0), rng.random_range(0.45..1.0));
            sample_box(rng, h, Vec3::zeros(), pool)
        }
        2 => {
            let (r, h) = (rng.random_range(0.3..0.55), rng.random_range(0.7..1.0));
            sample_cylinder(rng, r, -h, h, (true, true), pool)
        }
        _ => {
            let tube = rng.random_range(0.2..0.4);
            sample_torus(rng, tube, pool)
        }
    }
}

fn finish_cloud<R: Rng + ?Sized>(
    rng: &mut R,
    mut points: Vec<Vec3>,
    labels: Option<Vec<usize>>,
    class: usize,
) -> Result<PointCloud> {
    add_noise(rng, &mut points);
    let cloud = PointCloud {
        points,
        labels,
        class_id: Some(class),
    };
    cloud.center_and_scale()
}

/// Four classes (sphere, box, cylinder, torus), `num_per_class` each, in
/// class-major order.
pub fn gen_classification_set(num_per_class: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_classification_split(num_per_class, n, seed, Split::Train)
}

pub fn gen_classification_split(num_per_class: usize, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n < 64 {
        return Err(Error::invalid(format!(
            "classification clouds need at least 64 points, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, split));
    let mut samples = Vec::with_capacity(num_per_class * CLASS_NAMES.len());
    for class in 0..CLASS_NAMES.len() {
        for _ in 0..num_per_class {
            let pool = classification_shape(&mut rng, class, POOL_FACTOR * n);
            let points = resample(&mut rng, &pool, n);
            samples.push(finish_cloud(&mut rng, points, None, class)?);
        }
    }
    Ok(Dataset {
        task: Task::Classification,
        split,
        seed,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        num_parts: 0,
        samples,
    })
}

/// Both parts of a composite shape: `(body, attachment, attachment share of
/// the total surface area)`.
fn composite<R: Rng + ?Sized>(rng: &mut R, category: usize, pool: usize) -> (Vec<Vec3>, Vec<Vec3>, f64) {
    if category == 0 {
        let (r, len) = (rng.random_range(0.15..0.25), rng.random_range(0.8..1.2));
        let handle: Vec<Vec3> = sample_cylinder(rng, r, 0.95, 0.95 + len, (false, true), pool)
            .into_iter()
            .map(|p| Vec3::new(p.z, p.x, p.y))
            .collect();
        let body = sample_ellipsoid(rng, Vec3::new(1.0, 1.0, 1.0), pool);
        let (a_body, a_handle) = (4.0 * PI, cylinder_area(r, len, 1));
        (body, handle, a_handle / (a_body + a_handle))
    } else {
        let h = Vec3::new(1.0, rng.random_range(0.6..1.0), rng.random_range(0.35..0.6));
        let (r, len) = (rng.random_range(0.15..0.3), rng.random_range(0.8..1.4));
        let body = sample_box(rng, h, Vec3::zeros(), pool);
        let post = sample_cylinder(rng, r, h.z, h.z + len, (false, true), pool);
        let a_body = 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z);
        let a_post = cylinder_area(r, len, 1);
        (body, post, a_post / (a_body + a_post))
    }
}

/// Two categories of two-part composites (sphere with a cylindrical handle,
/// box with a post). Part 0 is the body, part 1 the attachment; each part
/// holds between 20% and 80% of the points.
pub fn gen_segmentation_set(num_samples: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_segmentation_split(num_samples, n, seed, Split::Train)
}

pub fn gen_segmentation_split(num_samples: usize, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n < 256 {
        return Err(Error::invalid(format!(
            "segmentation clouds need at least 256 points, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, split));
    let mut samples = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let category = i % SEG_CATEGORY_NAMES.len();
        let (body, part, share) = composite(&mut rng, category, POOL_FACTOR * n);
        let n_part = ((share.clamp(0.2, 0.8) * n as f64).round() as usize).clamp(1, n - 1);
        let mut tagged: Vec<(Vec3, usize)> = resample(&mut rng, &body, n - n_part)
            .into_iter()
            .map(|p| (p, 0))
            .chain(resample(&mut rng, &part, n_part).into_iter().map(|p| (p, 1)))
            .collect();
        tagged.shuffle(&mut rng);
        let (points, labels) = tagged.into_iter().unzip();
        samples.push(finish_cloud(&mut rng, points, Some(labels), category)?);
    }
    Ok(Dataset {
        task: Task::Segmentation,
        split,
        seed,
        class_names: SEG_CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
        num_parts: SEG_PARTS,
        samples,
    })
}

/// Train and test splits generated from independent streams of one seed.
pub fn gen_split_pair(
    task: Task,
    train_count: usize,
    test_count: usize,
    n: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    match task {
        Task::Classification => Ok((
            gen_classification_split(train_count, n, seed, Split::Train)?,
            gen_classification_split(test_count, n, seed, Split::Test)?,
        )),
        Task::Segmentation => Ok((
            gen_segmentation_split(train_count, n, seed, Split::Train)?,
            gen_segmentation_split(test_count, n, seed, Split::Test)?,
        )),
    }
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses `x y z` or `x y z label` lines. `#` starts a comment; a
/// `# class <id>` comment sets the class id.
pub fn parse_points(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut class_id = None;
    let mut labelled = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if let Some(comment) = line.strip_prefix('#') {
            let mut words = comment.split_whitespace();
            if words.next() == Some("class") {
                let id = words.next().and_then(|w| w.parse().ok());
                class_id = Some(id.ok_or_else(|| parse_error(path, line_no, "malformed class comment"))?);
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_error(
                path,
                line_no,
                format!("expected 3 or 4 fields, found {}", fields.len()),
            ));
        }
        let mut xyz = [0.0; 3];
        for (v, f) in xyz.iter_mut().zip(&fields) {
            *v = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(path, line_no, format!("invalid coordinate '{f}'")))?;
        }
        let has_label = fields.len() == 4;
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(parse_error(path, line_no, "mixed labelled and unlabelled lines"));
        }
        if has_label {
            labels.push(
                fields[3]
                    .parse::<usize>()
                    .map_err(|_| parse_error(path, line_no, format!("invalid label '{}'", fields[3])))?,
            );
        }
        points.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(PointCloud {
        points,
        labels: labelled.unwrap_or(false).then_some(labels),
        class_id,
    })
}

pub fn load_points(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    parse_points(&text, path)
}

/// Nine significant digits per coordinate.
pub fn format_points(cloud: &PointCloud) -> String {
    let mut out = String::new();
    if let Some(c) = cloud.class_id {
        out.push_str(&format!("# class {c}\n"));
    }
    for (i, p) in cloud.points.iter().enumerate() {
        out.push_str(&format!("{:.8e} {:.8e} {:.8e}", p.x, p.y, p.z));
        if let Some(l) = &cloud.labels {
            out.push_str(&format!(" {}", l[i]));
        }
        out.push('\n');
    }
    out
}

pub fn save_points(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, format_points(cloud))?;
    Ok(())
}

const MANIFEST: &str = "manifest.txt";

/// Writes `manifest.txt` plus one point file per sample.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "task {}\nsplit {}\nseed {}\nparts {}\nclasses {}\nsamples {}\n",
        data.task.name(),
        data.split.name(),
        data.seed,
        data.num_parts,
        data.class_names.join(","),
        data.samples.len()
    );
    for (i, s) in data.samples.iter().enumerate() {
        let name = format!("sample_{i:05}.txt");
        save_points(s, &dir.join(&name))?;
        manifest.push_str(&format!("file {name}\n"));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let mut fields = std::collections::BTreeMap::new();
    let mut files = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| parse_error(&path, i + 1, "expected '<key> <value>'"))?;
        if key == "file" {
            files.push(value.to_string());
        } else {
            fields.insert(key.to_string(), (i + 1, value.to_string()));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| parse_error(&path, 0, format!("missing key '{k}'")))
    };
    let num = |k: &str| -> Result<u64> {
        let v = get(k)?;
        v.parse()
            .map_err(|_| parse_error(&path, fields[k].0, format!("invalid {k} '{v}'")))
    };
    let samples = files
        .iter()
        .map(|f| load_points(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    if samples.len() as u64 != num("samples")? {
        return Err(parse_error(
            &path,
            fields["samples"].0,
            "sample count does not match file list",
        ));
    }
    Ok(Dataset {
        task: get("task")?.parse()?,
        split: get("split")?.parse()?,
        seed: num("seed")?,
        class_names: get("classes")?.split(',').map(str::to_string).collect(),
        num_parts: num("parts")? as usize,
        samples,
    })
}

/// ASCII PLY with 8-bit colours; channels outside `[0, 1]` are clamped.
pub fn export_colored_ply(cloud: &PointCloud, rgb: &[[f64; 3]], path: &Path) -> Result<()> {
    fs::write(path, format_colored_ply(cloud, rgb)?)?;
    Ok(())
}

pub fn format_colored_ply(cloud: &PointCloud, rgb: &[[f64; 3]]) -> Result<String> {
    if rgb.len() != cloud.len() {
        return Err(Error::invalid(format!(
            "{} colours for {} points",
            rgb.len(),
            cloud.len()
        )));
    }
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    let mut clamped = 0usize;
    for (p, c) in cloud.points.iter().zip(rgb) {
        let mut byte = [0u8; 3];
        for (b, &v) in byte.iter_mut().zip(c) {
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            *b = (v * 255.0).round() as u8;
        }
        writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, byte[0], byte[1], byte[2])?;
    }
    if clamped > 0 {
        log::warn!("{clamped} colour channels outside [0, 1] were clamped");
    }
    Ok(String::from_utf8(out).expect("ASCII output"))
}

pub const AUGMENT_SCALE: (f64, f64) = (0.67, 1.5);

/// Isotropic scaling by a factor drawn uniformly from `[0.67, 1.5]`.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> (PointCloud, f64) {
    let s = rng.random_range(AUGMENT_SCALE.0..=AUGMENT_SCALE.1);
    (cloud.scaled(s), s)
}

/// Train and test rotation distributions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Protocol {
    Zz,
    #[default]
    ZSo3,
    So3So3,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Zz => "z/z",
            Protocol::ZSo3 => "z/SO3",
            Protocol::So3So3 => "SO3/SO3",
        }
    }

    pub fn flag(self) -> &'static str {
        match self {
            Protocol::Zz => "zz",
            Protocol::ZSo3 => "zso3",
            Protocol::So3So3 => "so3so3",
        }
    }

    pub fn train_rotation<R: Rng + ?Sized>(self, rng: &mut R) -> Rotation {
        match self {
            Protocol::Zz | Protocol::ZSo3 => Rotation::random_z(rng),
            Protocol::So3So3 => Rotation::random_so3(rng),
        }
    }

    pub fn test_rotation<R: Rng + ?Sized>(self, rng: &mut R) -> Rotation {
        match self {
            Protocol::Zz => Rotation::random_z(rng),
            Protocol::ZSo3 | Protocol::So3So3 => Rotation::random_so3(rng),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('/', "").as_str() {
            "zz" => Ok(Protocol::Zz),
            "zso3" => Ok(Protocol::ZSo3),
            "so3so3" => Ok(Protocol::So3So3),
            other => Err(Error::invalid(format!(
                "unknown protocol '{other}' (expected zz, zso3 or so3so3)"
            ))),
        }
    }
}
