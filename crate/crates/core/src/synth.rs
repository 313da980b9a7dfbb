//! Two-view synthetic scenes with exact correspondences and relative poses.
//!
//! Cameras sit at a fixed height above a square arena, looking along their
//! local `+z` with `y` up. An object is visible when it lies inside the
//! horizontal field of view and within the sensing range. Objects are drawn
//! directly inside the region they are meant to occupy (seen by both, by the
//! ego only or by the teammate only), so counts are exact.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{quat_from_yaw_pitch_roll, RelativePose};
use crate::graph::{build_graph, GraphError, GraphJson, ObjectNode, SceneGraph};
use crate::tensor::Tensor;

/// Rejection-sampling budget per region before the camera layout is redrawn.
const REGION_ATTEMPTS: usize = 4000;
const LAYOUT_ATTEMPTS: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator parameter: {0}")]
    Parameter(String),
    #[error("could not place objects after {0} camera layouts")]
    Placement(usize),
    #[error("pose oracle needs at least 3 non-collinear matched points ({0})")]
    Degenerate(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("dataset line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Objects seen by each camera.
    pub objects_per_view: usize,
    pub covisible_fraction: f64,
    /// Per-coordinate feature noise standard deviation.
    pub noise_sigma: f64,
    /// Teammate-only objects whose feature imitates an ego-only object
    /// (at most the number of non-covisible objects).
    pub distractors: usize,
    /// 1 copies the source feature exactly.
    pub distractor_similarity: f64,
    pub feature_width: usize,
    /// No shared objects at all.
    pub disjoint: bool,
    pub arena: f64,
    pub max_height: f64,
    pub camera_height: f64,
    pub fov_deg: f64,
    pub range: f64,
    /// Teammate placement relative to the ego camera for overlapping pairs.
    pub max_lateral: f64,
    pub min_forward: f64,
    pub max_forward: f64,
    pub max_yaw_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            objects_per_view: 10,
            covisible_fraction: 0.5,
            noise_sigma: 0.1,
            distractors: 1,
            distractor_similarity: 1.0,
            feature_width: 32,
            disjoint: false,
            arena: 100.0,
            max_height: 3.0,
            camera_height: 1.5,
            fov_deg: 90.0,
            range: 40.0,
            max_lateral: 10.0,
            min_forward: -5.0,
            max_forward: 20.0,
            max_yaw_deg: 45.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Parameter(m.to_string()));
        if !(0.0..=1.0).contains(&self.covisible_fraction) {
            return bad("covisible_fraction must lie in [0, 1]");
        }
        if self.disjoint && self.covisible_fraction >= 1.0 && self.objects_per_view > 0 {
            return bad("covisible_fraction 1 is impossible for a disjoint pair");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.distractor_similarity) {
            return bad("distractor_similarity must lie in [0, 1]");
        }
        if self.feature_width == 0 {
            return bad("feature_width must be positive");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.range > 0.0) {
            return bad("field of view must be in (0, 180) degrees and range positive");
        }
        if !(self.arena > 0.0) || self.max_height < 0.0 {
            return bad("arena must be positive and heights non-negative");
        }
        if self.min_forward > self.max_forward || self.max_lateral < 0.0 || self.max_yaw_deg < 0.0 {
            return bad("teammate placement ranges are inverted");
        }
        Ok(())
    }

    pub fn covisible_count(&self) -> usize {
        if self.disjoint {
            0
        } else {
            (self.covisible_fraction * self.objects_per_view as f64).round() as usize
        }
    }
}

/// Planar camera: world position and heading about the vertical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub yaw: f64,
}

impl Camera {
    /// Camera-to-world transform.
    pub fn pose(&self) -> RelativePose {
        RelativePose::new(self.position, quat_from_yaw_pitch_roll(self.yaw, 0.0, 0.0))
    }

    pub fn to_local(&self, world: &[f64; 3]) -> [f64; 3] {
        self.pose().inverse().transform_point(world)
    }

    pub fn sees(&self, world: &[f64; 3], fov_deg: f64, range: f64) -> bool {
        let l = self.to_local(world);
        let planar = l[0].hypot(l[2]);
        planar <= range && l[2] > 0.0 && l[0].atan2(l[2]).abs() <= fov_deg.to_radians() / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: u32,
    pub position: [f64; 3],
    pub feature: Vec<f64>,
    pub class_tag: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldInstance {
    pub objects: Vec<WorldObject>,
    pub ego_camera: Camera,
    pub mate_camera: Camera,
    pub covisible: usize,
    pub disjoint: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePair {
    pub ego: SceneGraph,
    pub mate: SceneGraph,
    /// `n × m` binary ground-truth correspondences in canonical node order.
    pub truth: Tensor,
    /// Teammate camera expressed in the ego frame.
    pub pose: RelativePose,
    pub overlap: bool,
}

impl InstancePair {
    pub fn matches(&self) -> Vec<(usize, usize)> {
        let m = self.truth.cols();
        self.truth
            .data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(k, _)| (k / m, k % m))
            .collect()
    }

    pub fn to_record(&self) -> PairRecord {
        PairRecord {
            ego: self.ego.to_json_value(),
            mate: self.mate.to_json_value(),
            matches: self.matches().into_iter().map(|(i, j)| [i, j]).collect(),
            pose: self.pose,
            overlap: self.overlap,
        }
    }
}

/// One dataset line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub ego: GraphJson,
    pub mate: GraphJson,
    /// Index pairs `(ego, teammate)` with `Y* = 1`.
    pub matches: Vec<[usize; 2]>,
    pub pose: RelativePose,
    pub overlap: bool,
}

impl PairRecord {
    pub fn into_pair(self) -> std::result::Result<InstancePair, String> {
        let ego = self.ego.into_graph().map_err(|e| e.to_string())?;
        let mate = self.mate.into_graph().map_err(|e| e.to_string())?;
        let (n, m) = (ego.len(), mate.len());
        let mut y = vec![0.0; n * m];
        for [i, j] in self.matches {
            if i >= n || j >= m {
                return Err(format!("match ({i}, {j}) outside {n}×{m}"));
            }
            y[i * m + j] = 1.0;
        }
        let truth = Tensor::new(vec![n, m], y).map_err(|e| e.to_string())?;
        let overlap = truth.data().iter().sum::<f64>() >= 1.0;
        if overlap != self.overlap {
            return Err("overlap label disagrees with matches".into());
        }
        Ok(InstancePair {
            ego,
            mate,
            truth,
            pose: if (self.pose.orientation.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() <= 1e-12 {
                self.pose
            } else {
                RelativePose::new(self.pose.position, self.pose.orientation)
            },
            overlap,
        })
    }
}

fn sample_in_view(rng: &mut ChaCha8Rng, cam: &Camera, cfg: &SynthConfig) -> [f64; 3] {
    let half = cfg.fov_deg.to_radians() / 2.0;
    let bearing = rng.gen_range(-half..=half);
    // area-uniform radius
    let r = cfg.range * rng.gen::<f64>().sqrt();
    let height = rng.gen_range(0.0..=cfg.max_height) - cfg.camera_height;
    cam.pose().transform_point(&[r * bearing.sin(), height, r * bearing.cos()])
}

fn in_arena(p: &[f64; 3], arena: f64) -> bool {
    (0.0..=arena).contains(&p[0]) && (0.0..=arena).contains(&p[2])
}

fn sample_region(
    rng: &mut ChaCha8Rng,
    from: &Camera,
    other: &Camera,
    want_other: bool,
    cfg: &SynthConfig,
) -> Option<[f64; 3]> {
    (0..REGION_ATTEMPTS).find_map(|_| {
        let p = sample_in_view(rng, from, cfg);
        let ok = in_arena(&p, cfg.arena)
            && from.sees(&p, cfg.fov_deg, cfg.range)
            && other.sees(&p, cfg.fov_deg, cfg.range) == want_other;
        ok.then_some(p)
    })
}

fn cameras(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (Camera, Camera) {
    let margin = cfg.arena * 0.2;
    let ego = Camera {
        position: [
            rng.gen_range(margin..=cfg.arena - margin),
            cfg.camera_height,
            rng.gen_range(margin..=cfg.arena - margin),
        ],
        yaw: rng.gen_range(0.0..2.0 * PI),
    };
    let mate = if cfg.disjoint {
        Camera {
            position: [
                rng.gen_range(0.0..=cfg.arena),
                cfg.camera_height,
                rng.gen_range(0.0..=cfg.arena),
            ],
            yaw: rng.gen_range(0.0..2.0 * PI),
        }
    } else {
        let lateral = rng.gen_range(-cfg.max_lateral..=cfg.max_lateral);
        let forward = rng.gen_range(cfg.min_forward..=cfg.max_forward);
        let yaw = cfg.max_yaw_deg.to_radians() * rng.gen_range(-1.0..=1.0);
        let offset = ego.pose().transform_point(&[lateral, 0.0, forward]);
        Camera {
            position: [offset[0], cfg.camera_height, offset[2]],
            yaw: ego.yaw + yaw,
        }
    };
    (ego, mate)
}

fn noisy(rng: &mut ChaCha8Rng, f: &[f64], sigma: f64) -> Vec<f64> {
    f.iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect()
}

/// Samples the world layout for one seed.
pub fn generate_world(seed: u64, cfg: &SynthConfig) -> Result<WorldInstance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cov = cfg.covisible_count();
    let solo = cfg.objects_per_view - cov;
    for _ in 0..LAYOUT_ATTEMPTS {
        let (ego_cam, mate_cam) = cameras(&mut rng, cfg);
        let mut spots = Vec::with_capacity(cov + 2 * solo);
        let mut placed = true;
        for (from, other, want, count) in [
            (&ego_cam, &mate_cam, true, cov),
            (&ego_cam, &mate_cam, false, solo),
            (&mate_cam, &ego_cam, false, solo),
        ] {
            for _ in 0..count {
                match sample_region(&mut rng, from, other, want, cfg) {
                    Some(p) => spots.push(p),
                    None => {
                        placed = false;
                        break;
                    }
                }
            }
            if !placed {
                break;
            }
        }
        if !placed {
            continue;
        }
        let mut objects: Vec<WorldObject> = spots
            .into_iter()
            .enumerate()
            .map(|(k, position)| WorldObject {
                id: k as u32,
                position,
                feature: (0..cfg.feature_width).map(|_| rng.sample(StandardNormal)).collect(),
                class_tag: rng.gen_range(0..8),
            })
            .collect();
        let distractors = cfg.distractors.min(solo);
        let s = cfg.distractor_similarity;
        let keep = (1.0 - s * s).max(0.0).sqrt();
        for k in 0..distractors {
            let src = objects[cov + k].feature.clone();
            let tag = objects[cov + k].class_tag;
            let dst = &mut objects[cov + solo + k];
            dst.feature = src
                .iter()
                .zip(&dst.feature)
                .map(|(a, b)| s * a + keep * b)
                .collect();
            dst.class_tag = tag;
        }
        return Ok(WorldInstance {
            objects,
            ego_camera: ego_cam,
            mate_camera: mate_cam,
            covisible: cov,
            disjoint: cfg.disjoint,
        });
    }
    Err(SynthError::Placement(LAYOUT_ATTEMPTS))
}

/// Renders both views of a world into graphs, ground truth and pose.
pub fn observe(world: &WorldInstance, seed: u64, cfg: &SynthConfig) -> Result<InstancePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b5e_7ae5_u64);
    let view = |cam: &Camera, rng: &mut ChaCha8Rng| -> Vec<ObjectNode> {
        world
            .objects
            .iter()
            .filter(|o| cam.sees(&o.position, cfg.fov_deg, cfg.range))
            .map(|o| {
                let mut node = ObjectNode::new(o.id, cam.to_local(&o.position), noisy(rng, &o.feature, cfg.noise_sigma));
                node.class_tag = Some(o.class_tag);
                node
            })
            .collect()
    };
    let ego = build_graph(view(&world.ego_camera, &mut rng))?;
    let mate = build_graph(view(&world.mate_camera, &mut rng))?;
    let (n, m) = (ego.len(), mate.len());
    let mut y = vec![0.0; n * m];
    for (i, a) in ego.nodes().iter().enumerate() {
        for (j, b) in mate.nodes().iter().enumerate() {
            if a.id == b.id {
                y[i * m + j] = 1.0;
            }
        }
    }
    let truth = Tensor::new(vec![n, m], y).expect("n×m");
    let overlap = truth.data().iter().sum::<f64>() >= 1.0;
    let pose = world.ego_camera.pose().inverse().compose(&world.mate_camera.pose());
    Ok(InstancePair {
        ego,
        mate,
        truth,
        pose,
        overlap,
    })
}

/// One deterministic instance pair.
pub fn generate_pair(seed: u64, cfg: &SynthConfig) -> Result<InstancePair> {
    let world = generate_world(seed, cfg)?;
    observe(&world, seed, cfg)
}

/// Least-squares rigid transform taking teammate points onto ego points,
/// `min Σ‖R·x_i + t − y_i‖²`, with a reflection correction on the SVD.
pub fn kabsch_pose(ego: &[[f64; 3]], mate: &[[f64; 3]]) -> Result<RelativePose> {
    if ego.len() != mate.len() {
        return Err(SynthError::Degenerate(format!(
            "{} ego points against {} teammate points",
            ego.len(),
            mate.len()
        )));
    }
    if ego.len() < 3 {
        return Err(SynthError::Degenerate(format!("{} pairs", ego.len())));
    }
    let n = ego.len() as f64;
    let xs: Vec<Vector3<f64>> = mate.iter().map(|p| Vector3::from(*p)).collect();
    let ys: Vec<Vector3<f64>> = ego.iter().map(|p| Vector3::from(*p)).collect();
    let cx = xs.iter().sum::<Vector3<f64>>() / n;
    let cy = ys.iter().sum::<Vector3<f64>>() / n;
    let mut spread = Matrix3::zeros();
    let mut cov = Matrix3::zeros();
    for (x, y) in xs.iter().zip(&ys) {
        spread += (x - cx) * (x - cx).transpose();
        cov += (y - cy) * (x - cx).transpose();
    }
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if ev[2] <= 0.0 || ev[1] <= 1e-12 * ev[2] {
        return Err(SynthError::Degenerate("points are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * fix * v_t;
    let t = cy - r * cx;
    let q = nalgebra::UnitQuaternion::from_matrix(&r);
    Ok(RelativePose::from_unit([t.x, t.y, t.z], &q))
}

/// Splits a base seed into a per-index seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `size` pairs of which exactly `round(mix · size)` are disjoint; which
/// indices are disjoint is a seeded shuffle.
pub fn make_dataset(seed: u64, size: usize, mix: f64, cfg: &SynthConfig) -> Result<Vec<InstancePair>> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(SynthError::Parameter("mix must lie in [0, 1]".into()));
    }
    let disjoint_count = (mix * size as f64).round() as usize;
    let mut flags: Vec<bool> = (0..size).map(|k| k < disjoint_count).collect();
    flags.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    flags
        .par_iter()
        .enumerate()
        .map(|(k, &disjoint)| {
            let c = SynthConfig { disjoint, ..*cfg };
            generate_pair(derive_seed(seed, k as u64), &c)
        })
        .collect()
}

/// Held-out split drawn from a stream disjoint from the training stream.
pub fn make_split(
    seed: u64,
    train: usize,
    test: usize,
    mix: f64,
    cfg: &SynthConfig,
) -> Result<(Vec<InstancePair>, Vec<InstancePair>)> {
    Ok((
        make_dataset(derive_seed(seed, 0x7a1), train, mix, cfg)?,
        make_dataset(derive_seed(seed, 0x7e57), test, mix, cfg)?,
    ))
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes JSON lines; a `.gz` suffix selects gzip.
pub fn write_dataset(path: &Path, pairs: &[InstancePair]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut out: Box<dyn Write> = if is_gzip(path) {
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    };
    for p in pairs {
        serde_json::to_writer(&mut out, &p.to_record()).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSON lines, detecting gzip by its magic bytes.
pub fn read_dataset(path: &Path) -> Result<Vec<InstancePair>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let got = file.read(&mut magic)?;
    let file = File::open(path)?;
    let reader: Box<dyn BufRead> = if got == 2 && magic == [0x1f, 0x8b] {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| SynthError::Format { line: k + 1, msg };
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        out.push(record.into_pair().map_err(fail)?);
    }
    Ok(out)
}
