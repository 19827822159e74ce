//! Labeled feature sets, the two synthetic benchmarks (spiral arms and
//! related Gaussian clusters), CSV feature files, and training checkpoints.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class label. Base and novel classes share one label space with disjoint
/// ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Base,
    Novel,
}

/// One feature vector with its class, role, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub label: ClassId,
    pub role: Role,
    pub synthetic: bool,
    pub features: Vec<f64>,
}

/// A collection of D-dimensional feature vectors with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    dim: usize,
    examples: Vec<Example>,
}

impl LabeledFeatureSet {
    pub fn new(dim: usize) -> Self {
        LabeledFeatureSet { dim, examples: Vec::new() }
    }

    pub fn push(&mut self, example: Example) -> Result<()> {
        if example.features.len() != self.dim {
            return Err(Error::invalid(format!(
                "example has dimension {}, set has {}",
                example.features.len(),
                self.dim
            )));
        }
        if !example.features.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("example has non-finite features"));
        }
        self.examples.push(example);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut labels: Vec<ClassId> = self.examples.iter().map(|e| e.label).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    /// Indices of the examples of one class, in insertion order.
    pub fn indices_of(&self, label: ClassId) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn features_of(&self, label: ClassId) -> Vec<Vec<f64>> {
        self.examples
            .iter()
            .filter(|e| e.label == label)
            .map(|e| e.features.clone())
            .collect()
    }

    pub fn count_of(&self, label: ClassId) -> usize {
        self.examples.iter().filter(|e| e.label == label).count()
    }

    /// New set containing only the examples whose index is listed.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledFeatureSet> {
        let mut out = LabeledFeatureSet::new(self.dim);
        for &i in indices {
            let e = self
                .examples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("subset: index {} out of range", i)))?;
            out.examples.push(e.clone());
        }
        Ok(out)
    }

    /// New set without the synthetic examples.
    pub fn real_only(&self) -> LabeledFeatureSet {
        LabeledFeatureSet {
            dim: self.dim,
            examples: self.examples.iter().filter(|e| !e.synthetic).cloned().collect(),
        }
    }

    pub fn extend_from(&mut self, other: &LabeledFeatureSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::invalid("extend_from: dimension mismatch"));
        }
        self.examples.extend(other.examples.iter().cloned());
        Ok(())
    }
}

// ----- spiral benchmark -------------------------------------------------

/// Four interleaved spiral arms in the plane; the top and bottom arms are the
/// data-rich base classes, the left and right arms the low-shot novel ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpiralConfig {
    pub points_per_base_class: usize,
    pub points_per_novel_class: usize,
    /// Seeds marked per novel class; must not exceed the novel pool size.
    pub seeds_per_novel_class: usize,
    /// Length of each arm in radians.
    pub angular_extent: f64,
    /// Standard deviation of displacement along the radial direction.
    pub radial_noise: f64,
    pub seed: u64,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        SpiralConfig {
            points_per_base_class: 256,
            points_per_novel_class: 320,
            seeds_per_novel_class: 4,
            angular_extent: 0.8 * std::f64::consts::PI,
            radial_noise: 0.03,
            seed: 0,
        }
    }
}

/// Arm start offset in parameter space; keeps points away from the origin.
const SPIRAL_T0: f64 = 0.6;

/// Fraction of the angular extent that the low-shot seeds span. Seeds come
/// from one contiguous arc segment rather than the whole arm: a handful of
/// labeled examples rarely covers a class's support, and the augmentation
/// experiments rely on exactly that gap.
const SEED_WINDOW_FRACTION: f64 = 0.10;

/// Seed windows start near the outer end of the arm, where a few clustered
/// samples misplace the class centroid the most.
const SEED_WINDOW_MIN_START: f64 = 0.8;

/// Phase of each arm, indexed by class label 0..4.
/// 0 = top, 1 = bottom (base); 2 = left, 3 = right (novel).
const SPIRAL_PHASE: [f64; 4] = [
    std::f64::consts::FRAC_PI_2,
    3.0 * std::f64::consts::FRAC_PI_2,
    std::f64::consts::PI,
    0.0,
];

fn spiral_point(t: f64, phase: f64, radial_offset: f64, extent: f64) -> [f64; 2] {
    let scale = 1.0 / (SPIRAL_T0 + extent);
    let rho = t * scale + radial_offset;
    [rho * (t + phase).cos(), rho * (t + phase).sin()]
}

/// Generates the spiral benchmark. Returns (base, novel seeds, novel held-out).
pub fn gen_spiral(
    cfg: &SpiralConfig,
) -> Result<(LabeledFeatureSet, LabeledFeatureSet, LabeledFeatureSet)> {
    if cfg.points_per_base_class == 0 || cfg.points_per_novel_class == 0 {
        return Err(Error::invalid("gen_spiral: class sizes must be positive"));
    }
    if cfg.seeds_per_novel_class == 0 || cfg.seeds_per_novel_class >= cfg.points_per_novel_class {
        return Err(Error::invalid(
            "gen_spiral: seeds per novel class must be in 1..points_per_novel_class",
        ));
    }
    if !(cfg.angular_extent > 0.0) || cfg.radial_noise < 0.0 {
        return Err(Error::invalid("gen_spiral: bad extent or noise"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arm = |label: u32, count: usize, role: Role, t_lo: f64, t_span: f64, rng: &mut ChaCha8Rng| {
        let mut set = LabeledFeatureSet::new(2);
        for _ in 0..count {
            let t = t_lo + rng.gen_range(0.0..t_span);
            let eps: f64 = rng.sample(StandardNormal);
            let p = spiral_point(t, SPIRAL_PHASE[label as usize], cfg.radial_noise * eps, cfg.angular_extent);
            set.push(Example { label: ClassId(label), role, synthetic: false, features: p.to_vec() })
                .unwrap();
        }
        set
    };

    let mut base = arm(0, cfg.points_per_base_class, Role::Base, SPIRAL_T0, cfg.angular_extent, &mut rng);
    let bottom = arm(1, cfg.points_per_base_class, Role::Base, SPIRAL_T0, cfg.angular_extent, &mut rng);
    base.extend_from(&bottom)?;

    let mut seeds = LabeledFeatureSet::new(2);
    let mut heldout = LabeledFeatureSet::new(2);
    for label in [2u32, 3u32] {
        let start = rng.gen_range(SEED_WINDOW_MIN_START..(1.0 - SEED_WINDOW_FRACTION));
        let window = arm(
            label,
            cfg.seeds_per_novel_class,
            Role::Novel,
            SPIRAL_T0 + start * cfg.angular_extent,
            SEED_WINDOW_FRACTION * cfg.angular_extent,
            &mut rng,
        );
        seeds.extend_from(&window)?;
        let rest = arm(
            label,
            cfg.points_per_novel_class - cfg.seeds_per_novel_class,
            Role::Novel,
            SPIRAL_T0,
            cfg.angular_extent,
            &mut rng,
        );
        heldout.extend_from(&rest)?;
    }
    Ok((base, seeds, heldout))
}

// ----- cluster benchmark ------------------------------------------------

/// Gaussian clusters where each novel class is a convex blend of nearby base
/// classes, in mean and in covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub dim: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub examples_per_base_class: usize,
    pub examples_per_novel_class: usize,
    pub heldout_per_base_class: usize,
    pub seeds_per_novel_class: usize,
    /// Scales every per-class standard deviation.
    pub covariance_scale: f64,
    /// Range of how many base classes blend into one novel class.
    pub min_parents: usize,
    pub max_parents: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            dim: 16,
            base_classes: 20,
            novel_classes: 5,
            examples_per_base_class: 120,
            examples_per_novel_class: 80,
            heldout_per_base_class: 40,
            seeds_per_novel_class: 1,
            covariance_scale: 0.8,
            min_parents: 2,
            max_parents: 3,
            seed: 0,
        }
    }
}

/// The exact population parameters behind a cluster benchmark, derived
/// deterministically from the config.
#[derive(Debug, Clone)]
pub struct ClusterGroundTruth {
    pub base_means: Vec<Vec<f64>>,
    /// Diagonal of each base class covariance.
    pub base_cov_diag: Vec<Vec<f64>>,
    pub novel_means: Vec<Vec<f64>>,
    pub novel_cov_diag: Vec<Vec<f64>>,
    /// Parent base classes and blend weights per novel class.
    pub parents: Vec<Vec<(usize, f64)>>,
}

fn cluster_rng(cfg: &ClusterConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

/// Population parameters for `gen_clusters`, consuming the leading draws of
/// the same stream the generator uses.
pub fn cluster_ground_truth(cfg: &ClusterConfig, rng: &mut ChaCha8Rng) -> Result<ClusterGroundTruth> {
    if cfg.dim == 0 || cfg.base_classes < 2 || cfg.novel_classes == 0 {
        return Err(Error::invalid("clusters: need dim >= 1, >= 2 base classes, >= 1 novel"));
    }
    if cfg.min_parents == 0 || cfg.min_parents > cfg.max_parents || cfg.max_parents > cfg.base_classes {
        return Err(Error::invalid("clusters: bad parent range"));
    }
    if !(cfg.covariance_scale > 0.0) {
        return Err(Error::invalid("clusters: covariance scale must be positive"));
    }
    let d = cfg.dim;
    let mut base_means = Vec::with_capacity(cfg.base_classes);
    let mut base_cov_diag = Vec::with_capacity(cfg.base_classes);
    for _ in 0..cfg.base_classes {
        let mean: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // Log-uniform per-dimension variances: each class is noisy in some
        // directions and tight in others, like embedding features, so a
        // classifier gains from knowing the shape rather than just the mean.
        let var: Vec<f64> = (0..d)
            .map(|_| {
                cfg.covariance_scale
                    * cfg.covariance_scale
                    * 10f64.powf(rng.gen_range(-1.5..0.5))
            })
            .collect();
        base_means.push(mean);
        base_cov_diag.push(var);
    }

    let mut novel_means = Vec::with_capacity(cfg.novel_classes);
    let mut novel_cov_diag = Vec::with_capacity(cfg.novel_classes);
    let mut parents = Vec::with_capacity(cfg.novel_classes);
    for _ in 0..cfg.novel_classes {
        let draft: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let count = rng.gen_range(cfg.min_parents..=cfg.max_parents);
        let mut order: Vec<usize> = (0..cfg.base_classes).collect();
        order.sort_by(|&a, &b| {
            let da = crate::linalg::squared_distance(&base_means[a], &draft);
            let db = crate::linalg::squared_distance(&base_means[b], &draft);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        let chosen = &order[..count];
        let raw: Vec<f64> = (0..count).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for (&p, &w) in chosen.iter().zip(&weights) {
            for i in 0..d {
                mean[i] += w * base_means[p][i];
                var[i] += w * base_cov_diag[p][i];
            }
        }
        parents.push(chosen.iter().copied().zip(weights).collect());
        novel_means.push(mean);
        novel_cov_diag.push(var);
    }
    Ok(ClusterGroundTruth { base_means, base_cov_diag, novel_means, novel_cov_diag, parents })
}

fn gaussian_sample(mean: &[f64], cov_diag: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .zip(cov_diag)
        .map(|(&m, &v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates the cluster benchmark.
/// Returns (base, novel seeds, novel held-out, base held-out).
pub fn gen_clusters(
    cfg: &ClusterConfig,
) -> Result<(LabeledFeatureSet, LabeledFeatureSet, LabeledFeatureSet, LabeledFeatureSet)> {
    if cfg.examples_per_base_class == 0 || cfg.examples_per_novel_class == 0 {
        return Err(Error::invalid("gen_clusters: class sizes must be positive"));
    }
    if cfg.seeds_per_novel_class == 0 || cfg.seeds_per_novel_class >= cfg.examples_per_novel_class {
        return Err(Error::invalid(
            "gen_clusters: seeds per novel class must be in 1..examples_per_novel_class",
        ));
    }
    let mut rng = cluster_rng(cfg);
    let truth = cluster_ground_truth(cfg, &mut rng)?;
    let d = cfg.dim;

    let mut base = LabeledFeatureSet::new(d);
    let mut base_heldout = LabeledFeatureSet::new(d);
    for c in 0..cfg.base_classes {
        let label = ClassId(c as u32);
        for _ in 0..cfg.examples_per_base_class {
            base.push(Example {
                label,
                role: Role::Base,
                synthetic: false,
                features: gaussian_sample(&truth.base_means[c], &truth.base_cov_diag[c], &mut rng),
            })?;
        }
        for _ in 0..cfg.heldout_per_base_class {
            base_heldout.push(Example {
                label,
                role: Role::Base,
                synthetic: false,
                features: gaussian_sample(&truth.base_means[c], &truth.base_cov_diag[c], &mut rng),
            })?;
        }
    }

    let mut seeds = LabeledFeatureSet::new(d);
    let mut heldout = LabeledFeatureSet::new(d);
    for j in 0..cfg.novel_classes {
        let label = ClassId((cfg.base_classes + j) as u32);
        for i in 0..cfg.examples_per_novel_class {
            let e = Example {
                label,
                role: Role::Novel,
                synthetic: false,
                features: gaussian_sample(&truth.novel_means[j], &truth.novel_cov_diag[j], &mut rng),
            };
            if i < cfg.seeds_per_novel_class {
                seeds.push(e)?;
            } else {
                heldout.push(e)?;
            }
        }
    }
    Ok((base, seeds, heldout, base_heldout))
}

// ----- CSV feature files ------------------------------------------------

/// Writes `label,f0,...,f{D-1}` rows. Features are printed with 17
/// significant digits so reading them back is bit-exact.
pub fn save_features(set: &LabeledFeatureSet, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "label")?;
    for i in 0..set.dim() {
        write!(w, ",f{}", i)?;
    }
    writeln!(w)?;
    for e in set.examples() {
        write!(w, "{}", e.label.0)?;
        for &v in &e.features {
            write!(w, ",{:.16e}", v)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature CSV produced by `save_features`. The caller states the
/// role of the examples, which the file format does not carry.
pub fn load_features(path: &Path, role: Role) -> Result<LabeledFeatureSet> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{}: empty file", path.display())))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() < 2 || fields[0] != "label" {
        return Err(Error::Schema(format!(
            "{}: header must be label,f0,...  got {:?}",
            path.display(),
            header
        )));
    }
    for (i, f) in fields[1..].iter().enumerate() {
        if *f != format!("f{}", i) {
            return Err(Error::Schema(format!(
                "{}: unexpected header column {:?}",
                path.display(),
                f
            )));
        }
    }
    let dim = fields.len() - 1;
    let mut set = LabeledFeatureSet::new(dim);
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != dim + 1 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} columns, got {}", dim + 1, cols.len()),
            });
        }
        let label: u32 = cols[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad label {:?}", cols[0]),
        })?;
        let mut features = Vec::with_capacity(dim);
        for c in &cols[1..] {
            let v: f64 = c.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad number {:?}", c),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite feature {:?}", c),
                });
            }
            features.push(v);
        }
        set.push(Example { label: ClassId(label), role, synthetic: false, features })
            .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
    }
    Ok(set)
}

// ----- checkpoints ------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// A full training snapshot: model, optimizer moments, episode counter,
/// and the configuration that produced them. JSON round-trips are
/// bit-exact, so saving, loading, and saving again reproduces the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: crate::episodic::TrainConfig,
    pub dims: crate::ganstack::Dims,
    pub params: crate::diffengine::ParamStore,
    pub mixture: Option<crate::ganstack::MixtureNoise>,
    pub episodes_done: u64,
    pub adam_d: crate::diffengine::AdamState,
    pub adam_g: crate::diffengine::AdamState,
}

impl Checkpoint {
    pub fn from_state(cfg: &crate::episodic::TrainConfig, state: &crate::episodic::TrainState) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: *cfg,
            dims: state.bundle.dims,
            params: state.bundle.params.clone(),
            mixture: state.bundle.mixture.clone(),
            episodes_done: state.episodes_done,
            adam_d: state.adam_d.clone(),
            adam_g: state.adam_g.clone(),
        }
    }

    /// Rebuilds the live training state. The stored configuration rides
    /// along so a resumed run continues under the exact same settings.
    pub fn into_state(self) -> Result<(crate::episodic::TrainConfig, crate::episodic::TrainState)> {
        self.config.validate()?;
        self.dims.validate()?;
        if !self.params.all_finite() {
            return Err(Error::Schema("checkpoint holds non-finite parameters".into()));
        }
        if self.config.variant.uses_mixture() != self.mixture.is_some() {
            return Err(Error::Schema(
                "checkpoint mixture does not match its variant".into(),
            ));
        }
        let bundle = crate::ganstack::ModelBundle {
            variant: self.config.variant,
            dims: self.dims,
            params: self.params,
            mixture: self.mixture,
        };
        let state = crate::episodic::TrainState {
            bundle,
            adam_d: self.adam_d,
            adam_g: self.adam_g,
            episodes_done: self.episodes_done,
        };
        Ok((self.config, state))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, checking the format version before touching the
/// rest of the structure.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema("checkpoint lacks a format_version field".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}
