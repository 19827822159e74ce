//! Meta-training: episode sampling over the base classes, the alternating
//! discriminator/generator update loop, the learning-rate schedule, and the
//! deterministic seed derivation shared by every stage.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{ClassId, Example, LabeledFeatureSet, Role};
use crate::diffengine::{adam_step, AdamState, Tape};
use crate::error::{Error, Result};
use crate::ganstack::{total_objective, Batch, Dims, LossReport, LossWeights, ModelBundle, Variant};
use crate::protospace::{compute_prototypes, nbs_hard, nbs_soft, PrototypeTable, TranslationMap};

/// Seed domains. Every random stream in the system is keyed by
/// (master seed, domain, index) so stages never share or reuse draws.
pub const DOMAIN_INIT: u64 = 0;
pub const DOMAIN_EPISODE: u64 = 1;
pub const DOMAIN_TRIAL: u64 = 2;
pub const DOMAIN_AUGMENT: u64 = 3;
/// Derives one training seed per model variant from a shared experiment seed.
pub const DOMAIN_VARIANT: u64 = 4;

/// Mixes (master, domain, index) into one well-spread 64-bit seed.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    let x = master
        ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How each novel class selects its related base classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NbsMode {
    /// Softmax-of-similarity weights over every base class.
    Soft,
    /// Uniform weights over the k nearest base classes.
    Hard { k: usize },
}

/// Everything that defines a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub episodes: u64,
    /// Total examples per episode batch.
    pub batch_size: usize,
    /// Classes held out within each episode to play the novel role.
    pub meta_novel_classes: usize,
    /// Examples kept per meta-novel class.
    pub shots_per_class: usize,
    pub lambda_cyc: f64,
    pub lambda_cov: f64,
    /// Truncation rank of the covariance distance.
    pub kyfan_m: usize,
    pub noise_dim: usize,
    pub mixture_components: usize,
    pub hidden_dim: usize,
    pub lr0: f64,
    pub anneal_every: u64,
    pub anneal_factor: f64,
    pub nbs: NbsMode,
    pub non_saturating: bool,
    /// Draw meta-base examples by first picking a retrieved class uniformly
    /// instead of uniformly over the example pool.
    pub class_uniform_meta_base: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// The reference full-scale setting.
    pub fn paper() -> Self {
        TrainConfig {
            variant: Variant::CCov,
            episodes: 100_000,
            batch_size: 1000,
            meta_novel_classes: 20,
            shots_per_class: 10,
            lambda_cyc: 5.0,
            lambda_cov: 0.5,
            kyfan_m: 10,
            noise_dim: 100,
            mixture_components: 50,
            hidden_dim: 512,
            lr0: 1e-4,
            anneal_every: 20_000,
            anneal_factor: 0.5,
            nbs: NbsMode::Soft,
            non_saturating: false,
            class_uniform_meta_base: false,
            seed: 0,
        }
    }

    /// Small setting sized for the two-dimensional spiral data.
    ///
    /// Single-shot episodes make each adversarial target a lone point, so
    /// generators that ignore their input can win the minimax game; the
    /// covariance weight is raised so structure transfer resists that.
    pub fn desk_spiral() -> Self {
        TrainConfig {
            variant: Variant::CCov,
            episodes: 20000,
            batch_size: 48,
            meta_novel_classes: 1,
            shots_per_class: 1,
            lambda_cyc: 5.0,
            lambda_cov: 2.0,
            kyfan_m: 2,
            noise_dim: 4,
            mixture_components: 5,
            hidden_dim: 64,
            lr0: 1e-3,
            anneal_every: 2000,
            anneal_factor: 0.5,
            nbs: NbsMode::Soft,
            non_saturating: false,
            class_uniform_meta_base: false,
            seed: 0,
        }
    }

    /// Small setting sized for the Gaussian-cluster data.
    pub fn desk_clusters() -> Self {
        TrainConfig {
            variant: Variant::CCov,
            episodes: 4000,
            batch_size: 48,
            meta_novel_classes: 3,
            shots_per_class: 4,
            lambda_cyc: 5.0,
            lambda_cov: 0.5,
            kyfan_m: 6,
            noise_dim: 8,
            mixture_components: 5,
            hidden_dim: 64,
            lr0: 1e-3,
            anneal_every: 1000,
            anneal_factor: 0.5,
            nbs: NbsMode::Soft,
            non_saturating: false,
            class_uniform_meta_base: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.meta_novel_classes == 0
            || self.shots_per_class == 0
            || self.kyfan_m == 0
            || self.noise_dim == 0
            || self.mixture_components == 0
            || self.hidden_dim == 0
            || self.anneal_every == 0
        {
            return Err(Error::invalid("all training counts must be positive"));
        }
        if self.batch_size < self.meta_novel_classes * self.shots_per_class {
            return Err(Error::invalid(format!(
                "batch size {} cannot hold {} classes x {} shots",
                self.batch_size, self.meta_novel_classes, self.shots_per_class
            )));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(Error::invalid("anneal factor must lie in (0, 1]"));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::invalid("initial learning rate must be positive and finite"));
        }
        if !self.lambda_cyc.is_finite()
            || !self.lambda_cov.is_finite()
            || self.lambda_cyc < 0.0
            || self.lambda_cov < 0.0
        {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if let NbsMode::Hard { k } = self.nbs {
            if k == 0 {
                return Err(Error::invalid("hard selection needs k >= 1"));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cyc: self.lambda_cyc,
            lambda_cov: self.lambda_cov,
            kyfan_m: self.kyfan_m,
            non_saturating: self.non_saturating,
        }
    }
}

/// One sampled episode: the held-out shots, the sampled base-side examples,
/// and the map and prototypes computed from this episode alone.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub novel: LabeledFeatureSet,
    pub base: LabeledFeatureSet,
    pub map: TranslationMap,
    pub protos: PrototypeTable,
}

fn build_map(
    protos: &PrototypeTable,
    novel: &[ClassId],
    base: &[ClassId],
    nbs: NbsMode,
) -> Result<TranslationMap> {
    match nbs {
        NbsMode::Soft => nbs_soft(protos, novel, base),
        NbsMode::Hard { k } => nbs_hard(protos, novel, base, k.min(base.len())),
    }
}

/// Draws `n` distinct indices from `0..len` by partial shuffle.
pub(crate) fn sample_indices(len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(n <= len);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Samples one episode: split off meta-novel classes, keep a few shots each,
/// compute prototypes (shots only for the novel side, all examples for the
/// base side), build the translation map over the remaining classes, and
/// fill the batch with uniform draws from the retrieved classes.
pub fn sample_episode(
    baseset: &LabeledFeatureSet,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<EpisodeBatch> {
    cfg.validate()?;
    let classes = baseset.classes();
    if classes.len() <= cfg.meta_novel_classes {
        return Err(Error::invalid(format!(
            "need more than {} classes to sample an episode, found {}",
            cfg.meta_novel_classes,
            classes.len()
        )));
    }
    let picked = sample_indices(classes.len(), cfg.meta_novel_classes, rng);
    let mut meta_novel: Vec<ClassId> = picked.iter().map(|&i| classes[i]).collect();
    meta_novel.sort_unstable();
    let meta_base: Vec<ClassId> =
        classes.iter().copied().filter(|c| !meta_novel.contains(c)).collect();

    // Shots for each meta-novel class, drawn without replacement.
    let mut novel = LabeledFeatureSet::new(baseset.dim());
    for &c in &meta_novel {
        let pool = baseset.indices_of(c);
        if pool.len() < cfg.shots_per_class {
            return Err(Error::invalid(format!(
                "class {} has {} examples but the episode needs {}",
                c,
                pool.len(),
                cfg.shots_per_class
            )));
        }
        for si in sample_indices(pool.len(), cfg.shots_per_class, rng) {
            let e = &baseset.examples()[pool[si]];
            novel.push(Example {
                label: e.label,
                role: Role::Novel,
                synthetic: false,
                features: e.features.clone(),
            })?;
        }
    }

    // Novel prototypes come from the shots alone; base prototypes from every
    // example of the class.
    let mut protos = compute_prototypes(&novel)?;
    let mut base_protos = PrototypeTable::new(baseset.dim());
    for &c in &meta_base {
        let feats = baseset.features_of(c);
        let mut mean = vec![0.0; baseset.dim()];
        for f in &feats {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / feats.len() as f64;
            }
        }
        base_protos.insert(c, mean)?;
    }
    protos = protos.merge(&base_protos)?;

    let map = build_map(&protos, &meta_novel, &meta_base, cfg.nbs)?;
    let retrieved = map.retrieved_base_classes();
    if retrieved.is_empty() {
        return Err(Error::invalid("translation map retrieved no base classes"));
    }

    // Fill the rest of the batch with uniform draws from the retrieved pool.
    let fill = cfg.batch_size - cfg.meta_novel_classes * cfg.shots_per_class;
    let mut base = LabeledFeatureSet::new(baseset.dim());
    let pool: Vec<usize> =
        retrieved.iter().flat_map(|&c| baseset.indices_of(c)).collect();
    for _ in 0..fill {
        let i = if cfg.class_uniform_meta_base {
            let c = retrieved[rng.gen_range(0..retrieved.len())];
            let class_pool = baseset.indices_of(c);
            class_pool[rng.gen_range(0..class_pool.len())]
        } else {
            pool[rng.gen_range(0..pool.len())]
        };
        let e = &baseset.examples()[i];
        base.push(Example {
            label: e.label,
            role: Role::Base,
            synthetic: false,
            features: e.features.clone(),
        })?;
    }
    Ok(EpisodeBatch { novel, base, map, protos })
}

/// Learning rate at a given episode: the initial rate decayed stepwise.
pub fn lr_schedule(cfg: &TrainConfig, episode: u64) -> f64 {
    cfg.lr0 * cfg.anneal_factor.powi((episode / cfg.anneal_every) as i32)
}

/// Output-slot index of every base class in the base discriminator: rank in
/// ascending class order, stable across episodes.
pub fn global_base_slots(baseset: &LabeledFeatureSet) -> BTreeMap<ClassId, usize> {
    baseset.classes().into_iter().enumerate().map(|(i, c)| (c, i)).collect()
}

/// Everything the training loop mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub adam_d: AdamState,
    pub adam_g: AdamState,
    pub episodes_done: u64,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: u64,
    pub lr: f64,
    pub report: LossReport,
}

/// Initializes a fresh bundle and its two optimizers for this data set.
pub fn init_state(baseset: &LabeledFeatureSet, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if baseset.is_empty() {
        return Err(Error::invalid("cannot train on an empty base set"));
    }
    let dims = Dims {
        feature: baseset.dim(),
        noise: cfg.noise_dim,
        hidden: cfg.hidden_dim,
        novel_slots: cfg.meta_novel_classes,
        base_slots: baseset.classes().len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DOMAIN_INIT, 0));
    let bundle = ModelBundle::init(cfg.variant, dims, cfg.mixture_components, &mut rng)?;
    let adam_d = AdamState::new(&bundle.params, &["dn", "db"]);
    let adam_g = AdamState::new(&bundle.params, &["gn", "gb"]);
    Ok(TrainState { bundle, adam_d, adam_g, episodes_done: 0 })
}

fn ensure_finite(report: &LossReport, episode: u64) -> Result<()> {
    let terms = [
        ("adv_n", report.adv_n),
        ("adv_b", report.adv_b),
        ("cyc", report.cyc),
        ("cov", report.cov),
        ("total_g", report.total_generator),
        ("total_d", report.total_discriminator),
    ];
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "episode {}: loss term {} became {}",
                episode, name, v
            )));
        }
    }
    Ok(())
}

/// Runs `count` episodes on an existing state: per episode one
/// discriminator ascent step, then one generator descent step, each on a
/// freshly built objective. Appends one log row per episode.
pub fn run_episodes(
    baseset: &LabeledFeatureSet,
    cfg: &TrainConfig,
    state: &mut TrainState,
    count: u64,
) -> Result<Vec<TrainLogRow>> {
    cfg.validate()?;
    let slots = global_base_slots(baseset);
    let weights = cfg.loss_weights();
    let mut log = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let episode = state.episodes_done;
        let lr = lr_schedule(cfg, episode);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DOMAIN_EPISODE, episode));
        let ep = sample_episode(baseset, cfg, &mut rng)?;
        let batch = Batch {
            novel: &ep.novel,
            base: &ep.base,
            map: &ep.map,
            protos: &ep.protos,
            base_slots: &slots,
        };

        // Discriminator phase: ascend the adversarial objective.
        let mut tape = Tape::new();
        let nodes = total_objective(&mut tape, &state.bundle, &batch, &weights, &mut rng)?;
        let report = nodes.report(&tape);
        ensure_finite(&report, episode)?;
        let descend = tape.scale(nodes.total_discriminator, -1.0);
        let grads = tape.backward(descend, &state.bundle.params)?;
        adam_step(&mut state.bundle.params, &grads, &mut state.adam_d, lr)?;

        // Generator phase: fresh forward pass against the updated
        // discriminators, fresh noise from the same episode stream.
        let mut tape = Tape::new();
        let nodes = total_objective(&mut tape, &state.bundle, &batch, &weights, &mut rng)?;
        let g_report = nodes.report(&tape);
        ensure_finite(&g_report, episode)?;
        let grads = tape.backward(nodes.total_generator, &state.bundle.params)?;
        adam_step(&mut state.bundle.params, &grads, &mut state.adam_g, lr)?;

        log.push(TrainLogRow { episode, lr, report });
        state.episodes_done += 1;
    }
    Ok(log)
}

/// Trains a fresh model for the configured number of episodes.
pub fn train(
    baseset: &LabeledFeatureSet,
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<TrainLogRow>)> {
    let mut state = init_state(baseset, cfg)?;
    let log = run_episodes(baseset, cfg, &mut state, cfg.episodes)?;
    Ok((state, log))
}

/// Writes the log as CSV with a fixed header and 17-digit floats, so equal
/// runs produce byte-identical files.
pub fn write_training_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "episode,lr,adv_n,adv_b,cyc,cov,total_g,total_d")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.episode,
            r.lr,
            r.report.adv_n,
            r.report.adv_b,
            r.report.cyc,
            r.report.cov,
            r.report.total_generator,
            r.report.total_discriminator,
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{gen_spiral, SpiralConfig};

    /// Four well-separated clusters in two dimensions, enough examples to
    /// sample small episodes.
    fn toy_baseset() -> LabeledFeatureSet {
        let mut set = LabeledFeatureSet::new(2);
        let centers = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0), (4.0, 4.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (label, (cx, cy)) in centers.iter().enumerate() {
            for _ in 0..12 {
                let dx: f64 = rng.gen_range(-0.5..0.5);
                let dy: f64 = rng.gen_range(-0.5..0.5);
                set.push(Example {
                    label: ClassId(label as u32),
                    role: Role::Base,
                    synthetic: false,
                    features: vec![cx + dx, cy + dy],
                })
                .unwrap();
            }
        }
        set
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            variant: Variant::CCov,
            episodes: 10,
            batch_size: 10,
            meta_novel_classes: 2,
            shots_per_class: 3,
            lambda_cyc: 5.0,
            lambda_cov: 0.5,
            kyfan_m: 2,
            noise_dim: 2,
            mixture_components: 3,
            hidden_dim: 8,
            lr0: 1e-3,
            anneal_every: 4,
            anneal_factor: 0.5,
            nbs: NbsMode::Soft,
            non_saturating: false,
            class_uniform_meta_base: false,
            seed: 7,
        }
    }

    #[test]
    fn derive_seed_separates_domains_and_indices() {
        let a = derive_seed(1, DOMAIN_EPISODE, 0);
        assert_eq!(a, derive_seed(1, DOMAIN_EPISODE, 0));
        assert_ne!(a, derive_seed(1, DOMAIN_EPISODE, 1));
        assert_ne!(a, derive_seed(1, DOMAIN_TRIAL, 0));
        assert_ne!(a, derive_seed(2, DOMAIN_EPISODE, 0));
    }

    #[test]
    fn episode_composition_is_exact() {
        let set = toy_baseset();
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&set, &cfg, &mut rng).unwrap();
        assert_eq!(ep.novel.len(), 6, "2 classes x 3 shots");
        assert_eq!(ep.base.len(), 4, "batch of 10 leaves 4 fill examples");
        let novel_classes = ep.novel.classes();
        assert_eq!(novel_classes.len(), 2);
        for e in ep.base.examples() {
            assert!(!novel_classes.contains(&e.label), "sides must stay disjoint");
            assert!(
                ep.map.retrieved_base_classes().contains(&e.label),
                "fill examples come from retrieved classes"
            );
        }
        for c in &novel_classes {
            assert_eq!(ep.novel.count_of(*c), 3);
        }
    }

    #[test]
    fn episode_prototypes_use_only_the_shots() {
        let set = toy_baseset();
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&set, &cfg, &mut rng).unwrap();
        for c in ep.novel.classes() {
            let feats = ep.novel.features_of(c);
            let mut mean = vec![0.0; 2];
            for f in &feats {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v / feats.len() as f64;
                }
            }
            let proto = ep.protos.get(c).unwrap();
            for (p, m) in proto.iter().zip(&mean) {
                assert!((p - m).abs() < 1e-12, "prototype must be the shot mean");
            }
        }
    }

    #[test]
    fn episode_sampling_is_deterministic() {
        let set = toy_baseset();
        let cfg = tiny_cfg();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let ea = sample_episode(&set, &cfg, &mut a).unwrap();
            let eb = sample_episode(&set, &cfg, &mut b).unwrap();
            assert_eq!(ea.novel.examples(), eb.novel.examples());
            assert_eq!(ea.base.examples(), eb.base.examples());
        }
    }

    #[test]
    fn episode_sampling_rejects_thin_data() {
        let set = toy_baseset();
        let mut cfg = tiny_cfg();
        cfg.meta_novel_classes = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_episode(&set, &cfg, &mut rng).is_err(), "no class may remain base");

        let mut cfg = tiny_cfg();
        cfg.shots_per_class = 13;
        cfg.batch_size = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_episode(&set, &cfg, &mut rng).is_err(), "not enough examples per class");
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = tiny_cfg();
        cfg.batch_size = 5;
        assert!(cfg.validate().is_err(), "batch must hold all shots");
        let mut cfg = tiny_cfg();
        cfg.anneal_factor = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.anneal_factor = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.nbs = NbsMode::Hard { k: 0 };
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.lr0 = 0.0;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        assert!(TrainConfig::desk_spiral().validate().is_ok());
        assert!(TrainConfig::desk_clusters().validate().is_ok());
    }

    #[test]
    fn schedule_halves_at_the_stated_boundaries() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_schedule(&cfg, 0), 1e-4);
        assert_eq!(lr_schedule(&cfg, 19_999), 1e-4);
        assert_eq!(lr_schedule(&cfg, 20_000), 5e-5);
        assert_eq!(lr_schedule(&cfg, 39_999), 5e-5);
        assert_eq!(lr_schedule(&cfg, 40_000), 2.5e-5);
        assert_eq!(lr_schedule(&cfg, 99_999), 6.25e-6);
    }

    #[test]
    fn zero_episodes_leaves_the_bundle_at_initialization() {
        let set = toy_baseset();
        let mut cfg = tiny_cfg();
        cfg.episodes = 0;
        let fresh = init_state(&set, &cfg).unwrap();
        let (trained, log) = train(&set, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(trained.episodes_done, 0);
        for name in fresh.bundle.params.names() {
            let a = fresh.bundle.params.get(name).unwrap();
            let b = trained.bundle.params.get(name).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn short_run_logs_every_episode_with_finite_losses() {
        let set = toy_baseset();
        let cfg = tiny_cfg();
        let (state, log) = train(&set, &cfg).unwrap();
        assert_eq!(state.episodes_done, 10);
        assert_eq!(log.len(), 10);
        for (i, row) in log.iter().enumerate() {
            assert_eq!(row.episode, i as u64);
            assert_eq!(row.lr, lr_schedule(&cfg, i as u64));
            assert!(row.report.is_finite());
        }
        assert!(state.bundle.params.all_finite());
        // Both optimizers actually stepped every episode.
        assert_eq!(state.adam_d.step_count(), 10);
        assert_eq!(state.adam_g.step_count(), 10);
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let set = toy_baseset();
        let cfg = tiny_cfg();
        let (sa, la) = train(&set, &cfg).unwrap();
        let (sb, lb) = train(&set, &cfg).unwrap();
        assert_eq!(la, lb);
        for name in sa.bundle.params.names() {
            assert_eq!(
                sa.bundle.params.get(name).unwrap().data(),
                sb.bundle.params.get(name).unwrap().data(),
            );
        }
        let mut other = cfg;
        other.seed = 8;
        let (_, lc) = train(&set, &other).unwrap();
        assert_ne!(la, lc, "a different seed must change the run");
    }

    #[test]
    fn all_variants_survive_a_short_run() {
        let set = toy_baseset();
        for variant in Variant::ALL {
            let mut cfg = tiny_cfg();
            cfg.variant = variant;
            cfg.episodes = 4;
            let (_, log) = train(&set, &cfg).unwrap();
            assert_eq!(log.len(), 4, "{} failed to train", variant);
        }
    }

    #[test]
    fn class_uniform_fill_keeps_the_composition() {
        let set = toy_baseset();
        let mut cfg = tiny_cfg();
        cfg.class_uniform_meta_base = true;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&set, &cfg, &mut rng).unwrap();
        assert_eq!(ep.novel.len() + ep.base.len(), cfg.batch_size);
    }

    #[test]
    fn spiral_data_trains_end_to_end() {
        let (base, _, _) = gen_spiral(&SpiralConfig::default()).unwrap();
        let mut cfg = TrainConfig::desk_spiral();
        cfg.episodes = 5;
        let (state, log) = train(&base, &cfg).unwrap();
        assert_eq!(state.episodes_done, 5);
        assert!(log.iter().all(|r| r.report.is_finite()));
    }

    #[test]
    fn log_file_has_the_fixed_header_and_one_row_per_episode() {
        let set = toy_baseset();
        let cfg = tiny_cfg();
        let (_, log) = train(&set, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        write_training_log(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "episode,lr,adv_n,adv_b,cyc,cov,total_g,total_d");
        assert_eq!(lines.len(), 11);
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 8);
            assert_eq!(fields[0], i.to_string());
            let lr: f64 = fields[1].parse().unwrap();
            assert_eq!(lr, log[i].lr);
        }
        // Identical runs write identical bytes.
        let path2 = dir.path().join("train2.csv");
        let (_, log2) = train(&set, &cfg).unwrap();
        write_training_log(&path2, &log2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
