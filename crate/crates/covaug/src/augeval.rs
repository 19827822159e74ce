//! Second stage: augment novel classes with a trained generator, train the
//! final classifier on real plus synthetic examples, and score low-shot
//! accuracy and sample diversity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{ClassId, Example, LabeledFeatureSet, Role};
use crate::diffengine::{adam_step, AdamState, ParamStore, Tape};
use crate::episodic::{derive_seed, sample_indices, NbsMode, DOMAIN_TRIAL};
use crate::error::{Error, Result};
use crate::ganstack::ModelBundle;
use crate::linalg::{self, Matrix};
use crate::protospace::{compute_prototypes, nbs_hard, nbs_soft, PrototypeTable, TranslationMap};

/// How many examples each novel class should end up with, and where its
/// synthetic ones come from.
#[derive(Debug, Clone)]
pub struct AugmentPlan {
    /// Total target count per novel class (real plus synthetic), never
    /// below the class's real count.
    pub targets: BTreeMap<ClassId, usize>,
    /// Source base classes and blend weights per novel class.
    pub sources: TranslationMap,
}

/// Plans augmentation up to the mean base-class capacity: each novel class
/// is topped up to round(mean base class size), or left alone if it is
/// already there.
pub fn make_plan(
    baseset: &LabeledFeatureSet,
    novelset: &LabeledFeatureSet,
    map: &TranslationMap,
) -> Result<AugmentPlan> {
    let base_classes = baseset.classes();
    if base_classes.is_empty() {
        return Err(Error::invalid("cannot plan augmentation without base classes"));
    }
    let mean = baseset.len() as f64 / base_classes.len() as f64;
    let target = mean.round() as usize;
    let mut targets = BTreeMap::new();
    for c in novelset.classes() {
        targets.insert(c, target.max(novelset.count_of(c)));
    }
    Ok(AugmentPlan { targets, sources: map.clone() })
}

/// Fills each novel class to its target: source base classes are drawn with
/// probability proportional to their blend weight, a source example is
/// drawn uniformly within the class, and the translated result is appended
/// with the novel label and the synthetic flag set. Real examples pass
/// through untouched, so filtering synthetic examples recovers the input.
pub fn augment(
    bundle: &ModelBundle,
    plan: &AugmentPlan,
    baseset: &LabeledFeatureSet,
    novelset: &LabeledFeatureSet,
    protos: &PrototypeTable,
    rng: &mut impl Rng,
) -> Result<LabeledFeatureSet> {
    let dim = bundle.dims.feature;
    if novelset.dim() != dim || baseset.dim() != dim || protos.dim() != dim {
        return Err(Error::invalid("augment: feature dimension mismatch"));
    }
    let mut out = LabeledFeatureSet::new(dim);
    out.extend_from(novelset)?;
    for (&y_n, &target) in &plan.targets {
        let have = novelset.count_of(y_n);
        if target <= have {
            continue;
        }
        let need = target - have;
        let l_n = protos.get(y_n)?.to_vec();
        let related: Vec<(ClassId, f64)> = plan
            .sources
            .related(y_n)?
            .iter()
            .copied()
            .filter(|&(b, a)| a > 0.0 && baseset.count_of(b) > 0)
            .collect();
        let total: f64 = related.iter().map(|(_, a)| a).sum();
        if related.is_empty() || total <= 0.0 {
            return Err(Error::invalid(format!(
                "novel class {} has no usable source pool",
                y_n
            )));
        }
        let mut rows = Vec::with_capacity(need);
        for _ in 0..need {
            let mut pick = rng.gen_range(0.0..total);
            let mut chosen = related[related.len() - 1].0;
            for &(b, a) in &related {
                if pick < a {
                    chosen = b;
                    break;
                }
                pick -= a;
            }
            let pool = baseset.indices_of(chosen);
            let e = &baseset.examples()[pool[rng.gen_range(0..pool.len())]];
            let mut row = Vec::with_capacity(bundle.dims.gn_in());
            row.extend_from_slice(&e.features);
            row.extend_from_slice(protos.get(e.label)?);
            row.extend_from_slice(&l_n);
            rows.push(row);
        }
        let generated = bundle.translate_rows(&Matrix::from_rows(&rows)?)?;
        for r in 0..generated.rows() {
            out.push(Example {
                label: y_n,
                role: Role::Novel,
                synthetic: true,
                features: generated.row(r).to_vec(),
            })?;
        }
    }
    Ok(out)
}

/// Labels ranked by ascending Euclidean distance from `x` to each
/// candidate's prototype; distance ties break toward the smaller label.
pub fn nearest_centroid_classify(
    protos: &PrototypeTable,
    x: &[f64],
    candidates: &[ClassId],
) -> Result<Vec<ClassId>> {
    if candidates.is_empty() {
        return Err(Error::invalid("classification needs at least one candidate label"));
    }
    let mut scored: Vec<(f64, ClassId)> = candidates
        .iter()
        .map(|&c| Ok((linalg::squared_distance(x, protos.get(c)?), c)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, c)| c).collect())
}

/// Single affine layer with softmax output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub classes: Vec<ClassId>,
    pub params: ParamStore,
    pub dim: usize,
}

impl LinearModel {
    /// Labels ranked by descending logit; ties break toward the smaller
    /// label (relevant at initialization, where all logits are zero).
    pub fn rank(&self, x: &[f64]) -> Result<Vec<ClassId>> {
        if x.len() != self.dim {
            return Err(Error::invalid("rank: feature dimension mismatch"));
        }
        let mut tape = Tape::new();
        let input = tape.input(Matrix::row_vector(x));
        let w = tape.param(&self.params, "lin.w")?;
        let b = tape.param(&self.params, "lin.b")?;
        let logits = tape.affine(input, w, b)?;
        let row = tape.value(logits).row(0).to_vec();
        let mut scored: Vec<(f64, ClassId)> =
            row.into_iter().zip(self.classes.iter().copied()).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().map(|(_, c)| c).collect())
    }
}

/// Trains the linear classifier from zero initialization with full-batch
/// Adam on the cross-entropy. Deterministic: no randomness enters.
pub fn linear_classify_train(
    data: &LabeledFeatureSet,
    epochs: usize,
    lr: f64,
) -> Result<LinearModel> {
    let classes = data.classes();
    if classes.len() < 2 {
        return Err(Error::invalid("linear classifier needs at least two classes"));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid("learning rate must be positive and finite"));
    }
    let dim = data.dim();
    let slot: BTreeMap<ClassId, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut params = ParamStore::new();
    params.insert("lin.w", Matrix::zeros(dim, classes.len()));
    params.insert("lin.b", Matrix::zeros(1, classes.len()));
    let mut adam = AdamState::new(&params, &["lin"]);

    let rows: Vec<Vec<f64>> = data.examples().iter().map(|e| e.features.clone()).collect();
    let x_all = Matrix::from_rows(&rows)?;
    let targets: Vec<usize> = data.examples().iter().map(|e| slot[&e.label]).collect();
    let inv_n = vec![1.0 / targets.len() as f64; targets.len()];

    for _ in 0..epochs {
        let mut tape = Tape::new();
        let x = tape.input(x_all.clone());
        let w = tape.param(&params, "lin.w")?;
        let b = tape.param(&params, "lin.b")?;
        let logits = tape.affine(x, w, b)?;
        let ll = tape.log_likelihood(logits, &targets, None)?;
        let mean_ll = tape.dot_weights(ll, &inv_n)?;
        let loss = tape.scale(mean_ll, -1.0);
        let grads = tape.backward(loss, &params)?;
        adam_step(&mut params, &grads, &mut adam, lr)?;
    }
    Ok(LinearModel { classes, params, dim })
}

/// Fraction of examples whose true label appears among the first k ranked
/// predictions.
pub fn topk_accuracy(ranked: &[Vec<ClassId>], truth: &[ClassId], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("top-k needs k >= 1"));
    }
    if ranked.len() != truth.len() || ranked.is_empty() {
        return Err(Error::invalid("predictions and labels must align and be non-empty"));
    }
    let hits = ranked
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.iter().take(k).any(|c| c == *t))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Per-class mean pairwise Euclidean distance and the mean across classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_class: Vec<(ClassId, f64)>,
    pub mean: f64,
    /// Classes left out for having fewer than two examples.
    pub skipped: Vec<ClassId>,
}

/// Measures spread within each listed class: the average Euclidean distance
/// over all unordered pairs, then the mean across measured classes.
pub fn diversity(set: &LabeledFeatureSet, classes: &[ClassId]) -> Result<DiversityReport> {
    if classes.is_empty() {
        return Err(Error::invalid("diversity needs at least one class to measure"));
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for &c in classes {
        let feats = set.features_of(c);
        if feats.len() < 2 {
            skipped.push(c);
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..feats.len() {
            for j in (i + 1)..feats.len() {
                sum += linalg::distance(&feats[i], &feats[j]);
                pairs += 1;
            }
        }
        per_class.push((c, sum / pairs as f64));
    }
    if per_class.is_empty() {
        return Err(Error::invalid("no measured class has two examples"));
    }
    let mean = per_class.iter().map(|(_, d)| d).sum::<f64>() / per_class.len() as f64;
    Ok(DiversityReport { per_class, mean, skipped })
}

/// Which label space the final classifier competes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSetting {
    /// Novel classes only, tested on held-out novel examples.
    Lsl,
    /// All classes, tested on held-out novel and base examples together.
    Glsl,
}

impl fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSetting::Lsl => "lsl",
            EvalSetting::Glsl => "glsl",
        })
    }
}

impl FromStr for EvalSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsl" => Ok(EvalSetting::Lsl),
            "glsl" => Ok(EvalSetting::Glsl),
            other => Err(Error::invalid(format!("unknown setting {:?}; expected lsl or glsl", other))),
        }
    }
}

/// Final classifier choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classifier {
    /// Nearest class centroid in feature space.
    Centroid,
    /// Trained affine-plus-softmax model.
    Linear { epochs: usize, lr: f64 },
}

/// Everything one evaluation run needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub setting: EvalSetting,
    /// Low-shot examples drawn per novel class and trial.
    pub shots: usize,
    pub trials: usize,
    pub top_k: usize,
    pub classifier: Classifier,
    /// When false, the classifier trains on the bare shots: the
    /// no-augmentation control.
    pub augment: bool,
    pub nbs: NbsMode,
    pub seed: u64,
}

/// Accuracy and diversity aggregated over evaluation trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    pub shots: usize,
    pub top_k: usize,
    pub trial_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Population standard deviation over trials.
    pub std_accuracy: f64,
    /// Mean over trials of each novel class's within-class spread, measured
    /// on the synthetic examples when augmenting, else on the shots.
    pub diversity_per_class: Vec<(ClassId, f64)>,
    pub mean_diversity: Option<f64>,
    /// Mean base-class training count over mean novel-class training count;
    /// recorded for the all-class setting.
    pub base_to_novel_ratio: Option<f64>,
}

fn rank_all(
    classifier: &Classifier,
    train: &LabeledFeatureSet,
    candidates: &[ClassId],
    test: &LabeledFeatureSet,
) -> Result<(Vec<Vec<ClassId>>, Vec<ClassId>)> {
    let ranked: Vec<Vec<ClassId>> = match classifier {
        Classifier::Centroid => {
            let protos = compute_prototypes(train)?;
            test.examples()
                .iter()
                .map(|e| nearest_centroid_classify(&protos, &e.features, candidates))
                .collect::<Result<_>>()?
        }
        Classifier::Linear { epochs, lr } => {
            let model = linear_classify_train(train, *epochs, *lr)?;
            test.examples().iter().map(|e| model.rank(&e.features)).collect::<Result<_>>()?
        }
    };
    let truth = test.examples().iter().map(|e| e.label).collect();
    Ok((ranked, truth))
}

/// One trial's ingredients, before the setting decides candidates and the
/// test pool: augmented novel training data, merged prototypes, and the
/// held-out novel test examples.
fn trial_data(
    bundle: &ModelBundle,
    baseset: &LabeledFeatureSet,
    novel_pool: &LabeledFeatureSet,
    opts: &EvalOptions,
    trial: u64,
) -> Result<(LabeledFeatureSet, LabeledFeatureSet, LabeledFeatureSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, DOMAIN_TRIAL, trial));
    let mut shots = LabeledFeatureSet::new(novel_pool.dim());
    let mut heldout = LabeledFeatureSet::new(novel_pool.dim());
    for c in novel_pool.classes() {
        let pool = novel_pool.indices_of(c);
        if pool.len() <= opts.shots {
            return Err(Error::invalid(format!(
                "class {} has {} examples; needs more than {} to leave test data",
                c,
                pool.len(),
                opts.shots
            )));
        }
        let chosen = sample_indices(pool.len(), opts.shots, &mut rng);
        for (i, &pi) in pool.iter().enumerate() {
            let e = &novel_pool.examples()[pi];
            if chosen.contains(&i) {
                shots.push(e.clone())?;
            } else {
                heldout.push(e.clone())?;
            }
        }
    }

    // Novel prototypes from the shots only; base prototypes from the full
    // base training set.
    let protos = compute_prototypes(&shots)?.merge(&compute_prototypes(baseset)?)?;
    let novel_classes = shots.classes();
    let base_classes = baseset.classes();
    let map = match opts.nbs {
        NbsMode::Soft => nbs_soft(&protos, &novel_classes, &base_classes)?,
        NbsMode::Hard { k } => {
            nbs_hard(&protos, &novel_classes, &base_classes, k.min(base_classes.len()))?
        }
    };

    let train_novel = if opts.augment {
        let plan = make_plan(baseset, &shots, &map)?;
        augment(bundle, &plan, baseset, &shots, &protos, &mut rng)?
    } else {
        shots.clone()
    };
    Ok((train_novel, shots, heldout))
}

/// Runs the full protocol: per trial, draw shots, augment, train the final
/// classifier, and score top-k accuracy on held-out examples. The all-class
/// setting additionally trains on the base set and tests on `base_heldout`.
pub fn evaluate(
    bundle: &ModelBundle,
    baseset: &LabeledFeatureSet,
    novel_pool: &LabeledFeatureSet,
    base_heldout: Option<&LabeledFeatureSet>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.trials == 0 || opts.shots == 0 || opts.top_k == 0 {
        return Err(Error::invalid("trials, shots, and top_k must be positive"));
    }
    if opts.setting == EvalSetting::Glsl && base_heldout.is_none() {
        return Err(Error::invalid("the all-class setting needs held-out base examples"));
    }
    let mut trial_accuracy = Vec::with_capacity(opts.trials);
    let mut div_acc: BTreeMap<ClassId, (f64, usize)> = BTreeMap::new();
    let mut ratio_acc = 0.0;
    for trial in 0..opts.trials {
        let (train_novel, shots, heldout) =
            trial_data(bundle, baseset, novel_pool, opts, trial as u64)?;

        // Diversity of what augmentation actually added, falling back to
        // the real shots for the no-augmentation control.
        let synthetic_only = {
            let idx: Vec<usize> = train_novel
                .examples()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.synthetic)
                .map(|(i, _)| i)
                .collect();
            train_novel.subset(&idx)?
        };
        let measured = if synthetic_only.is_empty() { &shots } else { &synthetic_only };
        if let Ok(d) = diversity(measured, &shots.classes()) {
            for (c, v) in d.per_class {
                let entry = div_acc.entry(c).or_insert((0.0, 0));
                entry.0 += v;
                entry.1 += 1;
            }
        }

        let accuracy = match opts.setting {
            EvalSetting::Lsl => {
                let candidates = train_novel.classes();
                let (ranked, truth) = rank_all(&opts.classifier, &train_novel, &candidates, &heldout)?;
                topk_accuracy(&ranked, &truth, opts.top_k)?
            }
            EvalSetting::Glsl => {
                let mut train = train_novel.clone();
                train.extend_from(baseset)?;
                let mut test = heldout.clone();
                test.extend_from(base_heldout.unwrap())?;
                let candidates = train.classes();
                let base_classes = baseset.classes().len() as f64;
                let novel_classes = train_novel.classes().len() as f64;
                ratio_acc += (baseset.len() as f64 / base_classes)
                    / (train_novel.len() as f64 / novel_classes);
                let (ranked, truth) = rank_all(&opts.classifier, &train, &candidates, &test)?;
                topk_accuracy(&ranked, &truth, opts.top_k)?
            }
        };
        trial_accuracy.push(accuracy);
    }
    let mean = trial_accuracy.iter().sum::<f64>() / trial_accuracy.len() as f64;
    let var = trial_accuracy.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
        / trial_accuracy.len() as f64;
    let diversity_per_class: Vec<(ClassId, f64)> =
        div_acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let mean_diversity = if diversity_per_class.is_empty() {
        None
    } else {
        Some(
            diversity_per_class.iter().map(|(_, d)| d).sum::<f64>()
                / diversity_per_class.len() as f64,
        )
    };
    Ok(EvalReport {
        setting: opts.setting,
        shots: opts.shots,
        top_k: opts.top_k,
        trial_accuracy,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        diversity_per_class,
        mean_diversity,
        base_to_novel_ratio: if opts.setting == EvalSetting::Glsl {
            Some(ratio_acc / opts.trials as f64)
        } else {
            None
        },
    })
}
