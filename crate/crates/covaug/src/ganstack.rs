//! The four feature-space GAN variants: generators that translate examples
//! between base and novel classes, class-conditional discriminators, noise
//! samplers, and the adversarial, cycle-consistency, and
//! covariance-preserving losses composed into each variant's objective.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datakit::{ClassId, LabeledFeatureSet};
use crate::diffengine::{init_mlp, mlp_forward, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::protospace::PrototypeTable;
use crate::protospace::TranslationMap;

/// Which objective the model trains.
///
/// Each variant extends the previous one: `cgan` is the plain conditional
/// GAN over the base-to-novel generator; `ccyc` adds the reverse generator,
/// its discriminator, and the cycle-consistency term; `cdeli` keeps that
/// objective but draws the reverse generator's noise from a Gaussian
/// mixture; `ccov` adds the covariance-preserving term (with plain normal
/// noise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    CGan,
    CCyc,
    CDeli,
    CCov,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::CGan, Variant::CCyc, Variant::CDeli, Variant::CCov];

    /// Whether the reverse generator, its discriminator, and the cycle term
    /// are part of the objective.
    pub fn uses_reverse(self) -> bool {
        !matches!(self, Variant::CGan)
    }

    pub fn uses_mixture(self) -> bool {
        matches!(self, Variant::CDeli)
    }

    pub fn uses_cov(self) -> bool {
        matches!(self, Variant::CCov)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::CGan => "cgan",
            Variant::CCyc => "ccyc",
            Variant::CDeli => "cdeli",
            Variant::CCov => "ccov",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cgan" => Ok(Variant::CGan),
            "ccyc" => Ok(Variant::CCyc),
            "cdeli" => Ok(Variant::CDeli),
            "ccov" => Ok(Variant::CCov),
            other => Err(Error::invalid(format!(
                "unknown variant {:?}; expected cgan, ccyc, cdeli, or ccov",
                other
            ))),
        }
    }
}

/// Network dimensions shared by every model in a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Feature dimension D.
    pub feature: usize,
    /// Noise dimension Z fed to the reverse generator.
    pub noise: usize,
    /// Hidden width of all four MLPs.
    pub hidden: usize,
    /// Novel classes per episode; the novel discriminator has this many
    /// class outputs plus one fake slot.
    pub novel_slots: usize,
    /// Total base classes; the base discriminator has this many class
    /// outputs plus one fake slot, with unused slots masked per episode.
    pub base_slots: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.feature == 0
            || self.noise == 0
            || self.hidden == 0
            || self.novel_slots == 0
            || self.base_slots == 0
        {
            return Err(Error::invalid("all network dimensions must be positive"));
        }
        Ok(())
    }

    /// Forward generator input: feature, source prototype, target prototype.
    pub fn gn_in(&self) -> usize {
        3 * self.feature
    }

    /// Reverse generator input: feature, source prototype, target prototype,
    /// noise.
    pub fn gb_in(&self) -> usize {
        3 * self.feature + self.noise
    }

    /// Discriminator input: feature plus claimed-class prototype.
    pub fn disc_in(&self) -> usize {
        2 * self.feature
    }
}

/// Fixed Gaussian mixture the `cdeli` variant draws its noise from.
/// Component means and per-coordinate deviations are drawn once at
/// initialization and kept; components are picked uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureNoise {
    means: Vec<Vec<f64>>,
    devs: Vec<Vec<f64>>,
}

impl MixtureNoise {
    pub fn new(means: Vec<Vec<f64>>, devs: Vec<Vec<f64>>) -> Result<Self> {
        if means.is_empty() || means.len() != devs.len() {
            return Err(Error::invalid("mixture needs matching, non-empty means and deviations"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("mixture noise dimension must be positive"));
        }
        for (m, s) in means.iter().zip(&devs) {
            if m.len() != dim || s.len() != dim {
                return Err(Error::invalid("mixture components must share one dimension"));
            }
            if !m.iter().chain(s.iter()).all(|v| v.is_finite()) {
                return Err(Error::invalid("mixture parameters must be finite"));
            }
        }
        Ok(MixtureNoise { means, devs })
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Per-coordinate mean of the whole mixture.
    pub fn analytic_mean(&self) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; dim];
        for m in &self.means {
            for (o, v) in out.iter_mut().zip(m) {
                *o += v / self.means.len() as f64;
            }
        }
        out
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let c = rng.gen_range(0..self.means.len());
        self.means[c]
            .iter()
            .zip(&self.devs[c])
            .map(|(&m, &s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Draws mixture parameters: means uniform in [-1, 1], deviations normal
/// with standard deviation 0.2, stored exactly as drawn.
pub fn init_mixture(components: usize, noise_dim: usize, rng: &mut impl Rng) -> Result<MixtureNoise> {
    if components == 0 || noise_dim == 0 {
        return Err(Error::invalid("mixture needs at least one component and one dimension"));
    }
    let means: Vec<Vec<f64>> = (0..components)
        .map(|_| (0..noise_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let devs: Vec<Vec<f64>> = (0..components)
        .map(|_| (0..noise_dim).map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    MixtureNoise::new(means, devs)
}

/// Draws one noise vector for the reverse generator: from the mixture for
/// `cdeli`, i.i.d. standard normal otherwise.
pub fn sample_noise(
    variant: Variant,
    mixture: Option<&MixtureNoise>,
    noise_dim: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if variant.uses_mixture() {
        let mix = mixture
            .ok_or_else(|| Error::invalid("cdeli requires mixture noise parameters"))?;
        if mix.dim() != noise_dim {
            return Err(Error::invalid(format!(
                "mixture dimension {} does not match noise dimension {}",
                mix.dim(),
                noise_dim
            )));
        }
        Ok(mix.sample(rng))
    } else {
        Ok((0..noise_dim).map(|_| rng.sample(StandardNormal)).collect())
    }
}

/// All learnable state of one model: the two generators, the two
/// discriminators, and (for `cdeli`) the fixed noise mixture.
///
/// Parameter prefixes: `gn` (base-to-novel generator), `gb` (novel-to-base
/// generator), `dn` (novel discriminator), `db` (base discriminator).
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub variant: Variant,
    pub dims: Dims,
    pub params: ParamStore,
    pub mixture: Option<MixtureNoise>,
}

impl ModelBundle {
    /// Initializes all four networks (uniform Glorot weights, zero biases)
    /// in the fixed order gn, gb, dn, db, then the mixture when the variant
    /// uses one.
    pub fn init(
        variant: Variant,
        dims: Dims,
        mixture_components: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamStore::new();
        init_mlp(&mut params, "gn", dims.gn_in(), dims.hidden, dims.feature, rng);
        init_mlp(&mut params, "gb", dims.gb_in(), dims.hidden, dims.feature, rng);
        init_mlp(&mut params, "dn", dims.disc_in(), dims.hidden, dims.novel_slots + 1, rng);
        init_mlp(&mut params, "db", dims.disc_in(), dims.hidden, dims.base_slots + 1, rng);
        let mixture = if variant.uses_mixture() {
            Some(init_mixture(mixture_components, dims.noise, rng)?)
        } else {
            None
        };
        Ok(ModelBundle { variant, dims, params, mixture })
    }

    pub fn sample_noise(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        sample_noise(self.variant, self.mixture.as_ref(), self.dims.noise, rng)
    }

    /// Translates one base example to a novel class. Deterministic: the
    /// forward generator takes no noise.
    pub fn generate_novel(
        &self,
        x_b: &[f64],
        y_b: ClassId,
        y_n: ClassId,
        protos: &PrototypeTable,
    ) -> Result<Vec<f64>> {
        if x_b.len() != self.dims.feature {
            return Err(Error::invalid("generate_novel: feature dimension mismatch"));
        }
        let mut input = Vec::with_capacity(self.dims.gn_in());
        input.extend_from_slice(x_b);
        input.extend_from_slice(protos.get(y_b)?);
        input.extend_from_slice(protos.get(y_n)?);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(&input));
        let out = mlp_forward(&mut tape, &self.params, "gn", x)?;
        Ok(tape.value(out).row(0).to_vec())
    }

    /// Translates one novel example back to a base class under a noise draw.
    pub fn generate_base(
        &self,
        x_n: &[f64],
        y_n: ClassId,
        y_b: ClassId,
        z: &[f64],
        protos: &PrototypeTable,
    ) -> Result<Vec<f64>> {
        if x_n.len() != self.dims.feature {
            return Err(Error::invalid("generate_base: feature dimension mismatch"));
        }
        if z.len() != self.dims.noise {
            return Err(Error::invalid("generate_base: noise dimension mismatch"));
        }
        let mut input = Vec::with_capacity(self.dims.gb_in());
        input.extend_from_slice(x_n);
        input.extend_from_slice(protos.get(y_n)?);
        input.extend_from_slice(protos.get(y_b)?);
        input.extend_from_slice(z);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(&input));
        let out = mlp_forward(&mut tape, &self.params, "gb", x)?;
        Ok(tape.value(out).row(0).to_vec())
    }

    /// Batched forward-generator inference: each row of `inputs` is a full
    /// generator input (feature, source prototype, target prototype).
    pub fn translate_rows(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.dims.gn_in() {
            return Err(Error::invalid("translate_rows: input width mismatch"));
        }
        let mut tape = Tape::new();
        let x = tape.input(inputs.clone());
        let out = mlp_forward(&mut tape, &self.params, "gn", x)?;
        Ok(tape.value(out).clone())
    }
}

/// Loss hyperparameters. Defaults are the reference setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_cov: f64,
    /// Truncation rank of the covariance distance.
    pub kyfan_m: usize,
    /// Replace the generator's minimax fake terms with the non-saturating
    /// form (maximize the claimed class's probability on fakes).
    pub non_saturating: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cyc: 5.0, lambda_cov: 0.5, kyfan_m: 10, non_saturating: false }
    }
}

/// One training batch viewed by the losses: novel examples, sampled base
/// examples, the novel-to-base translation map, prototypes for every
/// involved class, and each base class's global slot in the base
/// discriminator's output.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub novel: &'a LabeledFeatureSet,
    pub base: &'a LabeledFeatureSet,
    pub map: &'a TranslationMap,
    pub protos: &'a PrototypeTable,
    pub base_slots: &'a BTreeMap<ClassId, usize>,
}

/// Adversarial translation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Forward generator versus the novel discriminator.
    BaseToNovel,
    /// Reverse generator versus the base discriminator.
    NovelToBase,
}

/// Nodes of one adversarial objective. The discriminator ascends
/// `objective`; the generator descends `generator_fake`.
#[derive(Debug, Clone, Copy)]
pub struct AdvNodes {
    pub objective: NodeId,
    pub real: NodeId,
    pub fake: NodeId,
    pub generator_fake: NodeId,
}

/// Scalar snapshot of every loss term. Terms a variant does not use are
/// reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_n: f64,
    pub adv_b: f64,
    pub cyc: f64,
    pub cov: f64,
    pub total_generator: f64,
    pub total_discriminator: f64,
    /// Covariance pairs skipped for having fewer than two samples.
    pub cov_skipped: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.adv_n, self.adv_b, self.cyc, self.cov, self.total_generator, self.total_discriminator]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tape nodes of the full objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub adv_n: NodeId,
    pub adv_b: Option<NodeId>,
    pub cyc: Option<NodeId>,
    pub cov: Option<NodeId>,
    pub cov_skipped: usize,
    /// The generator side descends this.
    pub total_generator: NodeId,
    /// The discriminator side ascends this.
    pub total_discriminator: NodeId,
}

impl ObjectiveNodes {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            adv_n: tape.scalar(self.adv_n),
            adv_b: self.adv_b.map(|n| tape.scalar(n)).unwrap_or(0.0),
            cyc: self.cyc.map(|n| tape.scalar(n)).unwrap_or(0.0),
            cov: self.cov.map(|n| tape.scalar(n)).unwrap_or(0.0),
            total_generator: tape.scalar(self.total_generator),
            total_discriminator: tape.scalar(self.total_discriminator),
            cov_skipped: self.cov_skipped,
        }
    }
}

// ----- batch layout -----------------------------------------------------

struct Layout {
    novel_classes: Vec<ClassId>,
    novel_slot: BTreeMap<ClassId, usize>,
    base_counts: BTreeMap<ClassId, usize>,
    retrieved: Vec<ClassId>,
}

fn build_layout(bundle: &ModelBundle, batch: &Batch) -> Result<Layout> {
    let dims = &bundle.dims;
    dims.validate()?;
    if batch.novel.is_empty() || batch.base.is_empty() {
        return Err(Error::invalid("batch needs novel and base examples"));
    }
    if batch.novel.dim() != dims.feature
        || batch.base.dim() != dims.feature
        || batch.protos.dim() != dims.feature
    {
        return Err(Error::invalid("batch feature dimension does not match the model"));
    }
    let novel_classes = batch.novel.classes();
    if novel_classes.len() != dims.novel_slots {
        return Err(Error::invalid(format!(
            "batch has {} novel classes but the novel discriminator was sized for {}",
            novel_classes.len(),
            dims.novel_slots
        )));
    }
    let map_classes = batch.map.novel_classes();
    for c in &novel_classes {
        if !map_classes.contains(c) {
            return Err(Error::invalid(format!("novel class {} missing from translation map", c)));
        }
        batch.protos.get(*c)?;
    }
    let mut base_counts = BTreeMap::new();
    for e in batch.base.examples() {
        if novel_classes.contains(&e.label) {
            return Err(Error::invalid(format!(
                "class {} appears on both sides of the batch",
                e.label
            )));
        }
        *base_counts.entry(e.label).or_insert(0usize) += 1;
        batch.protos.get(e.label)?;
    }
    let retrieved = batch.map.retrieved_base_classes();
    for c in &retrieved {
        batch.protos.get(*c)?;
    }
    if bundle.variant.uses_reverse() {
        for c in retrieved.iter().chain(base_counts.keys()) {
            match batch.base_slots.get(c) {
                Some(&s) if s < dims.base_slots => {}
                Some(_) => {
                    return Err(Error::invalid(format!("slot of base class {} out of range", c)))
                }
                None => {
                    return Err(Error::invalid(format!("base class {} has no output slot", c)))
                }
            }
        }
    }
    let novel_slot = novel_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    Ok(Layout { novel_classes, novel_slot, base_counts, retrieved })
}

// ----- generated rows ---------------------------------------------------

/// Rows translated base-to-novel: one per (novel class, batch base example)
/// pair with positive blend weight, ordered by novel class then batch
/// position. Shared by the adversarial fake term, the backward cycle chain,
/// and the covariance term.
struct GenRows {
    node: NodeId,
    novel: Vec<ClassId>,
    /// Blend weight renormalized to sum to one within each novel class.
    weight: Vec<f64>,
    class_rows: BTreeMap<ClassId, Vec<usize>>,
    /// Per-row target-class prototypes, source-class prototypes, and
    /// original source features, as constant inputs.
    ln_node: NodeId,
    lb_node: NodeId,
    xb_node: NodeId,
}

fn build_gen_rows(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    layout: &Layout,
) -> Result<GenRows> {
    let mut inputs = Vec::new();
    let mut ln_rows = Vec::new();
    let mut lb_rows = Vec::new();
    let mut xb_rows = Vec::new();
    let mut novel = Vec::new();
    let mut weight = Vec::new();
    let mut class_rows: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for &y_n in &layout.novel_classes {
        let l_n = batch.protos.get(y_n)?.to_vec();
        let mut picked: Vec<(usize, f64)> = Vec::new();
        for (j, e) in batch.base.examples().iter().enumerate() {
            let alpha = batch.map.alpha(y_n, e.label)?;
            if alpha > 0.0 {
                picked.push((j, alpha));
            }
        }
        if picked.is_empty() {
            continue;
        }
        let total: f64 = picked.iter().map(|(_, a)| a).sum();
        for (j, alpha) in picked {
            let e = &batch.base.examples()[j];
            let l_b = batch.protos.get(e.label)?;
            let mut row = Vec::with_capacity(bundle.dims.gn_in());
            row.extend_from_slice(&e.features);
            row.extend_from_slice(l_b);
            row.extend_from_slice(&l_n);
            class_rows.entry(y_n).or_default().push(inputs.len());
            inputs.push(row);
            ln_rows.push(l_n.clone());
            lb_rows.push(l_b.to_vec());
            xb_rows.push(e.features.clone());
            novel.push(y_n);
            weight.push(alpha / total);
        }
    }
    if inputs.is_empty() {
        return Err(Error::invalid("no base example relates to any novel class in this batch"));
    }
    let input_node = tape.input(Matrix::from_rows(&inputs)?);
    let node = mlp_forward(tape, &bundle.params, "gn", input_node)?;
    Ok(GenRows {
        node,
        novel,
        weight,
        class_rows,
        ln_node: tape.input(Matrix::from_rows(&ln_rows)?),
        lb_node: tape.input(Matrix::from_rows(&lb_rows)?),
        xb_node: tape.input(Matrix::from_rows(&xb_rows)?),
    })
}

/// Rows translated novel-to-base: one per (novel example, related base
/// class) pair, ordered by batch position then base class, each with a
/// fresh noise draw. Shared by the reverse adversarial fake term and the
/// forward cycle chain.
struct RevRows {
    node: NodeId,
    base: Vec<ClassId>,
    /// Weight for the reverse fake term: blend weight renormalized within
    /// each target base class's rows.
    fake_weight: Vec<f64>,
    fake_groups: usize,
    /// Weight for the forward cycle chain: blend weight scaled by the
    /// class's batch presence, renormalized within each novel class; zero
    /// for target classes absent from the batch.
    cyc_weight: Vec<f64>,
    cyc_classes: usize,
    ln_node: NodeId,
    lb_node: NodeId,
    xn_node: NodeId,
}

fn build_rev_rows(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    layout: &Layout,
    rng: &mut impl Rng,
) -> Result<RevRows> {
    let mut inputs = Vec::new();
    let mut ln_rows = Vec::new();
    let mut lb_rows = Vec::new();
    let mut xn_rows = Vec::new();
    let mut base = Vec::new();
    let mut novel_of_row = Vec::new();
    let mut alpha_of_row = Vec::new();
    for e in batch.novel.examples() {
        let l_n = batch.protos.get(e.label)?.to_vec();
        for &(b, alpha) in batch.map.related(e.label)? {
            if alpha <= 0.0 {
                continue;
            }
            let l_b = batch.protos.get(b)?;
            let z = bundle.sample_noise(rng)?;
            let mut row = Vec::with_capacity(bundle.dims.gb_in());
            row.extend_from_slice(&e.features);
            row.extend_from_slice(&l_n);
            row.extend_from_slice(l_b);
            row.extend_from_slice(&z);
            inputs.push(row);
            ln_rows.push(l_n.clone());
            lb_rows.push(l_b.to_vec());
            xn_rows.push(e.features.clone());
            base.push(b);
            novel_of_row.push(e.label);
            alpha_of_row.push(alpha);
        }
    }
    if inputs.is_empty() {
        return Err(Error::invalid("translation map relates no base class to the novel batch"));
    }

    // Fake term: renormalize within each target base class.
    let mut group_total: BTreeMap<ClassId, f64> = BTreeMap::new();
    for (b, a) in base.iter().zip(&alpha_of_row) {
        *group_total.entry(*b).or_insert(0.0) += a;
    }
    let fake_weight: Vec<f64> =
        base.iter().zip(&alpha_of_row).map(|(b, a)| a / group_total[b]).collect();

    // Cycle chain: weight by blend times batch presence of the target
    // class, renormalized within each novel class.
    let raw_cyc: Vec<f64> = base
        .iter()
        .zip(&alpha_of_row)
        .map(|(b, a)| a * layout.base_counts.get(b).copied().unwrap_or(0) as f64)
        .collect();
    let mut class_total: BTreeMap<ClassId, f64> = BTreeMap::new();
    for (c, w) in novel_of_row.iter().zip(&raw_cyc) {
        *class_total.entry(*c).or_insert(0.0) += w;
    }
    let cyc_classes = class_total.values().filter(|t| **t > 0.0).count();
    let cyc_weight: Vec<f64> = novel_of_row
        .iter()
        .zip(&raw_cyc)
        .map(|(c, w)| {
            let total = class_total[c];
            if total > 0.0 {
                w / total
            } else {
                0.0
            }
        })
        .collect();

    let input_node = tape.input(Matrix::from_rows(&inputs)?);
    let node = mlp_forward(tape, &bundle.params, "gb", input_node)?;
    Ok(RevRows {
        node,
        fake_groups: group_total.len(),
        base,
        fake_weight,
        cyc_weight,
        cyc_classes,
        ln_node: tape.input(Matrix::from_rows(&ln_rows)?),
        lb_node: tape.input(Matrix::from_rows(&lb_rows)?),
        xn_node: tape.input(Matrix::from_rows(&xn_rows)?),
    })
}

// ----- adversarial losses -----------------------------------------------

/// Real term shared by both directions: per-class mean of the true-class
/// log-probability, averaged over classes.
fn real_term(
    tape: &mut Tape,
    params: &ParamStore,
    disc: &str,
    set: &LabeledFeatureSet,
    protos: &PrototypeTable,
    slot_of: &dyn Fn(ClassId) -> Result<usize>,
    active: Option<&[bool]>,
) -> Result<NodeId> {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for e in set.examples() {
        *counts.entry(e.label).or_insert(0) += 1;
    }
    let n_classes = counts.len();
    let mut rows = Vec::with_capacity(set.len());
    let mut targets = Vec::with_capacity(set.len());
    let mut weights = Vec::with_capacity(set.len());
    for e in set.examples() {
        let mut row = Vec::with_capacity(2 * set.dim());
        row.extend_from_slice(&e.features);
        row.extend_from_slice(protos.get(e.label)?);
        rows.push(row);
        targets.push(slot_of(e.label)?);
        weights.push(1.0 / (n_classes as f64 * counts[&e.label] as f64));
    }
    let input = tape.input(Matrix::from_rows(&rows)?);
    let logits = mlp_forward(tape, params, disc, input)?;
    let ll = tape.log_likelihood(logits, &targets, active)?;
    tape.dot_weights(ll, &weights)
}

fn adv_forward(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    layout: &Layout,
    gen: &GenRows,
    non_saturating: bool,
) -> Result<AdvNodes> {
    let slot = layout.novel_slot.clone();
    let real = real_term(
        tape,
        &bundle.params,
        "dn",
        batch.novel,
        batch.protos,
        &|c| {
            slot.get(&c)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no novel slot for class {}", c)))
        },
        None,
    )?;

    let fake_in = tape.concat_cols(&[gen.node, gen.ln_node])?;
    let logits = mlp_forward(tape, &bundle.params, "dn", fake_in)?;
    let fake_slot = bundle.dims.novel_slots;
    let n_used = gen.class_rows.len() as f64;
    let weights: Vec<f64> = gen.weight.iter().map(|w| w / n_used).collect();
    let fake_targets = vec![fake_slot; gen.novel.len()];
    let ll_fake = tape.log_likelihood(logits, &fake_targets, None)?;
    let fake = tape.dot_weights(ll_fake, &weights)?;

    let generator_fake = if non_saturating {
        let class_targets: Vec<usize> =
            gen.novel.iter().map(|c| layout.novel_slot[c]).collect();
        let ll_cls = tape.log_likelihood(logits, &class_targets, None)?;
        let term = tape.dot_weights(ll_cls, &weights)?;
        tape.scale(term, -1.0)
    } else {
        fake
    };
    let objective = tape.add(real, fake)?;
    Ok(AdvNodes { objective, real, fake, generator_fake })
}

fn adv_reverse(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    layout: &Layout,
    rev: &RevRows,
    non_saturating: bool,
) -> Result<AdvNodes> {
    let fake_slot = bundle.dims.base_slots;
    let mut active = vec![false; bundle.dims.base_slots + 1];
    for c in &layout.retrieved {
        active[batch.base_slots[c]] = true;
    }
    active[fake_slot] = true;

    let slots = batch.base_slots;
    let real = real_term(
        tape,
        &bundle.params,
        "db",
        batch.base,
        batch.protos,
        &|c| {
            slots
                .get(&c)
                .copied()
                .ok_or_else(|| Error::invalid(format!("base class {} has no output slot", c)))
        },
        Some(&active),
    )?;

    let fake_in = tape.concat_cols(&[rev.node, rev.lb_node])?;
    let logits = mlp_forward(tape, &bundle.params, "db", fake_in)?;
    let n_groups = rev.fake_groups as f64;
    let weights: Vec<f64> = rev.fake_weight.iter().map(|w| w / n_groups).collect();
    let fake_targets = vec![fake_slot; rev.base.len()];
    let ll_fake = tape.log_likelihood(logits, &fake_targets, Some(&active))?;
    let fake = tape.dot_weights(ll_fake, &weights)?;

    let generator_fake = if non_saturating {
        let class_targets: Vec<usize> = rev.base.iter().map(|b| batch.base_slots[b]).collect();
        let ll_cls = tape.log_likelihood(logits, &class_targets, Some(&active))?;
        let term = tape.dot_weights(ll_cls, &weights)?;
        tape.scale(term, -1.0)
    } else {
        fake
    };
    let objective = tape.add(real, fake)?;
    Ok(AdvNodes { objective, real, fake, generator_fake })
}

/// One direction's adversarial objective on a fresh set of generated rows.
/// The reverse direction draws noise from `rng`.
pub fn adv_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    direction: Direction,
    rng: &mut impl Rng,
) -> Result<AdvNodes> {
    let layout = build_layout(bundle, batch)?;
    match direction {
        Direction::BaseToNovel => {
            let gen = build_gen_rows(tape, bundle, batch, &layout)?;
            adv_forward(tape, bundle, batch, &layout, &gen, false)
        }
        Direction::NovelToBase => {
            let rev = build_rev_rows(tape, bundle, batch, &layout, rng)?;
            adv_reverse(tape, bundle, batch, &layout, &rev, false)
        }
    }
}

// ----- cycle-consistency loss -------------------------------------------

fn cyc_nodes(
    tape: &mut Tape,
    bundle: &ModelBundle,
    gen: &GenRows,
    rev: &RevRows,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    // Backward chain: base example, translated to the novel class, translated
    // back to its own class; fresh noise on the return leg.
    let z_rows: Vec<Vec<f64>> =
        (0..gen.novel.len()).map(|_| bundle.sample_noise(rng)).collect::<Result<_>>()?;
    let z_node = tape.input(Matrix::from_rows(&z_rows)?);
    let back_in = tape.concat_cols(&[gen.node, gen.ln_node, gen.lb_node, z_node])?;
    let recon_b = mlp_forward(tape, &bundle.params, "gb", back_in)?;
    let dist_b = tape.row_squared_distance(recon_b, gen.xb_node)?;
    let n_classes = gen.class_rows.len() as f64;
    let back_w: Vec<f64> = gen.weight.iter().map(|w| w / n_classes).collect();
    let back = tape.dot_weights(dist_b, &back_w)?;

    // Forward chain: novel example, translated to a base class, translated
    // back to its own class.
    let fwd_in = tape.concat_cols(&[rev.node, rev.lb_node, rev.ln_node])?;
    let recon_n = mlp_forward(tape, &bundle.params, "gn", fwd_in)?;
    let dist_n = tape.row_squared_distance(recon_n, rev.xn_node)?;
    if rev.cyc_classes == 0 {
        // No related class present in the base batch; the forward chain has
        // no weight mass.
        return Ok(back);
    }
    let fwd_w: Vec<f64> = rev.cyc_weight.iter().map(|w| w / rev.cyc_classes as f64).collect();
    let fwd = tape.dot_weights(dist_n, &fwd_w)?;
    tape.add(back, fwd)
}

/// Cycle-consistency loss: the sum of both chains' weighted mean squared
/// reconstruction errors. Not applicable to `cgan`.
pub fn cyc_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if !bundle.variant.uses_reverse() {
        return Err(Error::NotApplicable(
            "cycle-consistency is undefined for the cgan variant".into(),
        ));
    }
    let layout = build_layout(bundle, batch)?;
    let gen = build_gen_rows(tape, bundle, batch, &layout)?;
    let rev = build_rev_rows(tape, bundle, batch, &layout, rng)?;
    cyc_nodes(tape, bundle, &gen, &rev, rng)
}

// ----- covariance-preserving loss ---------------------------------------

fn cov_nodes(
    tape: &mut Tape,
    batch: &Batch,
    layout: &Layout,
    gen: &GenRows,
    m: usize,
) -> Result<(NodeId, usize)> {
    let mut skipped = 0usize;
    let mut class_terms: Vec<NodeId> = Vec::new();
    for &y_n in &layout.novel_classes {
        let pairs: Vec<(ClassId, f64)> = batch
            .map
            .related(y_n)?
            .iter()
            .copied()
            .filter(|(_, a)| *a > 0.0)
            .collect();
        let rows = gen.class_rows.get(&y_n).map(|r| r.as_slice()).unwrap_or(&[]);
        if rows.len() < 2 {
            skipped += pairs.len();
            continue;
        }
        // Generated covariance, centered at the centroid of everything this
        // class generated in the batch.
        let sel = tape.select_rows(gen.node, rows)?;
        let centroid = tape.mean_rows(sel)?;
        let sigma_g = tape.covariance_of(sel, centroid)?;

        let mut valid: Vec<(f64, NodeId)> = Vec::new();
        for (b, alpha) in pairs {
            let count = layout.base_counts.get(&b).copied().unwrap_or(0);
            if count < 2 {
                skipped += 1;
                continue;
            }
            let feats = batch.base.features_of(b);
            let sigma_x = linalg::covariance(&feats, batch.protos.get(b)?)?;
            let sigma_x_node = tape.input(sigma_x);
            let diff = tape.sub(sigma_x_node, sigma_g)?;
            let d = tape.kyfan(diff, m)?;
            valid.push((alpha, d));
        }
        if valid.is_empty() {
            continue;
        }
        let total: f64 = valid.iter().map(|(a, _)| a).sum();
        let mut acc: Option<NodeId> = None;
        for (alpha, d) in valid {
            let term = tape.scale(d, alpha / total);
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        class_terms.push(acc.unwrap());
    }
    let node = match class_terms.len() {
        0 => tape.scalar_input(0.0),
        n => {
            let mut acc = class_terms[0];
            for t in &class_terms[1..] {
                acc = tape.add(acc, *t)?;
            }
            tape.scale(acc, 1.0 / n as f64)
        }
    };
    Ok((node, skipped))
}

/// Covariance-preserving loss: for each novel class, the blend-weighted mean
/// over related base classes of the truncated-SVD distance between the base
/// class's batch covariance and the covariance of the class's generated
/// samples. Pairs with fewer than two samples on either side are skipped and
/// counted.
pub fn cov_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    m: usize,
) -> Result<(NodeId, usize)> {
    if m == 0 || m > bundle.dims.feature {
        return Err(Error::invalid(format!(
            "truncation rank must be in 1..={}, got {}",
            bundle.dims.feature,
            m
        )));
    }
    let layout = build_layout(bundle, batch)?;
    let gen = build_gen_rows(tape, bundle, batch, &layout)?;
    cov_nodes(tape, batch, &layout, &gen, m)
}

// ----- full objective ---------------------------------------------------

/// Builds every loss term the variant uses on one tape, sharing a single
/// generator forward pass per direction. Noise is drawn in a fixed order:
/// reverse-translation rows first, then the backward chain's return leg.
pub fn total_objective(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<ObjectiveNodes> {
    if !weights.lambda_cyc.is_finite()
        || !weights.lambda_cov.is_finite()
        || weights.lambda_cyc < 0.0
        || weights.lambda_cov < 0.0
    {
        return Err(Error::invalid("loss weights must be finite and non-negative"));
    }
    if bundle.variant.uses_cov() && (weights.kyfan_m == 0 || weights.kyfan_m > bundle.dims.feature)
    {
        return Err(Error::invalid(format!(
            "truncation rank must be in 1..={}, got {}",
            bundle.dims.feature,
            weights.kyfan_m
        )));
    }
    let layout = build_layout(bundle, batch)?;
    let gen = build_gen_rows(tape, bundle, batch, &layout)?;
    let fwd = adv_forward(tape, bundle, batch, &layout, &gen, weights.non_saturating)?;

    let mut nodes = ObjectiveNodes {
        adv_n: fwd.objective,
        adv_b: None,
        cyc: None,
        cov: None,
        cov_skipped: 0,
        total_generator: fwd.generator_fake,
        total_discriminator: fwd.objective,
    };

    if bundle.variant.uses_reverse() {
        let rev = build_rev_rows(tape, bundle, batch, &layout, rng)?;
        let bwd = adv_reverse(tape, bundle, batch, &layout, &rev, weights.non_saturating)?;
        nodes.adv_b = Some(bwd.objective);
        nodes.total_discriminator = tape.add(nodes.total_discriminator, bwd.objective)?;
        nodes.total_generator = tape.add(nodes.total_generator, bwd.generator_fake)?;

        let cyc = cyc_nodes(tape, bundle, &gen, &rev, rng)?;
        nodes.cyc = Some(cyc);
        let weighted_cyc = tape.scale(cyc, weights.lambda_cyc);
        nodes.total_generator = tape.add(nodes.total_generator, weighted_cyc)?;
    }

    if bundle.variant.uses_cov() {
        let (cov, skipped) = cov_nodes(tape, batch, &layout, &gen, weights.kyfan_m)?;
        nodes.cov = Some(cov);
        nodes.cov_skipped = skipped;
        let weighted_cov = tape.scale(cov, weights.lambda_cov);
        nodes.total_generator = tape.add(nodes.total_generator, weighted_cov)?;
    }
    Ok(nodes)
}
