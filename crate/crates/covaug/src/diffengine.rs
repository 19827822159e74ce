//! Reverse-mode differentiation over a deliberately small operation set.
//!
//! Values on the tape are dense matrices; per-example operations lift to
//! batches row-wise. The one unusual node is the truncated-nuclear-norm node,
//! whose backward rule is the fixed subgradient U_m * V_m^T rather than a
//! derivative obtained by differentiating through the decomposition.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Slope used by every leaky rectifier in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Probabilities are clamped here before taking logs.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

/// Named parameter tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {:?}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {:?}", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|m| m.is_finite())
    }
}

/// Gradients keyed by parameter name, one entry per parameter of the store
/// that produced them.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: BTreeMap<String, Matrix>,
}

impl GradStore {
    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter {:?}", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.grads.iter()
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Constant leaf; gradients stop here.
    Input,
    /// Leaf tied to a named parameter.
    Param(String),
    /// x * w + b with b broadcast over rows.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    LeakyRelu { x: NodeId },
    /// Horizontal concatenation.
    ConcatCols { parts: Vec<NodeId>, widths: Vec<usize> },
    /// Row gather; backward scatter-adds.
    SelectRows { x: NodeId, indices: Vec<usize> },
    /// Column-wise mean, producing a single row.
    MeanRows { x: NodeId },
    /// Per-row squared Euclidean distance, producing a column.
    RowSquaredDistance { a: NodeId, b: NodeId },
    /// Per-row log probability of a target column under a masked softmax.
    LogLikelihood { logits: NodeId, probs: Matrix, targets: Vec<usize>, active: Option<Vec<bool>>, clamped: Vec<bool> },
    /// Weighted sum of a column vector with fixed weights; a scalar.
    DotWeights { x: NodeId, weights: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    /// Population covariance of sample rows about a (possibly dependent) centroid row.
    Covariance { samples: NodeId, centroid: NodeId },
    /// Sum of the m largest singular values; backward adds the cached subgradient.
    KyFan { x: NodeId, subgrad: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Record of one forward computation, replayed backwards for gradients.
pub struct Tape {
    nodes: Vec<Node>,
    param_ids: BTreeMap<String, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_ids: BTreeMap::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert!(v.rows() == 1 && v.cols() == 1);
        v.get(0, 0)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn scalar_input(&mut self, value: f64) -> NodeId {
        self.input(Matrix::new(1, 1, vec![value]).unwrap())
    }

    /// Leaf for a named parameter. Repeated requests for the same name return
    /// the same node so gradients accumulate across every use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(value, Op::Param(name.to_string()));
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(Error::invalid(format!(
                "affine: input width {} vs weight rows {}",
                xv.cols(),
                wv.rows()
            )));
        }
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::invalid("affine: bias must be 1 x out_width"));
        }
        let mut out = xv.matmul(wv)?;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (o, &bias) in row.iter_mut().zip(bv.row(0)) {
                *o += bias;
            }
        }
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v >= 0.0 { v } else { LEAKY_SLOPE * v }).collect();
        let out = Matrix::new(xv.rows(), xv.cols(), data).unwrap();
        self.push(out, Op::LeakyRelu { x })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no parts"));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::invalid("concat_cols: row count mismatch"));
            }
            widths.push(v.cols());
            total += v.cols();
        }
        let mut out = Matrix::zeros(rows, total);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = &self.nodes[p.0].value;
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
                off += v.cols();
            }
        }
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec(), widths }))
    }

    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if indices.is_empty() {
            return Err(Error::invalid("select_rows: empty index set"));
        }
        let mut out = Matrix::zeros(indices.len(), xv.cols());
        for (slot, &idx) in indices.iter().enumerate() {
            if idx >= xv.rows() {
                return Err(Error::invalid(format!("select_rows: index {} out of range", idx)));
            }
            out.row_mut(slot).copy_from_slice(self.nodes[x.0].value.row(idx));
        }
        Ok(self.push(out, Op::SelectRows { x, indices: indices.to_vec() }))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::invalid("mean_rows: empty matrix"));
        }
        let mut out = Matrix::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / xv.rows() as f64;
        for o in out.row_mut(0) {
            *o *= inv;
        }
        Ok(self.push(out, Op::MeanRows { x }))
    }

    pub fn row_squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(Error::invalid("row_squared_distance: shape mismatch"));
        }
        let mut out = Matrix::zeros(av.rows(), 1);
        for i in 0..av.rows() {
            out.set(i, 0, linalg::squared_distance(av.row(i), bv.row(i)));
        }
        Ok(self.push(out, Op::RowSquaredDistance { a, b }))
    }

    /// Per-row log probability of `targets[i]` under a softmax of the row,
    /// restricted to `active` columns when given. Probabilities are clamped
    /// at a small floor before the log; clamped rows get zero gradient.
    pub fn log_likelihood(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        active: Option<&[bool]>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::invalid("log_likelihood: one target per row required"));
        }
        if let Some(mask) = active {
            if mask.len() != cols {
                return Err(Error::invalid("log_likelihood: mask width mismatch"));
            }
            if !mask.iter().any(|&a| a) {
                return Err(Error::invalid("log_likelihood: no active columns"));
            }
        }
        let is_active = |j: usize| active.map_or(true, |m| m[j]);
        let mut probs = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, 1);
        let mut clamped = vec![false; rows];
        for i in 0..rows {
            let t = targets[i];
            if t >= cols || !is_active(t) {
                return Err(Error::invalid(format!(
                    "log_likelihood: target {} inactive or out of range",
                    t
                )));
            }
            let row = lv.row(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if is_active(j) && row[j] > max {
                    max = row[j];
                }
            }
            let mut sum = 0.0;
            for j in 0..cols {
                if is_active(j) {
                    sum += (row[j] - max).exp();
                }
            }
            for j in 0..cols {
                if is_active(j) {
                    probs.set(i, j, (row[j] - max).exp() / sum);
                }
            }
            let p = probs.get(i, t);
            if p < LOG_PROB_FLOOR {
                clamped[i] = true;
                out.set(i, 0, LOG_PROB_FLOOR.ln());
            } else {
                out.set(i, 0, p.ln());
            }
        }
        Ok(self.push(
            out,
            Op::LogLikelihood {
                logits,
                probs,
                targets: targets.to_vec(),
                active: active.map(|m| m.to_vec()),
                clamped,
            },
        ))
    }

    pub fn dot_weights(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.cols() != 1 || xv.rows() != weights.len() {
            return Err(Error::invalid("dot_weights: need a column with one weight per row"));
        }
        let v: f64 = xv.data().iter().zip(weights).map(|(&x, &w)| x * w).sum();
        let out = Matrix::new(1, 1, vec![v]).unwrap();
        Ok(self.push(out, Op::DotWeights { x, weights: weights.to_vec() }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// (1/n) sum_i (s_i - c)^T (s_i - c) over sample rows s_i and centroid row c.
    pub fn covariance_of(&mut self, samples: NodeId, centroid: NodeId) -> Result<NodeId> {
        let (sv, cv) = (self.value(samples), self.value(centroid));
        if cv.rows() != 1 || cv.cols() != sv.cols() {
            return Err(Error::invalid("covariance_of: centroid must be 1 x dim"));
        }
        if sv.rows() == 0 {
            return Err(Error::invalid("covariance_of: no samples"));
        }
        let rows: Vec<Vec<f64>> = (0..sv.rows()).map(|i| sv.row(i).to_vec()).collect();
        let cov = linalg::covariance(&rows, cv.row(0))?;
        Ok(self.push(cov, Op::Covariance { samples, centroid }))
    }

    /// Sum of the m largest singular values of a matrix node. The subgradient
    /// used on the way back is computed here, from the same decomposition.
    pub fn kyfan(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let t = linalg::svd_truncated(xv, m)?;
        let value: f64 = t.sigma.iter().sum();
        let subgrad = t.u.matmul(&t.v.transpose())?;
        let out = Matrix::new(1, 1, vec![value]).unwrap();
        Ok(self.push(out, Op::KyFan { x, subgrad }))
    }

    /// Gradients of a scalar node with respect to every parameter of `store`.
    /// Parameters the loss never touched get zero gradients.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<GradStore> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::invalid("backward: loss must be scalar"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::new(1, 1, vec![1.0]).unwrap());

        let mut out = BTreeMap::new();
        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    accumulate_map(&mut out, name, &g)?;
                }
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    accumulate(&mut grads, *x, g.matmul(&wv.transpose())?)?;
                    accumulate(&mut grads, *w, xv.transpose().matmul(&g)?)?;
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, db)?;
                }
                Op::LeakyRelu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let data: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { LEAKY_SLOPE * gv })
                        .collect();
                    accumulate(&mut grads, *x, Matrix::new(xv.rows(), xv.cols(), data)?)?;
                }
                Op::ConcatCols { parts, widths } => {
                    let mut off = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        let mut part = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            part.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        accumulate(&mut grads, p, part)?;
                        off += w;
                    }
                }
                Op::SelectRows { x, indices } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (slot, &idx2) in indices.iter().enumerate() {
                        for (o, &v) in dx.row_mut(idx2).iter_mut().zip(g.row(slot)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::MeanRows { x } => {
                    let xv = &self.nodes[x.0].value;
                    let inv = 1.0 / xv.rows() as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::RowSquaredDistance { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let mut db = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let gi = g.get(i, 0);
                        for j in 0..av.cols() {
                            let diff = 2.0 * (av.get(i, j) - bv.get(i, j)) * gi;
                            da.set(i, j, diff);
                            db.set(i, j, -diff);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::LogLikelihood { logits, probs, targets, active, clamped } => {
                    let lv = &self.nodes[logits.0].value;
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for i in 0..lv.rows() {
                        if clamped[i] {
                            continue;
                        }
                        let gi = g.get(i, 0);
                        for j in 0..lv.cols() {
                            if active.as_ref().map_or(true, |m| m[j]) {
                                let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                                dl.set(i, j, gi * (indicator - probs.get(i, j)));
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
                Op::DotWeights { x, weights } => {
                    let gs = g.get(0, 0);
                    let data: Vec<f64> = weights.iter().map(|&w| w * gs).collect();
                    accumulate(&mut grads, *x, Matrix::new(weights.len(), 1, data)?)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.scale(*factor))?;
                }
                Op::Covariance { samples, centroid } => {
                    let sv = &self.nodes[samples.0].value;
                    let cv = &self.nodes[centroid.0].value;
                    let d = sv.cols();
                    let n = sv.rows() as f64;
                    // dL/ds_i = (1/n) (G + G^T)(s_i - c); dL/dc = -sum_i dL/ds_i.
                    let sym = g.add(&g.transpose())?;
                    let mut ds = Matrix::zeros(sv.rows(), d);
                    let mut dc = Matrix::zeros(1, d);
                    for i in 0..sv.rows() {
                        for r in 0..d {
                            let mut acc = 0.0;
                            for c in 0..d {
                                acc += sym.get(r, c) * (sv.get(i, c) - cv.get(0, c));
                            }
                            let v = acc / n;
                            ds.set(i, r, v);
                            dc.set(0, r, dc.get(0, r) - v);
                        }
                    }
                    accumulate(&mut grads, *samples, ds)?;
                    accumulate(&mut grads, *centroid, dc)?;
                }
                Op::KyFan { x, subgrad } => {
                    let gs = g.get(0, 0);
                    accumulate(&mut grads, *x, subgrad.scale(gs))?;
                }
            }
        }

        for (name, value) in store.iter() {
            out.entry(name.clone())
                .or_insert_with(|| Matrix::zeros(value.rows(), value.cols()));
        }
        Ok(GradStore { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
    Ok(())
}

fn accumulate_map(out: &mut BTreeMap<String, Matrix>, name: &str, delta: &Matrix) -> Result<()> {
    match out.get_mut(name) {
        Some(existing) => {
            *existing = existing.add(delta)?;
        }
        None => {
            out.insert(name.to_string(), delta.clone());
        }
    }
    Ok(())
}

/// Three affine layers with leaky rectifiers after the first two. Parameters
/// live under `prefix` as w1, b1, w2, b2, w3, b3.
pub fn mlp_forward(tape: &mut Tape, store: &ParamStore, prefix: &str, input: NodeId) -> Result<NodeId> {
    let mut h = input;
    for layer in 1..=3 {
        let w = tape.param(store, &format!("{}.w{}", prefix, layer))?;
        let b = tape.param(store, &format!("{}.b{}", prefix, layer))?;
        h = tape.affine(h, w, b)?;
        if layer < 3 {
            h = tape.leaky_relu(h);
        }
    }
    Ok(h)
}

/// Registers a three-layer perceptron under `prefix`: weights drawn uniformly
/// from +-sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut impl Rng,
) {
    let dims = [(in_dim, hidden), (hidden, hidden), (hidden, out_dim)];
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert(
            format!("{}.w{}", prefix, layer + 1),
            Matrix::new(fan_in, fan_out, data).unwrap(),
        );
        store.insert(format!("{}.b{}", prefix, layer + 1), Matrix::zeros(1, fan_out));
    }
}

/// Adam optimizer state for a fixed subset of parameters, selected at
/// construction by name prefix. Moments start at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamState {
    /// Tracks every parameter whose first dotted component matches one of
    /// `prefixes` (all parameters when `prefixes` is empty).
    pub fn new(store: &ParamStore, prefixes: &[&str]) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, value) in store.iter() {
            let head = name.split('.').next().unwrap_or("");
            if prefixes.is_empty() || prefixes.contains(&head) {
                m.insert(name.clone(), Matrix::zeros(value.rows(), value.cols()));
                v.insert(name.clone(), Matrix::zeros(value.rows(), value.cols()));
            }
        }
        AdamState { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }
}

/// One Adam update with bias correction over the parameters tracked by `state`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::invalid(format!("adam_step: bad learning rate {}", lr)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let names: Vec<String> = state.m.keys().cloned().collect();
    for name in names {
        let g = grads.get(&name)?;
        if !g.is_finite() {
            return Err(Error::numerical(format!(
                "adam_step: non-finite gradient for parameter {:?}",
                name
            )));
        }
        let p = params.get_mut(&name)?;
        if g.rows() != p.rows() || g.cols() != p.cols() {
            return Err(Error::invalid(format!(
                "adam_step: gradient shape mismatch for parameter {:?}",
                name
            )));
        }
        let m = state.m.get_mut(&name).unwrap();
        let v = state.v.get_mut(&name).unwrap();
        let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
        for i in 0..p.data().len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Compares analytic gradients with central finite differences over every
/// parameter coordinate and returns the maximum of
/// |analytic - numeric| / max(1, |numeric|).
///
/// `loss_fn` must be deterministic for fixed parameters; any noise it uses has
/// to be frozen by the caller.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let (tape, loss) = loss_fn(params)?;
    let analytic = tape.backward(loss, params)?;
    let mut work = params.clone();
    let mut max_rel = 0.0_f64;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name)?.data().len();
        for i in 0..len {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + step;
            let (t_plus, l_plus) = loss_fn(&work)?;
            let f_plus = t_plus.scalar(l_plus);
            work.get_mut(&name)?.data_mut()[i] = orig - step;
            let (t_minus, l_minus) = loss_fn(&work)?;
            let f_minus = t_minus.scalar(l_minus);
            work.get_mut(&name)?.data_mut()[i] = orig;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let rel = (analytic.get(&name)?.data()[i] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
