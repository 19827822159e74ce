//! Class prototypes (feature centroids) and the selection of related base
//! classes for each novel class, either softly weighted over every base
//! class or restricted to the k nearest.

use std::collections::BTreeMap;

use crate::datakit::{ClassId, LabeledFeatureSet};
use crate::error::{Error, Result};
use crate::linalg;

/// Centroid per class over a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    dim: usize,
    protos: BTreeMap<ClassId, Vec<f64>>,
}

impl PrototypeTable {
    pub fn new(dim: usize) -> Self {
        PrototypeTable { dim, protos: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, label: ClassId) -> Result<&[f64]> {
        self.protos
            .get(&label)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("no prototype for class {}", label)))
    }

    pub fn contains(&self, label: ClassId) -> bool {
        self.protos.contains_key(&label)
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.protos.keys().copied().collect()
    }

    pub fn insert(&mut self, label: ClassId, proto: Vec<f64>) -> Result<()> {
        if proto.len() != self.dim {
            return Err(Error::invalid("prototype dimension mismatch"));
        }
        self.protos.insert(label, proto);
        Ok(())
    }

    /// Merges another table over the same feature dimension; overlapping
    /// classes are rejected.
    pub fn merge(&self, other: &PrototypeTable) -> Result<PrototypeTable> {
        if other.dim != self.dim {
            return Err(Error::invalid("merge: dimension mismatch"));
        }
        let mut out = self.clone();
        for (label, proto) in &other.protos {
            if out.protos.insert(*label, proto.clone()).is_some() {
                return Err(Error::invalid(format!("merge: class {} present in both", label)));
            }
        }
        Ok(out)
    }
}

/// Mean feature vector of each class present in the set.
pub fn compute_prototypes(set: &LabeledFeatureSet) -> Result<PrototypeTable> {
    if set.is_empty() {
        return Err(Error::invalid("compute_prototypes: empty feature set"));
    }
    let mut protos = BTreeMap::new();
    for label in set.classes() {
        let feats = set.features_of(label);
        protos.insert(label, linalg::mean_vector(&feats)?);
    }
    Ok(PrototypeTable { dim: set.dim(), protos })
}

/// Similarity of one prototype to a list of others: a softmax over negated
/// squared distances. Scores are positive and sum to one.
pub fn similarity_scores(
    table: &PrototypeTable,
    anchor: ClassId,
    others: &[ClassId],
) -> Result<Vec<f64>> {
    if others.is_empty() {
        return Err(Error::invalid("similarity_scores: no classes to score"));
    }
    let a = table.get(anchor)?;
    let mut neg_d2 = Vec::with_capacity(others.len());
    for &c in others {
        neg_d2.push(-linalg::squared_distance(a, table.get(c)?));
    }
    // Shift by the max before exponentiating so distances in the hundreds
    // do not underflow to a zero denominator.
    let shift = neg_d2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg_d2.iter().map(|&v| (v - shift).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / total).collect())
}

/// For each novel class, the related base classes with blending weights.
/// Weights are positive and sum to one over the related set.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationMap {
    map: BTreeMap<ClassId, Vec<(ClassId, f64)>>,
}

impl TranslationMap {
    pub fn novel_classes(&self) -> Vec<ClassId> {
        self.map.keys().copied().collect()
    }

    /// Related base classes of one novel class, weights included, in
    /// ascending base-label order.
    pub fn related(&self, novel: ClassId) -> Result<&[(ClassId, f64)]> {
        self.map
            .get(&novel)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("no related set for class {}", novel)))
    }

    /// Blend weight of a base class for a novel class; zero when unrelated.
    pub fn alpha(&self, novel: ClassId, base: ClassId) -> Result<f64> {
        Ok(self
            .related(novel)?
            .iter()
            .find(|(c, _)| *c == base)
            .map(|(_, w)| *w)
            .unwrap_or(0.0))
    }

    /// Union of every related base class, ascending.
    pub fn retrieved_base_classes(&self) -> Vec<ClassId> {
        let mut out: Vec<ClassId> =
            self.map.values().flat_map(|v| v.iter().map(|(c, _)| *c)).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Reverse direction: for each retrieved base class, the novel classes
    /// that relate to it, with the same weights renormalized to sum to one.
    pub fn reverse(&self) -> TranslationMap {
        let mut rev: BTreeMap<ClassId, Vec<(ClassId, f64)>> = BTreeMap::new();
        for (&novel, related) in &self.map {
            for &(base, w) in related {
                rev.entry(base).or_default().push((novel, w));
            }
        }
        for weights in rev.values_mut() {
            weights.sort_by(|a, b| a.0.cmp(&b.0));
            let total: f64 = weights.iter().map(|(_, w)| *w).sum();
            for (_, w) in weights.iter_mut() {
                *w /= total;
            }
        }
        TranslationMap { map: rev }
    }
}

/// Soft selection: every base class is related, weighted by prototype
/// similarity.
pub fn nbs_soft(
    table: &PrototypeTable,
    novel: &[ClassId],
    base: &[ClassId],
) -> Result<TranslationMap> {
    validate_nbs_inputs(novel, base)?;
    let mut map = BTreeMap::new();
    for &n in novel {
        let scores = similarity_scores(table, n, base)?;
        let related: Vec<(ClassId, f64)> = base.iter().copied().zip(scores).collect();
        map.insert(n, related);
    }
    Ok(TranslationMap { map })
}

/// Hard selection: the k nearest base prototypes, each with weight 1/k.
/// Distance ties break toward the smaller base label.
pub fn nbs_hard(
    table: &PrototypeTable,
    novel: &[ClassId],
    base: &[ClassId],
    k: usize,
) -> Result<TranslationMap> {
    validate_nbs_inputs(novel, base)?;
    if k == 0 || k > base.len() {
        return Err(Error::invalid(format!(
            "nbs_hard: k must be in 1..={}, got {}",
            base.len(),
            k
        )));
    }
    let mut map = BTreeMap::new();
    for &n in novel {
        let anchor = table.get(n)?;
        let mut order: Vec<(f64, ClassId)> = Vec::with_capacity(base.len());
        for &b in base {
            order.push((linalg::squared_distance(anchor, table.get(b)?), b));
        }
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut related: Vec<(ClassId, f64)> =
            order[..k].iter().map(|&(_, c)| (c, 1.0 / k as f64)).collect();
        related.sort_by(|a, b| a.0.cmp(&b.0));
        map.insert(n, related);
    }
    Ok(TranslationMap { map })
}

fn validate_nbs_inputs(novel: &[ClassId], base: &[ClassId]) -> Result<()> {
    if novel.is_empty() || base.is_empty() {
        return Err(Error::invalid("neighborhood selection needs novel and base classes"));
    }
    for n in novel {
        if base.contains(n) {
            return Err(Error::invalid(format!("class {} is listed as both novel and base", n)));
        }
    }
    Ok(())
}
