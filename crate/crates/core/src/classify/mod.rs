//! Linear attribute classifiers: consensus, per-user baselines, shade-adapted
//! models, multi-attribute queries and sparse feature importance.

mod features;
mod logistic;
mod svm;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{fold_in_annotator, FactorModel};
use crate::labels::{consensus, restrict_to_shade, LabelMatrix};
use crate::rng::{derive_seed, seeded};
use crate::shades::{route_annotator, ShadeAssignment};

pub use features::{BinarySidecar, FeatureTable, Standardizer};
pub use logistic::{fit_l1_logistic, group_magnitudes, logistic_objective, optimality_residual, SparseLogistic};
pub use svm::{svm_objective, train_adapted_svm, train_svm, train_svm_detailed, LinearModel, ModelSource, SvmFit};

pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
pub const DEFAULT_THRESHOLD: f64 = 0.9;
/// Used when a training set is too small to cross-validate.
const FALLBACK_C: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub threshold: f64,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            c_grid: DEFAULT_C_GRID.to_vec(),
            folds: 3,
            seed: 0,
        }
    }
}

/// `{0,1}` to `{−1,+1}`.
pub fn signed(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

fn train_one(x: &[Vec<f64>], y: &[f64], c: f64, source: Option<&LinearModel>) -> Result<LinearModel> {
    match source {
        Some(s) => train_adapted_svm(x, y, s, c),
        None => train_svm(x, y, c),
    }
}

/// Stratified k-fold choice of C by held-out accuracy; ties go to the smaller C.
pub fn select_c(
    x: &[Vec<f64>],
    y: &[f64],
    grid: &[f64],
    folds: usize,
    source: Option<&LinearModel>,
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Config("empty C grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0.0).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| y[i] < 0.0).collect();
    let k = folds.min(pos.len()).min(neg.len());
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    if k < 2 {
        return Ok(if grid.contains(&FALLBACK_C) { FALLBACK_C } else { grid[0] });
    }
    let mut rng = seeded(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold_of = vec![0usize; y.len()];
    for (r, &i) in pos.iter().enumerate() {
        fold_of[i] = r % k;
    }
    for (r, &i) in neg.iter().enumerate() {
        fold_of[i] = r % k;
    }
    let scores = grid
        .par_iter()
        .map(|&c| -> Result<usize> {
            let mut correct = 0;
            for f in 0..k {
                let (mut tx, mut ty) = (Vec::new(), Vec::new());
                for i in 0..y.len() {
                    if fold_of[i] != f {
                        tx.push(x[i].clone());
                        ty.push(y[i]);
                    }
                }
                let m = train_one(&tx, &ty, c, source)?;
                correct += (0..y.len())
                    .filter(|&i| fold_of[i] == f && m.predict_sign(&x[i]) == y[i])
                    .count();
            }
            Ok(correct)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (g, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = g;
        }
    }
    Ok(grid[best])
}

/// C selection followed by a fit on all of `(x, y)`.
pub fn train_with_selection(
    x: &[Vec<f64>],
    y: &[f64],
    options: &TrainOptions,
    source: Option<&LinearModel>,
    tag: ModelSource,
) -> Result<LinearModel> {
    let c = select_c(x, y, &options.c_grid, options.folds, source, options.seed)?;
    let mut m = train_one(x, y, c, source)?;
    m.source = tag;
    Ok(m)
}

/// Standardized feature rows aligned with a label matrix's item index space.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub standardizer: Standardizer,
    pub rows: Vec<Vec<f64>>,
}

impl TrainingView {
    /// Statistics come from the items that carry at least one label.
    pub fn new(matrix: &LabelMatrix, features: &FeatureTable) -> Result<Self> {
        let raw = (0..matrix.num_items())
            .map(|j| features.require(matrix.items().id(j)))
            .collect::<Result<Vec<_>>>()?;
        let mut seen = vec![false; matrix.num_items()];
        for e in matrix.entries() {
            seen[e.item] = true;
        }
        let standardizer = Standardizer::fit(
            raw.iter().zip(&seen).filter(|(_, s)| **s).map(|(r, _)| *r),
            features.dim(),
        );
        let rows = raw.iter().map(|r| standardizer.apply(r)).collect();
        Ok(Self { standardizer, rows })
    }

    pub fn examples(&self, labels: &[(usize, u8)]) -> (Vec<Vec<f64>>, Vec<f64>) {
        labels
            .iter()
            .map(|&(j, l)| (self.rows[j].clone(), signed(l)))
            .unzip()
    }
}

fn has_both(y: &[f64]) -> bool {
    y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadeClassifierSet {
    pub attribute_id: String,
    pub consensus: LinearModel,
    /// Every surviving shade has an entry; fallback shades hold a copy of
    /// the consensus model.
    pub shades: BTreeMap<usize, LinearModel>,
    pub fallback: Vec<usize>,
    pub routing: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub standardization: Standardizer,
    pub threshold: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// Consensus model plus one model per shade adapted from it.
pub fn build_shade_classifiers(
    matrix: &LabelMatrix,
    features: &FeatureTable,
    assignment: &ShadeAssignment,
    options: &TrainOptions,
) -> Result<ShadeClassifierSet> {
    if assignment.assignment.len() != matrix.num_annotators() {
        return Err(Error::DimensionMismatch {
            expected: matrix.num_annotators(),
            found: assignment.assignment.len(),
        });
    }
    let view = TrainingView::new(matrix, features)?;
    let (x, y) = view.examples(&consensus(matrix, options.threshold)?.kept());
    if !has_both(&y) {
        return Err(Error::DegenerateLabels(format!(
            "consensus labels for {} lack one class",
            matrix.attribute_id()
        )));
    }
    let consensus_model = train_with_selection(&x, &y, options, None, ModelSource::Consensus)?;

    let trained = (0..assignment.k)
        .into_par_iter()
        .map(|k| -> Result<(usize, Option<LinearModel>)> {
            let members = assignment.members(k);
            if members.is_empty() {
                return Ok((k, None));
            }
            let kept = consensus(&restrict_to_shade(matrix, &members)?, options.threshold)?.kept();
            let (sx, sy) = view.examples(&kept);
            if !has_both(&sy) {
                return Ok((k, None));
            }
            let opts = TrainOptions {
                seed: derive_seed(options.seed, &format!("shade-{k}")),
                ..options.clone()
            };
            let m = train_with_selection(&sx, &sy, &opts, Some(&consensus_model), ModelSource::Shade(k))?;
            Ok((k, Some(m)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut shades = BTreeMap::new();
    let mut fallback = Vec::new();
    for (k, m) in trained {
        let m = m.unwrap_or_else(|| {
            log::warn!("shade {k} lacks both classes after filtering; using the consensus model");
            fallback.push(k);
            LinearModel {
                source: ModelSource::Shade(k),
                ..consensus_model.clone()
            }
        });
        shades.insert(k, m);
    }
    let routing = assignment
        .assignment
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (matrix.annotators().id(i).to_string(), s)))
        .collect();
    Ok(ShadeClassifierSet {
        attribute_id: matrix.attribute_id().to_string(),
        c: consensus_model.c,
        consensus: consensus_model,
        shades,
        fallback,
        routing,
        centroids: assignment.centroids.clone(),
        standardization: view.standardizer,
        threshold: options.threshold,
        provenance: None,
    })
}

/// Who a prediction is for.
#[derive(Debug, Clone, PartialEq)]
pub enum UserRef {
    Known(String),
    /// A latent factor, e.g. obtained by folding in a new user's labels.
    Factor(Vec<f64>),
}

/// Fold a user's `(item_id, label)` list into the factor space.
pub fn fold_in_user(model: &FactorModel, labels: &[(String, u8)]) -> Result<UserRef> {
    let indexed = labels
        .iter()
        .map(|(id, l)| {
            model
                .items
                .get(id)
                .map(|j| (j, *l))
                .ok_or_else(|| Error::domain(format!("item {id:?} not in factor model")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UserRef::Factor(fold_in_annotator(model, &indexed)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub margin: f64,
    pub shade: Option<usize>,
    /// True when the user could not be routed and the consensus model answered.
    pub fallback: bool,
}

impl ShadeClassifierSet {
    pub fn transform(&self, raw: &[f64]) -> Vec<f64> {
        self.standardization.apply(raw)
    }

    pub fn shade_of(&self, user: &UserRef) -> Option<usize> {
        match user {
            UserRef::Known(id) => self.routing.get(id).copied(),
            UserRef::Factor(f) => route_annotator(&self.centroids, f).ok(),
        }
        .filter(|s| self.shades.contains_key(s))
    }

    pub fn predict_consensus(&self, raw: &[f64]) -> Prediction {
        let margin = self.consensus.decision(&self.transform(raw));
        Prediction {
            label: u8::from(margin >= 0.0),
            margin,
            shade: None,
            fallback: false,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Prediction from the user's shade model, or the consensus model (flagged)
/// when the user cannot be routed. `raw` is the unstandardized feature vector.
pub fn predict_for_user(set: &ShadeClassifierSet, user: &UserRef, raw: &[f64]) -> Prediction {
    match set.shade_of(user) {
        Some(k) => {
            let margin = set.shades[&k].decision(&set.transform(raw));
            Prediction {
                label: u8::from(margin >= 0.0),
                margin,
                shade: Some(k),
                fallback: false,
            }
        }
        None => Prediction {
            fallback: true,
            ..set.predict_consensus(raw)
        },
    }
}

/// Anything that can label an item for a user on a named attribute.
pub trait AttributePredictor {
    fn predict_attribute(&mut self, attribute: &str, user: &UserRef, raw: &[f64]) -> Result<u8>;
}

impl AttributePredictor for BTreeMap<String, ShadeClassifierSet> {
    fn predict_attribute(&mut self, attribute: &str, user: &UserRef, raw: &[f64]) -> Result<u8> {
        let set = self
            .get(attribute)
            .ok_or_else(|| Error::MissingAttribute(attribute.to_string()))?;
        Ok(predict_for_user(set, user, raw).label)
    }
}

/// Ignores users and always answers with the consensus model.
pub struct ConsensusPredictor<'a>(pub &'a BTreeMap<String, ShadeClassifierSet>);

impl AttributePredictor for ConsensusPredictor<'_> {
    fn predict_attribute(&mut self, attribute: &str, _user: &UserRef, raw: &[f64]) -> Result<u8> {
        let set = self
            .0
            .get(attribute)
            .ok_or_else(|| Error::MissingAttribute(attribute.to_string()))?;
        Ok(set.predict_consensus(raw).label)
    }
}

/// Fair coin per query, for chance baselines.
pub struct UniformRandomPredictor {
    rng: ChaCha8Rng,
}

impl UniformRandomPredictor {
    pub fn new(seed: u64) -> Self {
        Self { rng: seeded(seed) }
    }
}

impl AttributePredictor for UniformRandomPredictor {
    fn predict_attribute(&mut self, _attribute: &str, _user: &UserRef, _raw: &[f64]) -> Result<u8> {
        Ok(u8::from(self.rng.random::<bool>()))
    }
}

/// True iff the predictions agree with `targets` on every listed attribute.
pub fn multi_attribute_query(
    predictor: &mut impl AttributePredictor,
    user: &UserRef,
    raw: &[f64],
    targets: &[(String, u8)],
) -> Result<bool> {
    let mut all = true;
    for (attribute, want) in targets {
        all &= predictor.predict_attribute(attribute, user, raw)? == *want;
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub model: LinearModel,
    pub lambda: f64,
    pub support: Vec<usize>,
    pub group_magnitudes: Vec<f64>,
}

/// Sparse logistic weights plus the summed |w| of each feature group.
pub fn l1_feature_importance(
    x: &[Vec<f64>],
    y: &[f64],
    lambda: f64,
    groups: &[Vec<usize>],
) -> Result<ImportanceReport> {
    let fit = fit_l1_logistic(x, y, lambda)?;
    let group_magnitudes = group_magnitudes(&fit.weights, groups)?;
    let support = (0..fit.weights.len()).filter(|&k| fit.weights[k] != 0.0).collect();
    Ok(ImportanceReport {
        model: LinearModel {
            weights: fit.weights,
            bias: fit.bias,
            c: lambda,
            source: ModelSource::L1Importance,
        },
        lambda,
        support,
        group_magnitudes,
    })
}

/// One-vs-rest importance per shade: each shade is represented by the pool of
/// items its members' filtered vote marks positive, and is contrasted with the
/// pools of the other shades.
pub fn shade_importance(
    matrix: &LabelMatrix,
    features: &FeatureTable,
    assignment: &ShadeAssignment,
    threshold: f64,
    lambda: f64,
    groups: &[Vec<usize>],
) -> Result<BTreeMap<usize, ImportanceReport>> {
    let view = TrainingView::new(matrix, features)?;
    let mut pools = Vec::new();
    for k in 0..assignment.k {
        let members = assignment.members(k);
        let pool: Vec<usize> = if members.is_empty() {
            Vec::new()
        } else {
            consensus(&restrict_to_shade(matrix, &members)?, threshold)?
                .kept()
                .into_iter()
                .filter_map(|(j, l)| (l == 1).then_some(j))
                .collect()
        };
        pools.push(pool);
    }
    let mut out = BTreeMap::new();
    for k in 0..assignment.k {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (s, pool) in pools.iter().enumerate() {
            for &j in pool {
                x.push(view.rows[j].clone());
                y.push(if s == k { 1.0 } else { -1.0 });
            }
        }
        if !has_both(&y) {
            log::warn!("shade {k} has no one-vs-rest contrast; skipped");
            continue;
        }
        out.insert(k, l1_feature_importance(&x, &y, lambda, groups)?);
    }
    Ok(out)
}

/// Shuffled sample of `fraction` of `labels` (at least one).
pub fn sample_labels<T: Clone>(labels: &[T], fraction: f64, rng: &mut impl Rng) -> Vec<T> {
    let take = ((labels.len() as f64 * fraction).round() as usize).clamp(1, labels.len().max(1));
    let mut v = labels.to_vec();
    v.shuffle(rng);
    v.truncate(take);
    v
}

#[cfg(test)]
mod tests;
