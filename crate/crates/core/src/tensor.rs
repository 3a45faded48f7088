//! Bayesian CP factorization of the annotator × item × attribute label tensor.
//!
//! `L_ijz ≈ Σ_d A_di I_dj T_dz`. Annotator, item and attribute factors each get
//! Gaussian priors with Gaussian-Wishart hyperpriors, and a Gibbs sweep draws
//! the three sets of hyperparameters, then every `A_i`, `I_j` and `T_z` from its
//! Gaussian conditional. The chain is started from an alternating ridge fit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_matrix, encode_matrix};
use crate::error::{Error, Result};
use crate::factorization::{FactorHyperParams, GibbsConfig};
use crate::labels::{IndexMap, LabelTensor};
use crate::linalg::{cholesky_jitter, sample_gaussian_canonical};
use crate::rng::{derive_seed, seeded, substream};

pub const TENSOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSample {
    pub annotator_factors: DMatrix<f64>,
    pub item_factors: DMatrix<f64>,
    pub attribute_factors: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFactorModel {
    pub hyper: FactorHyperParams,
    /// D×M.
    pub annotator_factors: DMatrix<f64>,
    /// D×N.
    pub item_factors: DMatrix<f64>,
    /// D×Z.
    pub attribute_factors: DMatrix<f64>,
    pub samples: Vec<TensorSample>,
    pub gibbs: GibbsConfig,
    pub seed: u64,
    pub annotators: IndexMap,
    pub items: IndexMap,
    pub attributes: IndexMap,
    /// Number of training labels per annotator across all attributes.
    pub label_counts: Vec<usize>,
}

fn triple(a: &DMatrix<f64>, it: &DMatrix<f64>, t: &DMatrix<f64>, i: usize, j: usize, z: usize) -> f64 {
    (0..a.nrows()).map(|d| a[(d, i)] * it[(d, j)] * t[(d, z)]).sum()
}

/// Score with a flag for annotators the model knows nothing about.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossImputation {
    pub score: f64,
    pub raw: f64,
    pub uninformed: bool,
}

impl TensorFactorModel {
    pub fn dim(&self) -> usize {
        self.hyper.dim
    }

    pub fn num_annotators(&self) -> usize {
        self.annotator_factors.ncols()
    }

    pub fn num_items(&self) -> usize {
        self.item_factors.ncols()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_factors.ncols()
    }

    /// Mean over retained samples of the triple product, or the triple
    /// product of the posterior means when no samples were kept.
    pub fn predict_raw(&self, i: usize, j: usize, z: usize) -> f64 {
        if self.samples.is_empty() {
            return triple(&self.annotator_factors, &self.item_factors, &self.attribute_factors, i, j, z);
        }
        self.samples
            .iter()
            .map(|s| triple(&s.annotator_factors, &s.item_factors, &s.attribute_factors, i, j, z))
            .sum::<f64>()
            / self.samples.len() as f64
    }
}

/// Clamped score for `(i, j, z)`, whether or not annotator `i` ever labeled `z`.
pub fn impute_cross_attribute(model: &TensorFactorModel, i: usize, j: usize, z: usize) -> Result<CrossImputation> {
    if i >= model.num_annotators() || j >= model.num_items() || z >= model.num_attributes() {
        return Err(Error::domain(format!("cell ({i}, {j}, {z}) out of range")));
    }
    let raw = model.predict_raw(i, j, z);
    Ok(CrossImputation {
        score: raw.clamp(0.0, 1.0),
        raw,
        uninformed: model.label_counts[i] == 0,
    })
}

/// For each column of one mode: (partner index 1, partner index 2, label).
type Adjacency = Vec<Vec<(usize, usize, f64)>>;

fn adjacency(tensor: &LabelTensor) -> (Adjacency, Adjacency, Adjacency) {
    let mut by_a = vec![Vec::new(); tensor.num_annotators()];
    let mut by_i = vec![Vec::new(); tensor.num_items()];
    let mut by_t = vec![Vec::new(); tensor.num_attributes()];
    for e in tensor.entries() {
        let l = f64::from(e.label);
        by_a[e.annotator].push((e.item, e.attribute, l));
        by_i[e.item].push((e.annotator, e.attribute, l));
        by_t[e.attribute].push((e.annotator, e.item, l));
    }
    (by_a, by_i, by_t)
}

/// Precision and linear term of one column's conditional, with partner
/// vectors `p1[:,u] ∘ p2[:,v]`.
fn conditional(
    obs: &[(usize, usize, f64)],
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    mu: &DVector<f64>,
    lambda: &DMatrix<f64>,
    sigma2: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut precision = lambda.clone();
    let mut linear = lambda * mu;
    let inv = 1.0 / sigma2;
    for &(u, v, l) in obs {
        let w = p1.column(u).component_mul(&p2.column(v));
        precision.ger(inv, &w, &w, 1.0);
        linear.axpy(inv * l, &w, 1.0);
    }
    (precision, linear)
}

fn columns_from(d: usize, cols: Vec<DVector<f64>>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, cols.len());
    for (k, c) in cols.into_iter().enumerate() {
        out.set_column(k, &c);
    }
    out
}

/// Ridge solve of every column of one mode with the other two fixed.
fn ridge_mode(adj: &Adjacency, p1: &DMatrix<f64>, p2: &DMatrix<f64>, ridge: f64, what: &str) -> Result<DMatrix<f64>> {
    let d = p1.nrows();
    let lambda = DMatrix::identity(d, d) * ridge;
    let zero = DVector::zeros(d);
    let cols = adj
        .par_iter()
        .map(|obs| {
            let (p, l) = conditional(obs, p1, p2, &zero, &lambda, 1.0);
            Ok(cholesky_jitter(&p, what)?.solve(&l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(columns_from(d, cols))
}

fn sample_mode(
    adj: &Adjacency,
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    mu: &DVector<f64>,
    lambda: &DMatrix<f64>,
    sigma2: f64,
    seed: u64,
    sweep: u64,
    what: &str,
) -> Result<DMatrix<f64>> {
    let cols = adj
        .par_iter()
        .enumerate()
        .map(|(k, obs)| {
            let (p, l) = conditional(obs, p1, p2, mu, lambda, sigma2);
            let mut rng = substream(seed, sweep, k as u64);
            sample_gaussian_canonical(&p, &l, &mut rng, what).map(|(x, _)| x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(columns_from(p1.nrows(), cols))
}

fn gaussian_init(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("positive sd");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Regularized squared error (used to monitor the ridge initialization).
pub fn tensor_objective(tensor: &LabelTensor, a: &DMatrix<f64>, it: &DMatrix<f64>, t: &DMatrix<f64>, ridge: f64) -> f64 {
    let ssd: f64 = tensor
        .entries()
        .iter()
        .map(|e| {
            let r = f64::from(e.label) - triple(a, it, t, e.annotator, e.item, e.attribute);
            r * r
        })
        .sum();
    0.5 * ssd + 0.5 * ridge * (a.norm_squared() + it.norm_squared() + t.norm_squared())
}

pub fn fit_bptf(tensor: &LabelTensor, hyper: &FactorHyperParams, config: &GibbsConfig, seed: u64) -> Result<TensorFactorModel> {
    hyper.validate()?;
    if tensor.entries().is_empty() {
        return Err(Error::NoObservations);
    }
    if config.samples == 0 {
        return Err(Error::domain("number of retained samples must be at least 1"));
    }
    let d = hyper.dim;
    let (by_a, by_i, by_t) = adjacency(tensor);
    let mut rng = seeded(derive_seed(seed, "tensor-init"));
    let mut a = gaussian_init(d, tensor.num_annotators(), &mut rng);
    let mut it = gaussian_init(d, tensor.num_items(), &mut rng);
    let mut t = DMatrix::from_element(d, tensor.num_attributes(), 1.0);
    let ridge = hyper.lambda_a;
    let mut prev = tensor_objective(tensor, &a, &it, &t, ridge);
    for round in 0..config.init_iters {
        a = ridge_mode(&by_a, &it, &t, ridge, "tensor init")?;
        it = ridge_mode(&by_i, &a, &t, ridge, "tensor init")?;
        t = ridge_mode(&by_t, &a, &it, ridge, "tensor init")?;
        let e = tensor_objective(tensor, &a, &it, &t, ridge);
        if !e.is_finite() {
            return Err(Error::Divergence { iteration: round + 1 });
        }
        if prev - e <= 1e-10 * e.abs().max(1e-300) {
            break;
        }
        prev = e;
    }

    let prior = hyper.normal_wishart()?;
    let (hs, sa, si, st) = (
        derive_seed(seed, "tensor-hyper"),
        derive_seed(seed, "tensor-annotators"),
        derive_seed(seed, "tensor-items"),
        derive_seed(seed, "tensor-attributes"),
    );
    let s2 = hyper.sigma2;
    let mut sums = (
        DMatrix::zeros(d, a.ncols()),
        DMatrix::zeros(d, it.ncols()),
        DMatrix::zeros(d, t.ncols()),
    );
    let mut samples = Vec::new();
    for sweep in 0..(config.burn_in + config.samples) {
        let s = sweep as u64;
        let (mu_a, la) = prior.sample_posterior(&a, &mut substream(hs, s, 0))?;
        let (mu_i, li) = prior.sample_posterior(&it, &mut substream(hs, s, 1))?;
        let (mu_t, lt) = prior.sample_posterior(&t, &mut substream(hs, s, 2))?;
        a = sample_mode(&by_a, &it, &t, &mu_a, &la, s2, sa, s, "annotator conditional")?;
        it = sample_mode(&by_i, &a, &t, &mu_i, &li, s2, si, s, "item conditional")?;
        t = sample_mode(&by_t, &a, &it, &mu_t, &lt, s2, st, s, "attribute conditional")?;
        if sweep >= config.burn_in {
            sums.0 += &a;
            sums.1 += &it;
            sums.2 += &t;
            if config.keep_samples {
                samples.push(TensorSample {
                    annotator_factors: a.clone(),
                    item_factors: it.clone(),
                    attribute_factors: t.clone(),
                });
            }
        }
    }
    let r = config.samples as f64;
    let mut label_counts = vec![0; tensor.num_annotators()];
    for e in tensor.entries() {
        label_counts[e.annotator] += 1;
    }
    Ok(TensorFactorModel {
        hyper: hyper.clone(),
        annotator_factors: sums.0 / r,
        item_factors: sums.1 / r,
        attribute_factors: sums.2 / r,
        samples,
        gibbs: *config,
        seed,
        annotators: tensor.annotators().clone(),
        items: tensor.items().clone(),
        attributes: tensor.attributes().clone(),
        label_counts,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorSampleFile {
    annotator_factors: String,
    item_factors: String,
    attribute_factors: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorModelFile {
    format_version: u32,
    method: String,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "M")]
    num_annotators: usize,
    #[serde(rename = "N")]
    num_items: usize,
    #[serde(rename = "Z")]
    num_attributes: usize,
    hyperparameters: FactorHyperParams,
    seed: u64,
    gibbs: GibbsConfig,
    annotator_ids: IndexMap,
    item_ids: IndexMap,
    attribute_ids: IndexMap,
    label_counts: Vec<usize>,
    annotator_factors: String,
    item_factors: String,
    attribute_factors: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    samples: Vec<TensorSampleFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

impl TensorFactorModel {
    pub fn to_json(&self, provenance: Option<serde_json::Value>) -> Result<String> {
        let file = TensorModelFile {
            format_version: TENSOR_FORMAT_VERSION,
            method: "bayesian_tensor".into(),
            dim: self.dim(),
            num_annotators: self.num_annotators(),
            num_items: self.num_items(),
            num_attributes: self.num_attributes(),
            hyperparameters: self.hyper.clone(),
            seed: self.seed,
            gibbs: self.gibbs,
            annotator_ids: self.annotators.clone(),
            item_ids: self.items.clone(),
            attribute_ids: self.attributes.clone(),
            label_counts: self.label_counts.clone(),
            annotator_factors: encode_matrix(&self.annotator_factors),
            item_factors: encode_matrix(&self.item_factors),
            attribute_factors: encode_matrix(&self.attribute_factors),
            samples: self
                .samples
                .iter()
                .map(|s| TensorSampleFile {
                    annotator_factors: encode_matrix(&s.annotator_factors),
                    item_factors: encode_matrix(&s.item_factors),
                    attribute_factors: encode_matrix(&s.attribute_factors),
                })
                .collect(),
            provenance,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: TensorModelFile = serde_json::from_str(text)?;
        if f.format_version != TENSOR_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported tensor model version {}", f.format_version)));
        }
        f.hyperparameters.validate()?;
        if f.annotator_ids.len() != f.num_annotators
            || f.item_ids.len() != f.num_items
            || f.attribute_ids.len() != f.num_attributes
            || f.label_counts.len() != f.num_annotators
        {
            return Err(Error::Format("index maps disagree with dimensions".into()));
        }
        let d = f.dim;
        let (m, n, z) = (f.num_annotators, f.num_items, f.num_attributes);
        let samples = f
            .samples
            .iter()
            .map(|s| {
                Ok(TensorSample {
                    annotator_factors: decode_matrix(&s.annotator_factors, d, m)?,
                    item_factors: decode_matrix(&s.item_factors, d, n)?,
                    attribute_factors: decode_matrix(&s.attribute_factors, d, z)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            annotator_factors: decode_matrix(&f.annotator_factors, d, m)?,
            item_factors: decode_matrix(&f.item_factors, d, n)?,
            attribute_factors: decode_matrix(&f.attribute_factors, d, z)?,
            hyper: f.hyperparameters,
            samples,
            gibbs: f.gibbs,
            seed: f.seed,
            annotators: f.annotator_ids,
            items: f.item_ids,
            attributes: f.attribute_ids,
            label_counts: f.label_counts,
        })
    }

    pub fn save(&self, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
        std::fs::write(path, self.to_json(provenance)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(samples: usize) -> GibbsConfig {
        GibbsConfig {
            samples,
            burn_in: 20,
            keep_samples: true,
            init_iters: 50,
        }
    }

    #[test]
    fn rank_one_reconstruction() {
        // outer product of indicator vectors is binary and rank one
        let ua = [1u8, 1, 0, 1];
        let ub = [1u8, 0, 1, 1, 0];
        let uc = [1u8, 1, 0];
        let mut quads = Vec::new();
        for i in 0..4 {
            for j in 0..5 {
                for z in 0..3 {
                    quads.push((i, j, z, ua[i] * ub[j] * uc[z]));
                }
            }
        }
        let tensor = LabelTensor::from_quads(4, 5, 3, quads.clone()).unwrap();
        let hyper = FactorHyperParams::new(1).with_sigma2(0.01).with_lambdas(1e-3, 1e-3);
        let model = fit_bptf(&tensor, &hyper, &quick(100), 3).unwrap();
        let mut sq = 0.0;
        for &(i, j, z, l) in &quads {
            let r = impute_cross_attribute(&model, i, j, z).unwrap().score - f64::from(l);
            sq += r * r;
        }
        let rmse = (sq / quads.len() as f64).sqrt();
        assert!(rmse <= 0.05, "rmse {rmse}");
    }

    #[test]
    fn permutation_of_latent_dims_preserves_products() {
        let mut rng = seeded(4);
        let a = gaussian_init(3, 4, &mut rng);
        let it = gaussian_init(3, 5, &mut rng);
        let t = gaussian_init(3, 2, &mut rng);
        let perm = [2usize, 0, 1];
        let p = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(perm[r], c)]);
        let (pa, pi, pt) = (p(&a), p(&it), p(&t));
        for i in 0..4 {
            for j in 0..5 {
                for z in 0..2 {
                    assert!((triple(&a, &it, &t, i, j, z) - triple(&pa, &pi, &pt, i, j, z)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unlabeled_annotator_is_flagged() {
        // annotator 2 exists in the index space but has no labels
        let tensor = LabelTensor::from_quads(3, 3, 2, vec![(0, 0, 0, 1), (1, 1, 1, 0), (0, 2, 1, 1)]).unwrap();
        let model = fit_bptf(&tensor, &FactorHyperParams::new(2), &quick(10), 1).unwrap();
        let r = impute_cross_attribute(&model, 2, 0, 0).unwrap();
        assert!(r.uninformed);
        assert!((0.0..=1.0).contains(&r.score));
        assert!(!impute_cross_attribute(&model, 0, 0, 1).unwrap().uninformed);
        assert!(impute_cross_attribute(&model, 3, 0, 0).is_err());
    }

    #[test]
    fn json_roundtrip_and_determinism() {
        let quads = (0..6).flat_map(|i| (0..4).map(move |j| (i, j, (i + j) % 2, u8::from(i % 2 == j % 2))));
        let tensor = LabelTensor::from_quads(6, 4, 2, quads).unwrap();
        let m1 = fit_bptf(&tensor, &FactorHyperParams::new(2), &quick(5), 9).unwrap();
        let m2 = fit_bptf(&tensor, &FactorHyperParams::new(2), &quick(5), 9).unwrap();
        assert_eq!(m1.to_json(None).unwrap(), m2.to_json(None).unwrap());
        assert_eq!(TensorFactorModel::from_json(&m1.to_json(None).unwrap()).unwrap(), m1);
    }
}
