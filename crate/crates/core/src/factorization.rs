//! Latent factor recovery for a partially observed label matrix.
//!
//! `L ≈ Aᵀ I` with annotator factors `A` (D×M) and item factors `I` (D×N).
//! Two estimators are provided:
//!
//! * [`fit_map`]: gradient descent on the regularized squared error
//!   `E = ½ Σ_obs (L_ij − A_iᵀ I_j)² + λ_A/2 ‖A‖² + λ_I/2 ‖I‖²` with a
//!   backtracking line search, so every accepted step lowers `E`.
//! * [`fit_bayesian`]: Gibbs sampling with Gaussian-Wishart hyperpriors on the
//!   column means and precisions of `A` and `I`. Each sweep draws the
//!   hyperparameters, then every `A_i`, then every `I_j`. Columns within a
//!   half-sweep are independent and are drawn in parallel, each from its own
//!   counter-addressed random stream.
//!
//! Labels enter as real values in {0,1}; imputations are clamped to [0,1].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_matrix, encode_matrix};
use crate::error::{Error, Result};
use crate::labels::{IndexMap, LabelMatrix};
use crate::linalg::{cholesky_jitter, sample_gaussian_canonical, NormalWishart};
use crate::rng::{derive_seed, seeded, substream};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorHyperParams {
    pub dim: usize,
    /// Observation noise variance σ².
    pub sigma2: f64,
    pub lambda_a: f64,
    pub lambda_i: f64,
    pub mu0: Vec<f64>,
    pub beta0: f64,
    pub nu0: f64,
    /// Wishart scale, row-major D×D.
    pub w0: Vec<Vec<f64>>,
}

impl FactorHyperParams {
    /// μ0 = 0, β0 = 1, ν0 = D, W0 = identity; σ² = 0.25 (the largest variance
    /// a {0,1} label can have), λ_A = λ_I = 0.01.
    pub fn new(dim: usize) -> Self {
        let w0 = (0..dim)
            .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            dim,
            sigma2: 0.25,
            lambda_a: 0.01,
            lambda_i: 0.01,
            mu0: vec![0.0; dim],
            beta0: 1.0,
            nu0: dim as f64,
            w0,
        }
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }

    pub fn with_lambdas(mut self, lambda_a: f64, lambda_i: f64) -> Self {
        self.lambda_a = lambda_a;
        self.lambda_i = lambda_i;
        self
    }

    pub fn w0_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |r, c| self.w0[r][c])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::domain("latent dimension must be at least 1"));
        }
        if !(self.sigma2 > 0.0) || !(self.lambda_a > 0.0) || !(self.lambda_i > 0.0) {
            return Err(Error::domain("sigma2 and ridge weights must be positive"));
        }
        if !(self.beta0 > 0.0) {
            return Err(Error::domain("beta0 must be positive"));
        }
        if self.nu0 < d as f64 {
            return Err(Error::domain(format!("nu0 = {} below D = {d}", self.nu0)));
        }
        if self.mu0.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.mu0.len(),
            });
        }
        if self.w0.len() != d || self.w0.iter().any(|r| r.len() != d) {
            return Err(Error::domain("W0 must be D x D"));
        }
        let w0 = self.w0_matrix();
        if (&w0 - w0.transpose()).abs().max() > 1e-12 || nalgebra::Cholesky::new(w0).is_none() {
            return Err(Error::domain("W0 must be symmetric positive definite"));
        }
        Ok(())
    }

    pub(crate) fn normal_wishart(&self) -> Result<NormalWishart> {
        NormalWishart::new(
            DVector::from_vec(self.mu0.clone()),
            self.beta0,
            self.nu0,
            &self.w0_matrix(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Map,
    Bayesian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSample {
    pub annotator_factors: DMatrix<f64>,
    pub item_factors: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsConfig {
    /// Retained post-burn-in sweeps (R).
    pub samples: usize,
    pub burn_in: usize,
    /// Keep every retained sample in memory (and in the model file).
    pub keep_samples: bool,
    /// MAP descent iterations used to initialize the chain.
    pub init_iters: usize,
}

impl GibbsConfig {
    pub fn new(samples: usize, burn_in: usize) -> Self {
        Self {
            samples,
            burn_in,
            keep_samples: true,
            init_iters: 300,
        }
    }
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            burn_in: 50,
            keep_samples: false,
            init_iters: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub method: Method,
    pub hyper: FactorHyperParams,
    /// D×M.
    pub annotator_factors: DMatrix<f64>,
    /// D×N.
    pub item_factors: DMatrix<f64>,
    pub samples: Vec<FactorSample>,
    pub gibbs: Option<GibbsConfig>,
    pub seed: u64,
    pub objective_trace: Vec<f64>,
    pub attribute_id: String,
    pub annotators: IndexMap,
    pub items: IndexMap,
}

impl FactorModel {
    pub fn dim(&self) -> usize {
        self.hyper.dim
    }

    pub fn num_annotators(&self) -> usize {
        self.annotator_factors.ncols()
    }

    pub fn num_items(&self) -> usize {
        self.item_factors.ncols()
    }

    pub fn annotator_vector(&self, i: usize) -> Vec<f64> {
        self.annotator_factors.column(i).iter().copied().collect()
    }

    pub fn item_vector(&self, j: usize) -> Vec<f64> {
        self.item_factors.column(j).iter().copied().collect()
    }

    /// Unclamped prediction: per-sample inner products averaged when samples
    /// are retained, otherwise the inner product of the point estimates.
    pub fn predict_raw(&self, i: usize, j: usize) -> f64 {
        if self.samples.is_empty() {
            return self.annotator_factors.column(i).dot(&self.item_factors.column(j));
        }
        let total: f64 = self
            .samples
            .iter()
            .map(|s| s.annotator_factors.column(i).dot(&s.item_factors.column(j)))
            .sum();
        total / self.samples.len() as f64
    }
}

/// Score in [0,1] for annotator `i` on item `j`.
pub fn impute(model: &FactorModel, i: usize, j: usize) -> Result<f64> {
    if i >= model.num_annotators() || j >= model.num_items() {
        return Err(Error::domain(format!("cell ({i}, {j}) out of range")));
    }
    Ok(model.predict_raw(i, j).clamp(0.0, 1.0))
}

pub fn binarize(score: f64) -> u8 {
    u8::from(score >= 0.5)
}

/// Real-valued observed cells of a rows×cols matrix. Label matrices convert
/// into this form; it also accepts arbitrary real observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Ratings {
    rows: usize,
    cols: usize,
    cells: Vec<(usize, usize, f64)>,
}

impl Ratings {
    pub fn new(rows: usize, cols: usize, cells: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, v) in &cells {
            if i >= rows || j >= cols {
                return Err(Error::domain(format!("cell ({i}, {j}) outside {rows}x{cols}")));
            }
            if !v.is_finite() {
                return Err(Error::domain(format!("non-finite value at ({i}, {j})")));
            }
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn from_matrix(matrix: &LabelMatrix) -> Self {
        Self {
            rows: matrix.num_annotators(),
            cols: matrix.num_items(),
            cells: matrix
                .entries()
                .iter()
                .map(|e| (e.annotator, e.item, f64::from(e.label)))
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[(usize, usize, f64)] {
        &self.cells
    }

    fn by_row(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.rows];
        for &(i, j, v) in &self.cells {
            out[i].push((j, v));
        }
        out
    }

    fn by_col(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.cols];
        for &(i, j, v) in &self.cells {
            out[j].push((i, v));
        }
        out
    }
}

fn objective_of(
    ratings: &Ratings,
    a: &DMatrix<f64>,
    it: &DMatrix<f64>,
    lambda_a: f64,
    lambda_i: f64,
) -> f64 {
    let ssd: f64 = ratings
        .cells
        .iter()
        .map(|&(i, j, v)| {
            let r = v - a.column(i).dot(&it.column(j));
            r * r
        })
        .sum();
    0.5 * ssd + 0.5 * lambda_a * a.norm_squared() + 0.5 * lambda_i * it.norm_squared()
}

/// Regularized squared error of `model` on the observed cells of `matrix`.
pub fn objective(matrix: &LabelMatrix, model: &FactorModel) -> f64 {
    objective_of(
        &Ratings::from_matrix(matrix),
        &model.annotator_factors,
        &model.item_factors,
        model.hyper.lambda_a,
        model.hyper.lambda_i,
    )
}

fn gradient_of(
    ratings: &Ratings,
    a: &DMatrix<f64>,
    it: &DMatrix<f64>,
    lambda_a: f64,
    lambda_i: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut ga = a * lambda_a;
    let mut gi = it * lambda_i;
    for &(i, j, v) in &ratings.cells {
        let ai = a.column(i);
        let ij = it.column(j);
        let r = v - ai.dot(&ij);
        ga.column_mut(i).axpy(-r, &ij, 1.0);
        gi.column_mut(j).axpy(-r, &ai, 1.0);
    }
    (ga, gi)
}

/// Gradient of the MAP objective with respect to (A, I).
pub fn objective_gradient(
    matrix: &LabelMatrix,
    a: &DMatrix<f64>,
    it: &DMatrix<f64>,
    lambda_a: f64,
    lambda_i: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    gradient_of(&Ratings::from_matrix(matrix), a, it, lambda_a, lambda_i)
}

fn check_shape(ratings: &Ratings, hyper: &FactorHyperParams) -> Result<()> {
    hyper.validate()?;
    if ratings.cells.is_empty() {
        return Err(Error::NoObservations);
    }
    Ok(())
}

fn gaussian_init(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("positive sd");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// MAP factorization by gradient descent with a halving line search.
///
/// Each iteration tries `min(step, 2·last_accepted)` and halves until the
/// objective does not increase. Stops after `max_iters`, when no step length
/// lowers the objective, or when the relative decrease falls below 1e-12.
pub fn fit_map(
    matrix: &LabelMatrix,
    hyper: &FactorHyperParams,
    step: f64,
    max_iters: usize,
    seed: u64,
) -> Result<FactorModel> {
    let mut model = fit_map_ratings(&Ratings::from_matrix(matrix), hyper, step, max_iters, seed)?;
    model.attribute_id = matrix.attribute_id().to_string();
    model.annotators = matrix.annotators().clone();
    model.items = matrix.items().clone();
    Ok(model)
}

/// [`fit_map`] on arbitrary real-valued observations. Row and column ids are
/// generated as `a{i}` and `x{j}`.
pub fn fit_map_ratings(
    matrix: &Ratings,
    hyper: &FactorHyperParams,
    step: f64,
    max_iters: usize,
    seed: u64,
) -> Result<FactorModel> {
    check_shape(matrix, hyper)?;
    if !(step > 0.0) {
        return Err(Error::domain("step must be positive"));
    }
    let d = hyper.dim;
    let mut rng = seeded(derive_seed(seed, "map-init"));
    let mut a = gaussian_init(d, matrix.rows, &mut rng);
    let mut it = gaussian_init(d, matrix.cols, &mut rng);
    let (la, li) = (hyper.lambda_a, hyper.lambda_i);

    let mut current = objective_of(matrix, &a, &it, la, li);
    if !current.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut trace = vec![current];
    let mut last = step;
    for iteration in 1..=max_iters {
        let (ga, gi) = gradient_of(matrix, &a, &it, la, li);
        if !ga.iter().chain(gi.iter()).all(|g| g.is_finite()) {
            return Err(Error::Divergence { iteration });
        }
        let mut t = (2.0 * last).min(step);
        let mut accepted = None;
        for _ in 0..60 {
            let na = &a - &ga * t;
            let ni = &it - &gi * t;
            let e = objective_of(matrix, &na, &ni, la, li);
            if e.is_finite() && e <= current {
                accepted = Some((na, ni, e));
                break;
            }
            t *= 0.5;
        }
        let Some((na, ni, e)) = accepted else { break };
        let decrease = current - e;
        a = na;
        it = ni;
        current = e;
        last = t;
        trace.push(current);
        if decrease <= 1e-12 * current.abs().max(1e-300) {
            break;
        }
    }

    Ok(FactorModel {
        method: Method::Map,
        hyper: hyper.clone(),
        annotator_factors: a,
        item_factors: it,
        samples: Vec::new(),
        gibbs: None,
        seed,
        objective_trace: trace,
        attribute_id: String::from("attr"),
        annotators: generated_ids("a", matrix.rows),
        items: generated_ids("x", matrix.cols),
    })
}

/// Precision and linear term of the Gaussian conditional of one column given
/// the opposite factors: `Λ + σ⁻² Σ v vᵀ` and `Λμ + σ⁻² Σ L v`.
pub fn column_conditional(
    partners: &DMatrix<f64>,
    observations: &[(usize, f64)],
    mu: &DVector<f64>,
    lambda: &DMatrix<f64>,
    sigma2: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut precision = lambda.clone();
    let mut linear = lambda * mu;
    let inv = 1.0 / sigma2;
    for &(k, label) in observations {
        let v = partners.column(k);
        precision.ger(inv, &v, &v, 1.0);
        linear.axpy(inv * label, &v, 1.0);
    }
    (precision, linear)
}

fn sample_columns(
    partners: &DMatrix<f64>,
    adjacency: &[Vec<(usize, f64)>],
    mu: &DVector<f64>,
    lambda: &DMatrix<f64>,
    sigma2: f64,
    seed: u64,
    sweep: u64,
    what: &str,
) -> Result<DMatrix<f64>> {
    let d = partners.nrows();
    let cols: Vec<DVector<f64>> = adjacency
        .par_iter()
        .enumerate()
        .map(|(k, obs)| {
            let (precision, linear) = column_conditional(partners, obs, mu, lambda, sigma2);
            let mut rng = substream(seed, sweep, k as u64);
            sample_gaussian_canonical(&precision, &linear, &mut rng, what).map(|(x, _)| x)
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(d, adjacency.len());
    for (k, c) in cols.into_iter().enumerate() {
        out.set_column(k, &c);
    }
    Ok(out)
}

fn generated_ids(prefix: &str, n: usize) -> IndexMap {
    IndexMap::from_ids((0..n).map(|k| format!("{prefix}{k}")).collect()).expect("distinct generated ids")
}

/// Bayesian factorization by Gibbs sampling, initialized from a MAP fit.
/// Point estimates are the means of the retained samples.
pub fn fit_bayesian(
    matrix: &LabelMatrix,
    hyper: &FactorHyperParams,
    config: &GibbsConfig,
    seed: u64,
) -> Result<FactorModel> {
    let mut model = fit_bayesian_ratings(&Ratings::from_matrix(matrix), hyper, config, seed)?;
    model.attribute_id = matrix.attribute_id().to_string();
    model.annotators = matrix.annotators().clone();
    model.items = matrix.items().clone();
    Ok(model)
}

/// [`fit_bayesian`] on arbitrary real-valued observations.
pub fn fit_bayesian_ratings(
    matrix: &Ratings,
    hyper: &FactorHyperParams,
    config: &GibbsConfig,
    seed: u64,
) -> Result<FactorModel> {
    check_shape(matrix, hyper)?;
    if config.samples == 0 {
        return Err(Error::domain("number of retained samples must be at least 1"));
    }
    let init = fit_map_ratings(matrix, hyper, 1.0, config.init_iters, derive_seed(seed, "gibbs-init"))?;
    let prior = hyper.normal_wishart()?;
    let by_annotator = matrix.by_row();
    let by_item = matrix.by_col();
    let (hyper_seed, a_seed, i_seed) = (
        derive_seed(seed, "gibbs-hyper"),
        derive_seed(seed, "gibbs-annotators"),
        derive_seed(seed, "gibbs-items"),
    );

    let mut a = init.annotator_factors;
    let mut it = init.item_factors;
    let d = hyper.dim;
    let mut sum_a = DMatrix::zeros(d, a.ncols());
    let mut sum_i = DMatrix::zeros(d, it.ncols());
    let mut samples = Vec::new();

    for sweep in 0..(config.burn_in + config.samples) {
        let s = sweep as u64;
        let (mu_a, lambda_a) = prior.sample_posterior(&a, &mut substream(hyper_seed, s, 0))?;
        let (mu_i, lambda_i) = prior.sample_posterior(&it, &mut substream(hyper_seed, s, 1))?;
        a = sample_columns(&it, &by_annotator, &mu_a, &lambda_a, hyper.sigma2, a_seed, s, "annotator conditional")?;
        it = sample_columns(&a, &by_item, &mu_i, &lambda_i, hyper.sigma2, i_seed, s, "item conditional")?;
        if sweep >= config.burn_in {
            sum_a += &a;
            sum_i += &it;
            if config.keep_samples {
                samples.push(FactorSample {
                    annotator_factors: a.clone(),
                    item_factors: it.clone(),
                });
            }
        }
    }
    let r = config.samples as f64;
    Ok(FactorModel {
        method: Method::Bayesian,
        hyper: hyper.clone(),
        annotator_factors: sum_a / r,
        item_factors: sum_i / r,
        samples,
        gibbs: Some(*config),
        seed,
        objective_trace: init.objective_trace,
        attribute_id: init.attribute_id,
        annotators: init.annotators,
        items: init.items,
    })
}

/// Ridge solve of a new annotator's labels against the fixed item factors:
/// `(λ_A I + Σ I_j I_jᵀ) a = Σ L_j I_j`.
pub fn fold_in_annotator(model: &FactorModel, labels: &[(usize, u8)]) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::domain("fold-in needs at least one label"));
    }
    let d = model.dim();
    let mut gram = DMatrix::<f64>::identity(d, d) * model.hyper.lambda_a;
    let mut rhs = DVector::<f64>::zeros(d);
    for &(j, l) in labels {
        if j >= model.num_items() {
            return Err(Error::domain(format!("item index {j} not in model")));
        }
        let v = model.item_factors.column(j);
        gram.ger(1.0, &v, &v, 1.0);
        rhs.axpy(f64::from(l), &v, 1.0);
    }
    let chol = cholesky_jitter(&gram, "fold-in")?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleFile {
    annotator_factors: String,
    item_factors: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    method: Method,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "M")]
    num_annotators: usize,
    #[serde(rename = "N")]
    num_items: usize,
    attribute_id: String,
    hyperparameters: FactorHyperParams,
    seed: u64,
    gibbs: Option<GibbsConfig>,
    annotator_ids: IndexMap,
    item_ids: IndexMap,
    annotator_factors: String,
    item_factors: String,
    objective_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    samples: Vec<SampleFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

impl FactorModel {
    pub fn to_json(&self, provenance: Option<serde_json::Value>) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            method: self.method,
            dim: self.dim(),
            num_annotators: self.num_annotators(),
            num_items: self.num_items(),
            attribute_id: self.attribute_id.clone(),
            hyperparameters: self.hyper.clone(),
            seed: self.seed,
            gibbs: self.gibbs,
            annotator_ids: self.annotators.clone(),
            item_ids: self.items.clone(),
            annotator_factors: encode_matrix(&self.annotator_factors),
            item_factors: encode_matrix(&self.item_factors),
            objective_trace: self.objective_trace.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleFile {
                    annotator_factors: encode_matrix(&s.annotator_factors),
                    item_factors: encode_matrix(&s.item_factors),
                })
                .collect(),
            provenance,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {}",
                f.format_version
            )));
        }
        if f.annotator_ids.len() != f.num_annotators || f.item_ids.len() != f.num_items {
            return Err(Error::Format("index maps disagree with M/N".into()));
        }
        let (d, m, n) = (f.dim, f.num_annotators, f.num_items);
        let samples = f
            .samples
            .iter()
            .map(|s| {
                Ok(FactorSample {
                    annotator_factors: decode_matrix(&s.annotator_factors, d, m)?,
                    item_factors: decode_matrix(&s.item_factors, d, n)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            method: f.method,
            hyper: f.hyperparameters,
            annotator_factors: decode_matrix(&f.annotator_factors, d, m)?,
            item_factors: decode_matrix(&f.item_factors, d, n)?,
            samples,
            gibbs: f.gibbs,
            seed: f.seed,
            objective_trace: f.objective_trace,
            attribute_id: f.attribute_id,
            annotators: f.annotator_ids,
            items: f.item_ids,
        })
    }

    pub fn save(&self, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
        std::fs::write(path, self.to_json(provenance)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelMatrix;
    use rand::seq::SliceRandom;

    fn rank1_matrix() -> LabelMatrix {
        let a = [1u8, 0, 1, 1];
        let b = [1u8, 1, 0, 0, 1, 0];
        let triples = (0..4).flat_map(|i| (0..6).map(move |j| (i, j, a[i] * b[j])));
        LabelMatrix::from_triples(4, 6, triples).unwrap()
    }

    /// Rank-3 truth with unit-variance entries; returns (observed, held-out truth).
    fn planted_rank3(seed: u64, observed: f64) -> (Ratings, Vec<(usize, usize, f64)>) {
        use rand_distr::StandardNormal;
        let mut rng = seeded(seed);
        let scale = 3f64.powf(-0.25);
        let mut draw = |n: usize| -> Vec<[f64; 3]> {
            (0..n)
                .map(|_| std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal)))
                .collect()
        };
        let (u, v) = (draw(20), draw(40));
        let mut rng = seeded(seed ^ 0xabcdef);
        let (mut cells, mut held) = (Vec::new(), Vec::new());
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                let truth: f64 = (0..3).map(|k| ui[k] * vj[k]).sum();
                if rng.random::<f64>() < observed {
                    cells.push((i, j, truth + 0.05 * rng.sample::<f64, _>(StandardNormal)));
                } else {
                    held.push((i, j, truth));
                }
            }
        }
        (Ratings::new(20, 40, cells).unwrap(), held)
    }

    fn held_out_rmse(model: &FactorModel, held: &[(usize, usize, f64)]) -> f64 {
        let sq: f64 = held.iter().map(|&(i, j, t)| (model.predict_raw(i, j) - t).powi(2)).sum();
        (sq / held.len() as f64).sqrt()
    }

    #[test]
    fn map_recovers_planted_rank_three() {
        let hyper = FactorHyperParams::new(5).with_sigma2(0.0025);
        let mean: f64 = (0..5)
            .map(|seed| {
                let (r, held) = planted_rank3(seed, 0.5);
                held_out_rmse(&fit_map_ratings(&r, &hyper, 1.0, 5000, seed).unwrap(), &held)
            })
            .sum::<f64>()
            / 5.0;
        assert!(mean <= 0.15, "MAP held-out RMSE {mean}");
    }

    #[test]
    fn bayesian_no_worse_than_map_on_planted() {
        let hyper = FactorHyperParams::new(5).with_sigma2(0.0025);
        let gibbs = GibbsConfig::new(100, 30);
        let (mut bayes, mut map) = (0.0, 0.0);
        for seed in 0..10 {
            let (r, held) = planted_rank3(seed, 0.5);
            bayes += held_out_rmse(&fit_bayesian_ratings(&r, &hyper, &gibbs, seed).unwrap(), &held);
            map += held_out_rmse(&fit_map_ratings(&r, &hyper, 1.0, 5000, seed).unwrap(), &held);
        }
        assert!(bayes / 10.0 <= map / 10.0 + 0.02, "bayes {bayes} map {map}");
    }

    #[test]
    fn ratings_reject_out_of_range() {
        assert!(Ratings::new(2, 2, vec![(2, 0, 1.0)]).is_err());
        assert!(Ratings::new(2, 2, vec![(0, 0, f64::NAN)]).is_err());
        let m = rank1_matrix();
        let r = Ratings::from_matrix(&m);
        assert_eq!((r.rows(), r.cols(), r.cells().len()), (4, 6, 24));
    }

    #[test]
    fn map_recovers_rank_one() {
        let m = rank1_matrix();
        let hyper = FactorHyperParams::new(1).with_lambdas(1e-4, 1e-4);
        let model = fit_map(&m, &hyper, 1.0, 20_000, 3).unwrap();
        for e in m.entries() {
            let p = model.predict_raw(e.annotator, e.item);
            assert!((p - f64::from(e.label)).abs() < 0.05, "{e:?} -> {p}");
            assert!((impute(&model, e.annotator, e.item).unwrap() - f64::from(e.label)).abs() < 0.1);
        }
    }

    #[test]
    fn map_trace_monotone() {
        let m = rank1_matrix();
        let model = fit_map(&m, &FactorHyperParams::new(3), 1.0, 500, 11).unwrap();
        assert!(model.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(model.objective_trace.last() <= model.objective_trace.first());
    }

    #[test]
    fn objective_closed_forms() {
        let m = LabelMatrix::from_triples(2, 3, [(0, 0, 1), (0, 2, 1), (1, 1, 1)]).unwrap();
        let zero_a = DMatrix::zeros(2, 2);
        let zero_i = DMatrix::zeros(2, 3);
        assert_eq!(objective_of(&Ratings::from_matrix(&m), &zero_a, &zero_i, 0.0, 0.0), 1.5);
        assert_eq!(objective_of(&Ratings::from_matrix(&m), &zero_a, &zero_i, 1.0, 1.0), 1.5);
    }

    fn naive_objective(m: &LabelMatrix, a: &DMatrix<f64>, it: &DMatrix<f64>, la: f64, li: f64) -> f64 {
        let mut e = 0.0;
        for i in 0..m.num_annotators() {
            for j in 0..m.num_items() {
                if let Some(l) = m.get(i, j) {
                    let mut dot = 0.0;
                    for d in 0..a.nrows() {
                        dot += a[(d, i)] * it[(d, j)];
                    }
                    e += 0.5 * (f64::from(l) - dot).powi(2);
                }
            }
        }
        for v in a.iter() {
            e += 0.5 * la * v * v;
        }
        for v in it.iter() {
            e += 0.5 * li * v * v;
        }
        e
    }

    #[test]
    fn objective_matches_double_loop() {
        let mut rng = seeded(17);
        let mut triples = Vec::new();
        for i in 0..6 {
            for j in 0..7 {
                if rng.random_bool(0.5) {
                    triples.push((i, j, rng.random_range(0..2u8)));
                }
            }
        }
        let m = LabelMatrix::from_triples(6, 7, triples).unwrap();
        let a = gaussian_init(3, 6, &mut rng);
        let it = gaussian_init(3, 7, &mut rng);
        let fast = objective_of(&Ratings::from_matrix(&m), &a, &it, 0.3, 0.7);
        let slow = naive_objective(&m, &a, &it, 0.3, 0.7);
        assert!((fast - slow).abs() < 1e-10);
    }

    #[test]
    fn single_observation_bayesian() {
        let m = LabelMatrix::from_triples(1, 1, [(0, 0, 1)]).unwrap();
        let cfg = GibbsConfig::new(20, 5);
        let model = fit_bayesian(&m, &FactorHyperParams::new(2), &cfg, 1).unwrap();
        let s = impute(&model, 0, 0).unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn zero_factor_imputes_zero() {
        let m = LabelMatrix::from_triples(2, 2, [(0, 0, 1), (1, 1, 0)]).unwrap();
        let mut model = fit_map(&m, &FactorHyperParams::new(1), 0.5, 10, 0).unwrap();
        model.annotator_factors[(0, 0)] = 0.0;
        assert_eq!(impute(&model, 0, 1).unwrap(), 0.0);
        assert!(impute(&model, 5, 0).is_err());
    }

    #[test]
    fn fold_in_single_label_is_proportional() {
        let m = rank1_matrix();
        let model = fit_map(&m, &FactorHyperParams::new(3), 1.0, 200, 2).unwrap();
        let v = fold_in_annotator(&model, &[(2, 1)]).unwrap();
        let item = model.item_vector(2);
        let norm2: f64 = item.iter().map(|x| x * x).sum();
        for (a, b) in v.iter().zip(&item) {
            assert!((a - b / (model.hyper.lambda_a + norm2)).abs() < 1e-12);
        }
        assert!(fold_in_annotator(&model, &[]).is_err());
    }

    #[test]
    fn fold_in_matches_conditional_map_descent() {
        let m = rank1_matrix();
        let hyper = FactorHyperParams::new(2).with_lambdas(1e-3, 1e-3);
        let model = fit_map(&m, &hyper, 1.0, 2000, 4).unwrap();
        let row: Vec<(usize, u8)> = m.annotator_entries(2).iter().map(|e| (e.item, e.label)).collect();
        let folded = fold_in_annotator(&model, &row).unwrap();
        // oracle: plain gradient descent on this annotator's objective, items fixed
        let mut a = vec![0.0; 2];
        for _ in 0..200_000 {
            let mut g = vec![hyper.lambda_a * a[0], hyper.lambda_a * a[1]];
            for &(j, l) in &row {
                let v = model.item_vector(j);
                let r = f64::from(l) - (a[0] * v[0] + a[1] * v[1]);
                g[0] -= r * v[0];
                g[1] -= r * v[1];
            }
            a[0] -= 0.01 * g[0];
            a[1] -= 0.01 * g[1];
        }
        assert!((a[0] - folded[0]).abs() < 1e-6 && (a[1] - folded[1]).abs() < 1e-6, "{a:?} {folded:?}");
    }

    #[test]
    fn conditional_concentrates_on_least_squares() {
        // Items fixed, hyperparameters fixed, observations replicated x100.
        let mut rng = seeded(8);
        let d = 3;
        let items = gaussian_init(d, 12, &mut rng);
        let truth = DVector::from_vec(vec![0.4, -0.2, 0.7]);
        let mut obs = Vec::new();
        for j in 0..12 {
            let y = truth.dot(&items.column(j)) + 0.1 * rng.random::<f64>();
            for _ in 0..100 {
                obs.push((j, y));
            }
        }
        let mu = DVector::zeros(d);
        let lambda = DMatrix::identity(d, d);
        let (prec, lin) = column_conditional(&items, &obs, &mu, &lambda, 0.5);
        let mut draws = DVector::zeros(d);
        let n = 2000;
        for k in 0..n {
            let mut r = substream(1, 0, k);
            draws += sample_gaussian_canonical(&prec, &lin, &mut r, "t").unwrap().0;
        }
        draws /= n as f64;
        // ridge oracle with vanishing penalty on the unreplicated data
        let mut gram = DMatrix::<f64>::identity(d, d) * 1e-9;
        let mut rhs = DVector::zeros(d);
        for &(j, y) in obs.iter().step_by(100) {
            let v = items.column(j);
            gram.ger(1.0, &v, &v, 1.0);
            rhs.axpy(y, &v, 1.0);
        }
        let ls = gram.try_inverse().unwrap() * rhs;
        assert!((draws - ls).abs().max() < 0.05);
    }

    #[test]
    fn hyper_validation() {
        assert!(FactorHyperParams::new(0).validate().is_err());
        let mut h = FactorHyperParams::new(3);
        h.nu0 = 2.0;
        assert!(h.validate().is_err());
        let mut h = FactorHyperParams::new(2);
        h.w0 = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(h.validate().is_err());
        assert!(FactorHyperParams::new(50).validate().is_ok());
    }

    #[test]
    fn model_json_roundtrip_and_determinism() {
        let mut rng = seeded(1);
        let mut triples = Vec::new();
        let mut cells: Vec<(usize, usize)> = (0..5).flat_map(|i| (0..8).map(move |j| (i, j))).collect();
        cells.shuffle(&mut rng);
        for &(i, j) in &cells[..20] {
            triples.push((i, j, rng.random_range(0..2u8)));
        }
        let m = LabelMatrix::from_triples(5, 8, triples).unwrap();
        let cfg = GibbsConfig::new(10, 5);
        let a = fit_bayesian(&m, &FactorHyperParams::new(2), &cfg, 99).unwrap();
        let b = fit_bayesian(&m, &FactorHyperParams::new(2), &cfg, 99).unwrap();
        let ja = a.to_json(None).unwrap();
        assert_eq!(ja, b.to_json(None).unwrap());
        let back = FactorModel::from_json(&ja).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.samples.len(), 10);
        let c = fit_bayesian(&m, &FactorHyperParams::new(2), &cfg, 100).unwrap();
        assert_ne!(c.annotator_factors, a.annotator_factors);
    }
}
