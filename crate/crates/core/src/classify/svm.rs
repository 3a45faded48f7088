//! Linear hinge-loss SVMs solved in the dual with SMO.
//!
//! Both the standard and the source-adapted problem reduce to
//!
//! ```text
//!   min_α ½ αᵀQα + pᵀα   s.t.  0 ≤ α ≤ C,  yᵀα = 0,   Q_ij = y_i y_j x_iᵀx_j
//! ```
//!
//! where `p_i = y_i f_src(x_i) − 1` and `f_src` is the source decision
//! function (zero for the standard SVM). The returned weights are
//! `w_src + Σ α_i y_i x_i`; the bias is free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;
const DEFAULT_EPS: f64 = 1e-7;
const MAX_ITERS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum ModelSource {
    Consensus,
    User(String),
    Shade(usize),
    L1Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub source: ModelSource,
}

impl LinearModel {
    pub fn zero(dim: usize, source: ModelSource) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            c: 1.0,
            source,
        }
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    /// +1 or −1; a zero margin counts as +1.
    pub fn predict_sign(&self, x: &[f64]) -> f64 {
        if self.decision(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn predict_label(&self, x: &[f64]) -> u8 {
        u8::from(self.decision(x) >= 0.0)
    }
}

/// Solver output with the dual certificate.
#[derive(Debug, Clone)]
pub struct SvmFit {
    pub model: LinearModel,
    pub dual: Vec<f64>,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_inputs(x: &[Vec<f64>], y: &[f64], c: f64) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::domain(format!("C must be positive, got {c}")));
    }
    let dim = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::domain("ragged feature rows"));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::domain("SVM labels must be +1 or -1"));
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateLabels("SVM training needs both classes".into()));
    }
    Ok(dim)
}

/// Primal objective `½‖w − w_src‖² + C Σ max(0, 1 − y_i(wᵀx_i + b))`.
pub fn svm_objective(model: &LinearModel, source: Option<&LinearModel>, x: &[Vec<f64>], y: &[f64]) -> f64 {
    let reg: f64 = match source {
        Some(s) => model
            .weights
            .iter()
            .zip(&s.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
        None => model.weights.iter().map(|w| w * w).sum(),
    };
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| (1.0 - yi * model.decision(xi)).max(0.0))
        .sum();
    0.5 * reg + model.c * hinge
}

/// Linear kernel values, precomputed when the n×n table is small enough.
enum Gram<'a> {
    Table(Vec<f64>, usize),
    OnDemand(&'a [Vec<f64>]),
}

const GRAM_TABLE_MAX: usize = 2048;

impl<'a> Gram<'a> {
    fn new(x: &'a [Vec<f64>]) -> Self {
        let n = x.len();
        if n > GRAM_TABLE_MAX {
            return Gram::OnDemand(x);
        }
        let mut table = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let v = dot(&x[a], &x[b]);
                table[a * n + b] = v;
                table[b * n + a] = v;
            }
        }
        Gram::Table(table, n)
    }

    fn at(&self, a: usize, b: usize) -> f64 {
        match self {
            Gram::Table(t, n) => t[a * n + b],
            Gram::OnDemand(x) => dot(&x[a], &x[b]),
        }
    }

    fn row(&self, a: usize, out: &mut [f64]) {
        match self {
            Gram::Table(t, n) => out.copy_from_slice(&t[a * n..(a + 1) * n]),
            Gram::OnDemand(x) => {
                for (o, r) in out.iter_mut().zip(x.iter()) {
                    *o = dot(&x[a], r);
                }
            }
        }
    }
}

fn solve(
    x: &[Vec<f64>],
    y: &[f64],
    offsets: &[f64],
    c: f64,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, f64, usize) {
    let n = x.len();
    let dim = x[0].len();
    let gram = Gram::new(x);
    let diag: Vec<f64> = (0..n).map(|t| gram.at(t, t)).collect();
    let (mut row_i, mut row_j) = (vec![0.0; n], vec![0.0; n]);
    let mut alpha = vec![0.0; n];
    // gradient of the dual: G = Qα + p with p_i = offset_i − 1
    let mut grad: Vec<f64> = offsets.iter().map(|o| o - 1.0).collect();
    let mut v = vec![0.0; dim];
    let up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi < 0.0 && a < c) || (yi > 0.0 && a > 0.0);

    let mut iterations = 0;
    while iterations < MAX_ITERS {
        // first index: maximal violation
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) {
                let val = -y[t] * grad[t];
                if val > gmax {
                    gmax = val;
                    i = t;
                }
            }
        }
        if i == usize::MAX {
            break;
        }
        gram.row(i, &mut row_i);
        // second index: second-order gain among violating low-set indices
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best_gain = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let val = -y[t] * grad[t];
            gmin = gmin.min(val);
            let b = gmax - val;
            if b > 0.0 {
                let mut a = diag[i] + diag[t] - 2.0 * row_i[t];
                if a <= 0.0 {
                    a = TAU;
                }
                let gain = -(b * b) / a;
                if gain < best_gain {
                    best_gain = gain;
                    j = t;
                }
            }
        }
        if gmax - gmin < eps || j == usize::MAX {
            break;
        }
        iterations += 1;

        gram.row(j, &mut row_j);
        let kij = row_i[j];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (diag[i] + diag[j] - 2.0 * kij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (diag[i] + diag[j] - 2.0 * kij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        // Q_ti = y_t y_i x_tᵀx_i
        for t in 0..n {
            grad[t] += y[t] * (y[i] * row_i[t] * di + y[j] * row_j[t] * dj);
        }
        for k in 0..dim {
            v[k] += y[i] * di * x[i][k] + y[j] * dj * x[j][k];
        }
    }

    // bias offset from the KKT conditions
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let untouched = alpha.iter().all(|&a| a == 0.0);
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else if untouched && lb <= 0.0 && 0.0 <= ub {
        // the starting bias is already optimal
        0.0
    } else {
        0.5 * (ub + lb)
    };
    (alpha, v, -rho, iterations)
}

/// Standard linear SVM: `min ½‖w‖² + C Σ hinge`. Labels are ±1.
pub fn train_svm(x: &[Vec<f64>], y: &[f64], c: f64) -> Result<LinearModel> {
    Ok(train_svm_detailed(x, y, c, None)?.model)
}

/// Adapted SVM: `min ½‖w − w_src‖² + C Σ hinge`, bias unregularized.
pub fn train_adapted_svm(x: &[Vec<f64>], y: &[f64], source: &LinearModel, c: f64) -> Result<LinearModel> {
    Ok(train_svm_detailed(x, y, c, Some(source))?.model)
}

pub fn train_svm_detailed(
    x: &[Vec<f64>],
    y: &[f64],
    c: f64,
    source: Option<&LinearModel>,
) -> Result<SvmFit> {
    let dim = check_inputs(x, y, c)?;
    if let Some(s) = source {
        if s.weights.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: s.weights.len(),
            });
        }
    }
    let offsets: Vec<f64> = match source {
        Some(s) => x.iter().zip(y).map(|(xi, yi)| yi * s.decision(xi)).collect(),
        None => vec![0.0; x.len()],
    };
    let (alpha, v, delta_b, iterations) = solve(x, y, &offsets, c, DEFAULT_EPS);
    let (weights, bias) = match source {
        Some(s) => (
            s.weights.iter().zip(&v).map(|(a, b)| a + b).collect(),
            s.bias + delta_b,
        ),
        None => (v, delta_b),
    };
    if weights.iter().any(|w: &f64| !w.is_finite()) || !bias.is_finite() {
        return Err(Error::Divergence { iteration: iterations });
    }
    Ok(SvmFit {
        model: LinearModel {
            weights,
            bias,
            c,
            source: ModelSource::Consensus,
        },
        dual: alpha,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_pair() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let y = vec![1.0, -1.0];
        let m = train_svm(&x, &y, 1e4).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!(yi * m.decision(xi) >= 1.0 - 1e-6);
        }
        assert!((m.weights[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tiny_c_shrinks_weights() {
        let x = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, -2.0]];
        let y = vec![1.0, -1.0, -1.0];
        let norm = |c| {
            train_svm(&x, &y, c).unwrap().weights.iter().map(|w| w * w).sum::<f64>().sqrt()
        };
        assert!(norm(1e-6) < 1e-5);
        assert!(norm(1e-6) < norm(1.0));
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(train_svm(&x, &[1.0, 1.0], 1.0), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn adapted_dimension_mismatch() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let src = LinearModel::zero(3, ModelSource::Consensus);
        assert!(train_adapted_svm(&x, &[1.0, -1.0], &src, 1.0).is_err());
    }

    #[test]
    fn satisfied_source_is_kept_exactly() {
        let x = vec![vec![2.0, 1.0], vec![3.0, -1.0], vec![-2.0, 0.5], vec![-4.0, 0.0]];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let src = LinearModel {
            weights: vec![1.0, 0.0],
            bias: 0.0,
            c: 1.0,
            source: ModelSource::Consensus,
        };
        for c in [0.01, 1.0, 100.0] {
            let m = train_adapted_svm(&x, &y, &src, c).unwrap();
            assert_eq!(m.weights, src.weights);
            assert!(svm_objective(&m, Some(&src), &x, &y) == 0.0);
        }
    }
}
