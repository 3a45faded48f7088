//! L1-regularized logistic regression by accelerated proximal gradient.
//!
//! Minimizes `(1/n) Σ log(1 + exp(−y_i (wᵀx_i + b))) + λ‖w‖₁` with the bias
//! left unpenalized. Labels are ±1.

use crate::error::{Error, Result};

const MAX_ITERS: usize = 50_000;
const TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLogistic {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub iterations: usize,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn margins(x: &[Vec<f64>], w: &[f64], b: f64) -> Vec<f64> {
    x.iter()
        .map(|r| r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect()
}

pub fn logistic_objective(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, lambda: f64) -> f64 {
    let loss: f64 = margins(x, w, b)
        .iter()
        .zip(y)
        .map(|(m, yi)| softplus(-yi * m))
        .sum::<f64>()
        / x.len() as f64;
    loss + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// Gradient of the smooth part with respect to (w, b).
fn smooth_gradient(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64) -> (Vec<f64>, f64, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (r, (m, yi)) in x.iter().zip(margins(x, w, b).iter().zip(y)) {
        let z = -yi * m;
        loss += softplus(z);
        let coef = -yi * sigmoid(z) / n;
        for (g, v) in gw.iter_mut().zip(r) {
            *g += coef * v;
        }
        gb += coef;
    }
    (gw, gb, loss / n)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub fn fit_l1_logistic(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<SparseLogistic> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::domain("L1 weight must be nonnegative"));
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateLabels("logistic regression needs both classes".into()));
    }
    let dim = x[0].len();
    let n = x.len() as f64;
    // Lipschitz bound of the mean logistic loss gradient (Frobenius bound, bias column included)
    let lip = 0.25 * (x.iter().flatten().map(|v| v * v).sum::<f64>() + n) / n;
    let step = 1.0 / lip.max(1e-12);

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let (mut zw, mut zb) = (w.clone(), b);
    let mut t: f64 = 1.0;
    let mut prev_obj = logistic_objective(x, y, &w, b, lambda);
    let mut iterations = 0;
    for it in 1..=MAX_ITERS {
        iterations = it;
        let (gw, gb, _) = smooth_gradient(x, y, &zw, zb);
        let new_w: Vec<f64> = zw
            .iter()
            .zip(&gw)
            .map(|(z, g)| soft_threshold(z - step * g, step * lambda))
            .collect();
        let new_b = zb - step * gb;
        let obj = logistic_objective(x, y, &new_w, new_b, lambda);
        if !obj.is_finite() {
            return Err(Error::Divergence { iteration: it });
        }
        if obj > prev_obj {
            // adaptive restart keeps the sequence monotone
            zw.clone_from(&w);
            zb = b;
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        zw = new_w
            .iter()
            .zip(&w)
            .map(|(nw, ow)| nw + mom * (nw - ow))
            .collect();
        zb = new_b + mom * (new_b - b);
        let change = new_w
            .iter()
            .zip(&w)
            .map(|(a, c)| (a - c).abs())
            .fold((new_b - b).abs(), f64::max);
        w = new_w;
        b = new_b;
        t = t_next;
        let improvement = prev_obj - obj;
        prev_obj = obj;
        if change < TOL || (improvement >= 0.0 && improvement < TOL * obj.abs().max(1e-300) && change < 1e-10) {
            break;
        }
    }
    Ok(SparseLogistic {
        weights: w,
        bias: b,
        lambda,
        iterations,
    })
}

/// Sum of |w| over each feature group.
pub fn group_magnitudes(weights: &[f64], groups: &[Vec<usize>]) -> Result<Vec<f64>> {
    groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|&k| {
                    weights
                        .get(k)
                        .map(|w| w.abs())
                        .ok_or_else(|| Error::domain(format!("feature group index {k} out of range")))
                })
                .sum()
        })
        .collect()
}

/// Norm of the minimum-norm element of the subdifferential at (w, b).
pub fn optimality_residual(x: &[Vec<f64>], y: &[f64], model: &SparseLogistic) -> f64 {
    let (gw, gb, _) = smooth_gradient(x, y, &model.weights, model.bias);
    let mut sq = gb * gb;
    for (g, w) in gw.iter().zip(&model.weights) {
        let r = if *w != 0.0 {
            g + model.lambda * w.signum()
        } else {
            soft_threshold(*g, model.lambda)
        };
        sq += r * r;
    }
    sq.sqrt()
}
