//! Small dense linear-algebra helpers shared by the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

const JITTER_BASE: f64 = 1e-8;
const JITTER_STEPS: usize = 3;

/// Cholesky factor of a symmetric positive-definite matrix. On failure adds
/// `1e-8 * mean(diag)` to the diagonal, escalating by 10x up to three times.
pub fn cholesky_jitter(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = JITTER_BASE * mean_diag;
    for _ in 0..JITTER_STEPS {
        let mut jittered = m.clone();
        for k in 0..n {
            jittered[(k, k)] += eps;
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(Error::Cholesky {
        context: context.to_string(),
    })
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

pub fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}

/// Draw from N(Λ⁻¹ b, Λ⁻¹) given the precision Λ and the linear term b.
/// Returns (sample, mean).
pub fn sample_gaussian_canonical<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    linear: &DVector<f64>,
    rng: &mut R,
    context: &str,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = cholesky_jitter(precision, context)?;
    let mean = chol.solve(linear);
    let z = standard_normal_vector(precision.nrows(), rng);
    // L Lᵀ = Λ, so Lᵀ y = z gives cov(y) = Λ⁻¹.
    let y = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Cholesky {
            context: context.to_string(),
        })?;
    Ok((&mean + y, mean))
}

/// Draw from N(mean, Λ⁻¹) given Λ.
pub fn sample_gaussian_precision<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut R,
    context: &str,
) -> Result<DVector<f64>> {
    let chol = cholesky_jitter(precision, context)?;
    let z = standard_normal_vector(precision.nrows(), rng);
    let y = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Cholesky {
            context: context.to_string(),
        })?;
    Ok(mean + y)
}

/// Wishart draw via the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    dof: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    let chol = cholesky_jitter(scale, "wishart scale")?;
    let mut bartlett = DMatrix::<f64>::zeros(d, d);
    for k in 0..d {
        let chi = ChiSquared::new(dof - k as f64)
            .map_err(|e| Error::domain(format!("wishart degrees of freedom: {e}")))?;
        bartlett[(k, k)] = chi.sample(rng).sqrt();
        for l in 0..k {
            bartlett[(k, l)] = StandardNormal.sample(rng);
        }
    }
    let la = chol.l() * bartlett;
    let mut out = &la * la.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Gaussian-Wishart prior over a (mean, precision) pair.
#[derive(Debug, Clone)]
pub struct NormalWishart {
    pub mu0: DVector<f64>,
    pub beta0: f64,
    pub nu0: f64,
    pub w0_inv: DMatrix<f64>,
}

impl NormalWishart {
    pub fn new(mu0: DVector<f64>, beta0: f64, nu0: f64, w0: &DMatrix<f64>) -> Result<Self> {
        let w0_inv = cholesky_jitter(w0, "W0")?.inverse();
        Ok(Self {
            mu0,
            beta0,
            nu0,
            w0_inv,
        })
    }

    /// Sample (μ, Λ) from the conditional given the columns of `points` (D×n).
    pub fn sample_posterior<R: Rng + ?Sized>(
        &self,
        points: &DMatrix<f64>,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = points.nrows();
        let n = points.ncols() as f64;
        let mean = points.column_mean();
        let mut scatter = DMatrix::<f64>::zeros(d, d);
        for col in points.column_iter() {
            let diff = col - &mean;
            scatter += &diff * diff.transpose();
        }
        let beta_n = self.beta0 + n;
        let nu_n = self.nu0 + n;
        let mu_n = (&self.mu0 * self.beta0 + &mean * n) / beta_n;
        let dm = &self.mu0 - &mean;
        let mut w_n_inv = &self.w0_inv + scatter + (&dm * dm.transpose()) * (self.beta0 * n / beta_n);
        symmetrize(&mut w_n_inv);
        let mut w_n = cholesky_jitter(&w_n_inv, "posterior Wishart scale")?.inverse();
        symmetrize(&mut w_n);
        let lambda = sample_wishart(&w_n, nu_n, rng)?;
        let mu = sample_gaussian_precision(&mu_n, &(&lambda * beta_n), rng, "hyper mean")?;
        Ok((mu, lambda))
    }
}
