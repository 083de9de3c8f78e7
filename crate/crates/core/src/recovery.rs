//! Solving the constraint systems and estimating the recovery error.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintMatrix;
use crate::error::{Error, Result};

/// Ratio `λ₁ / λ_min` below which the kernel direction is flagged.
pub const ILL_DETERMINED_RATIO: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    /// Unit vector minimizing `‖K v‖`.
    pub c_hat: Vec<f64>,
    /// Eigenvalues of `KᵀK`, nonincreasing, padded with zeros when `N < M`.
    pub spectrum: Vec<f64>,
    pub epsilon: f64,
    /// `ε sqrt(Σ_{m>0} 1/λ_m)`; infinite when some `λ_{m>0}` vanishes.
    pub delta_est: f64,
    /// `ε sqrt(M / λ₁)`.
    pub bound: f64,
    pub ill_determined: bool,
    /// Sign applied so the largest-magnitude entry is positive.
    pub sign: f64,
}

impl RecoveryResult {
    pub fn lambda_min(&self) -> f64 {
        *self.spectrum.last().unwrap()
    }

    /// Second-smallest eigenvalue `λ₁`.
    pub fn gap(&self) -> f64 {
        self.spectrum[self.spectrum.len() - 2]
    }
}

/// Full SVD of a dense real matrix; singular values nonincreasing.
fn svd_sorted(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>, Mat<f64>)> {
    let svd = a
        .svd()
        .map_err(|e| Error::LinearAlgebra(format!("svd: {e:?}")))?;
    let k = a.nrows().min(a.ncols());
    let s: Vec<f64> = (0..k).map(|i| svd.S()[i]).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut v = svd.V().to_owned();
    let mut u = svd.U().to_owned();
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..v.nrows() {
            v[(r, dst)] = svd.V()[(r, src)];
        }
        for r in 0..u.nrows() {
            u[(r, dst)] = svd.U()[(r, src)];
        }
    }
    Ok((order.iter().map(|&i| s[i]).collect(), u, v))
}

/// Smallest right singular vector of `K`, its spectrum and error estimate.
pub fn recover(k: &ConstraintMatrix, epsilon: f64) -> Result<RecoveryResult> {
    let (n, m) = (k.nrows(), k.ncols());
    if n == 0 || m < 2 {
        return Err(Error::InvalidArgument(format!(
            "K is {n}×{m}; need N ≥ 1 and M ≥ 2"
        )));
    }
    let (s, _, v) = svd_sorted(&k.data)?;
    let mut spectrum: Vec<f64> = s.iter().map(|x| x * x).collect();
    spectrum.resize(m, 0.0);
    let mut c_hat: Vec<f64> = (0..m).map(|i| v[(i, m - 1)]).collect();
    let norm = c_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
    let big = c_hat
        .iter()
        .enumerate()
        .fold(0, |b, (i, x)| if x.abs() > c_hat[b].abs() { i } else { b });
    let sign = if c_hat[big] < 0.0 { -1.0 } else { 1.0 };
    c_hat.iter_mut().for_each(|x| *x *= sign / norm);

    let (delta_est, bound) = match error_estimate(&spectrum, epsilon) {
        Ok(e) => e,
        Err(_) => (f64::INFINITY, f64::INFINITY),
    };
    let lmin = spectrum[m - 1];
    let l1 = spectrum[m - 2];
    Ok(RecoveryResult {
        c_hat,
        ill_determined: !(l1 > ILL_DETERMINED_RATIO * lmin),
        spectrum,
        epsilon,
        delta_est,
        bound,
        sign,
    })
}

/// `min_{s=±1} ‖s â − b̂‖` of the normalized vectors.
pub fn reconstruction_error(c_hat: &[f64], c_true: &[f64]) -> Result<f64> {
    if c_hat.len() != c_true.len() {
        return Err(Error::DimensionMismatch {
            expected: c_true.len(),
            found: c_hat.len(),
        });
    }
    let na = c_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = c_true.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dist = |s: f64| {
        c_hat
            .iter()
            .zip(c_true)
            .map(|(a, b)| (s * a / na - b / nb).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    Ok(dist(1.0).min(dist(-1.0)))
}

/// `(ε sqrt(Σ_{m>0} 1/λ_m), ε sqrt(M/λ₁))` for a nonincreasing spectrum
/// whose last entry is `λ_min`.
pub fn error_estimate(spectrum: &[f64], epsilon: f64) -> Result<(f64, f64)> {
    let m = spectrum.len();
    if m < 2 {
        return Err(Error::InvalidArgument(
            "spectrum needs at least two eigenvalues".into(),
        ));
    }
    if spectrum.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument(
            "spectrum must be nonincreasing".into(),
        ));
    }
    let mut sum = 0.0;
    for (i, &l) in spectrum[..m - 1].iter().enumerate() {
        if !(l > 0.0) {
            return Err(Error::DegenerateSpectrum {
                index: m - 1 - i,
                value: l,
            });
        }
        sum += 1.0 / l;
    }
    Ok((
        epsilon * sum.sqrt(),
        epsilon * (m as f64 / spectrum[m - 2]).sqrt(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRecovery {
    /// Minimum-norm least-squares solution, absolute scale.
    pub c_l: Vec<f64>,
    pub residual: f64,
    pub rank: usize,
}

/// Minimum-norm least squares `argmin ‖K_l c − b‖`; singular values below
/// `max(N, M) · eps · σ_max` are treated as zero.
pub fn recover_with_prior(k_l: &ConstraintMatrix, b: &[f64]) -> Result<PriorRecovery> {
    let (n, m) = (k_l.nrows(), k_l.ncols());
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    let (s, u, v) = svd_sorted(&k_l.data)?;
    let cutoff = n.max(m) as f64 * f64::EPSILON * s.first().copied().unwrap_or(0.0);
    let rank = s.iter().take_while(|&&x| x > cutoff).count();
    let mut c_l = vec![0.0; m];
    for i in 0..rank {
        let coef = (0..n).map(|r| u[(r, i)] * b[r]).sum::<f64>() / s[i];
        for (j, c) in c_l.iter_mut().enumerate() {
            *c += coef * v[(j, i)];
        }
    }
    let kc = k_l.apply(&c_l)?;
    let residual = kc
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(PriorRecovery {
        c_l,
        residual,
        rank,
    })
}
