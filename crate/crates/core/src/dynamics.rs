//! Time evolution under a Lindbladian and the mean local trace distance.
//!
//! States are propagated as Pauli vectors `r_P = Tr(P ρ)`, which evolve with
//! the real transfer matrix `ṙ = T r`.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm, expmv};
use crate::model::LindbladModel;
use crate::pauli::{partial_trace, DensityMatrix};

/// Largest chain propagated.
pub const MAX_SITES: usize = 7;
/// Largest chain for which [`Propagator::Dense`] is allowed.
pub const DENSE_MAX_SITES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Propagator {
    /// Truncated Taylor series on the sparse transfer matrix, stepping
    /// between consecutive times.
    #[default]
    Taylor,
    /// Dense matrix exponential `exp(t T)` for every time.
    Dense,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
}

pub fn evolve(
    model: &LindbladModel,
    rho0: &DensityMatrix,
    times: &[f64],
    tol: f64,
) -> Result<Trajectory> {
    evolve_with(model, rho0, times, tol, Propagator::Taylor)
}

pub fn evolve_with(
    model: &LindbladModel,
    rho0: &DensityMatrix,
    times: &[f64],
    tol: f64,
    propagator: Propagator,
) -> Result<Trajectory> {
    let n = model.n_sites();
    if rho0.n_sites() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rho0.n_sites(),
        });
    }
    let limit = if propagator == Propagator::Dense {
        DENSE_MAX_SITES
    } else {
        MAX_SITES
    };
    if n > limit {
        return Err(Error::SizeBudget {
            n_sites: n,
            max_sites: limit,
        });
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(
            "times must be finite, nonnegative and nondecreasing".into(),
        ));
    }
    let t_mat = model.generator().transfer_matrix();
    let r0 = rho0.pauli_vector();
    let mut states = Vec::with_capacity(times.len());
    match propagator {
        Propagator::Taylor => {
            let mut r = r0;
            let mut now = 0.0;
            for &t in times {
                if t > now {
                    r = expmv(&t_mat, t - now, &r, tol.min(1e-12));
                    now = t;
                }
                states.push(to_state(n, &r)?);
            }
        }
        Propagator::Dense => {
            let dense = t_mat.to_dense();
            for &t in times {
                let e = expm(&(&dense * faer::Scale(t)))?;
                let r: Vec<f64> = (0..r0.len())
                    .map(|i| (0..r0.len()).map(|j| e[(i, j)] * r0[j]).sum())
                    .collect();
                states.push(to_state(n, &r)?);
            }
        }
    }
    for (t, s) in times.iter().zip(&states) {
        let tr = s.trace();
        if (tr.re - 1.0).abs() > 1e-9 || !tr.re.is_finite() {
            return Err(Error::NoConvergence(format!("trace {} at t = {t}", tr.re)));
        }
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
    })
}

fn to_state(n: usize, r: &[f64]) -> Result<DensityMatrix> {
    DensityMatrix::from_pauli_vector(n, r)
}

/// `½‖a − b‖₁` of two Hermitian matrices.
pub fn trace_distance(
    a: &Mat<num_complex::Complex64>,
    b: &Mat<num_complex::Complex64>,
) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    let diff = a - b;
    let ev = diff
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    Ok(0.5 * ev.iter().map(|x| x.abs()).sum::<f64>())
}

/// Average trace distance of the reduced states on neighbouring pairs.
pub fn mean_local_trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    let n = a.n_sites();
    if b.n_sites() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.n_sites(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two sites".into()));
    }
    let mut sum = 0.0;
    for i in 0..n - 1 {
        let ra = partial_trace(a, &[i, i + 1])?;
        let rb = partial_trace(b, &[i, i + 1])?;
        sum += trace_distance(ra.matrix(), rb.matrix())?;
    }
    Ok(sum / (n - 1) as f64)
}

/// `{0} ∪` `count` log-spaced times in `[t_min, t_max]`.
pub fn log_time_grid(t_min: f64, t_max: f64, count: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    let (a, b) = (t_min.log10(), t_max.log10());
    for k in 0..count {
        let f = if count == 1 {
            0.0
        } else {
            k as f64 / (count - 1) as f64
        };
        out.push(10f64.powf(a + f * (b - a)));
    }
    out
}
