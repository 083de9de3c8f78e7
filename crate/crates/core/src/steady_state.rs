//! Stationary states of a Lindbladian.
//!
//! Small chains use a full eigendecomposition of the superoperator. Larger
//! chains work with the real Pauli-transfer matrix `T` (`ṙ = T r`): its
//! identity row vanishes, so fixing `r_I = 1` turns stationarity into the
//! sparse linear system `T' r' = -t` on the remaining coordinates, which is
//! solved by sparse LU. The same factorization drives a shift-inverted
//! Arnoldi run for the gap report.

use std::io::{Read, Write};
use std::path::Path;

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{arnoldi_ritz, norm2};
use crate::model::LindbladModel;
use crate::pauli::DensityMatrix;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_DEGENERACY_RATIO: f64 = 1e3;
/// Largest chain handled by the dense eigendecomposition in `Auto` mode.
pub const DENSE_MAX_SITES: usize = 4;
/// Largest chain accepted at all.
pub const MAX_SITES: usize = 7;

const MAGIC: &[u8; 8] = b"LLSTATE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Auto,
    Dense,
    Sparse,
}

#[derive(Clone, Copy, Debug)]
pub struct SteadyStateOptions {
    pub tol: f64,
    /// Required ratio between the second and first smallest |eigenvalue|.
    pub degeneracy_ratio: f64,
    pub strategy: Strategy,
    /// Arnoldi steps for the sparse gap report.
    pub arnoldi_steps: usize,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        SteadyStateOptions {
            tol: DEFAULT_TOL,
            degeneracy_ratio: DEFAULT_DEGENERACY_RATIO,
            strategy: Strategy::Auto,
            arnoldi_steps: 20,
        }
    }
}

impl SteadyStateOptions {
    pub fn with_tol(tol: f64) -> Self {
        SteadyStateOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SteadyStateResult {
    pub rho: DensityMatrix,
    /// `‖L(ρ)‖_F`.
    pub residual: f64,
    /// Two smallest |eigenvalues| of the generator.
    pub gap_report: [f64; 2],
    /// Unprocessed solution before Hermitization and normalization.
    pub raw: Mat<Complex64>,
    pub strategy: Strategy,
}

/// Solve with default options and the given residual tolerance.
pub fn find_steady_state(model: &LindbladModel, tol: f64) -> Result<SteadyStateResult> {
    find_steady_state_with(model, &SteadyStateOptions::with_tol(tol))
}

pub fn find_steady_state_with(
    model: &LindbladModel,
    opts: &SteadyStateOptions,
) -> Result<SteadyStateResult> {
    let n = model.n_sites();
    if n > MAX_SITES {
        return Err(Error::SizeBudget {
            n_sites: n,
            max_sites: MAX_SITES,
        });
    }
    let strategy = match opts.strategy {
        Strategy::Auto if n <= DENSE_MAX_SITES => Strategy::Dense,
        Strategy::Auto => Strategy::Sparse,
        s => s,
    };
    let result = match strategy {
        Strategy::Dense => dense(model, opts)?,
        _ => sparse(model, opts)?,
    };
    if !(result.residual <= opts.tol) {
        return Err(Error::NoConvergence(format!(
            "steady-state residual {:e} above tolerance {:e}",
            result.residual, opts.tol
        )));
    }
    Ok(result)
}

fn check_degeneracy(smallest: f64, second: f64, opts: &SteadyStateOptions) -> Result<()> {
    if second < 100.0 * opts.tol || second < opts.degeneracy_ratio * smallest {
        return Err(Error::DegenerateSteadyState { smallest, second });
    }
    Ok(())
}

fn dense(model: &LindbladModel, opts: &SteadyStateOptions) -> Result<SteadyStateResult> {
    let n = model.n_sites();
    let d = 1usize << n;
    let g = model.generator();
    let s = g.superoperator(MAX_SITES)?;
    let eig = s
        .eigen()
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    let vals = eig.S();
    let mut order: Vec<usize> = (0..d * d).collect();
    order.sort_by(|&a, &b| vals[a].norm().total_cmp(&vals[b].norm()));
    let (smallest, second) = (vals[order[0]].norm(), vals[order[1]].norm());
    check_degeneracy(smallest, second, opts)?;
    let v = eig.U().col(order[0]);
    let raw = Mat::from_fn(d, d, |i, j| v[i + j * d]);
    // eigenvectors carry an arbitrary complex phase; divide it out via the trace
    let tr: Complex64 = (0..d).map(|i| raw[(i, i)]).sum();
    if tr.norm() == 0.0 {
        return Err(Error::InvalidState("kernel vector is traceless".into()));
    }
    let phased = &raw * faer::Scale(tr.conj() / tr.norm());
    let rho = DensityMatrix::hermitize_normalize(n, &phased)?;
    let residual = g.apply(rho.matrix()).norm_l2();
    Ok(SteadyStateResult {
        rho,
        residual,
        gap_report: [smallest, second],
        raw,
        strategy: Strategy::Dense,
    })
}

fn sparse(model: &LindbladModel, opts: &SteadyStateOptions) -> Result<SteadyStateResult> {
    let n = model.n_sites();
    let dim = 1usize << (2 * n);
    let g = model.generator();
    let t = g.transfer_matrix();
    let block = t.trailing_block(1)?;
    let lu = block.sp_lu().map_err(|_| Error::DegenerateSteadyState {
        smallest: 0.0,
        second: 0.0,
    })?;
    let rhs: Vec<f64> = t.column_tail(0, 1).into_iter().map(|x| -x).collect();
    let solve = |b: &[f64]| -> Vec<f64> {
        let col = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        let x = lu.solve(&col);
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    };
    let mut x = solve(&rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSteadyState {
            smallest: 0.0,
            second: 0.0,
        });
    }
    // iterative refinement on the reduced system
    let mut r = vec![0.0; dim];
    for _ in 0..2 {
        r[0] = 1.0;
        r[1..].copy_from_slice(&x);
        let tr = t.matvec(&r);
        let corr = solve(&tr[1..].iter().map(|v| -v).collect::<Vec<_>>());
        x.iter_mut().zip(&corr).for_each(|(a, b)| *a += b);
    }
    r[0] = 1.0;
    r[1..].copy_from_slice(&x);
    let smallest = norm2(&t.matvec(&r)) / norm2(&r);
    let ritz = arnoldi_ritz(dim - 1, opts.arnoldi_steps, |v| solve(v))?;
    let mu = ritz.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let second = if mu > 0.0 { 1.0 / mu } else { f64::INFINITY };
    check_degeneracy(smallest, second, opts)?;
    let raw_state = DensityMatrix::from_pauli_vector(n, &r)?;
    let raw = raw_state.into_matrix();
    let rho = DensityMatrix::hermitize_normalize(n, &raw)?;
    let residual = g.apply(rho.matrix()).norm_l2();
    Ok(SteadyStateResult {
        rho,
        residual,
        gap_report: [smallest, second],
        raw,
        strategy: Strategy::Sparse,
    })
}

/// `‖L(ρ)‖_F`.
pub fn verify_steady_state(model: &LindbladModel, rho: &DensityMatrix) -> Result<f64> {
    Ok(model.apply(rho)?.norm_l2())
}

/// Write `ρ` as a 16-byte header (magic, `Λ` as u64) followed by row-major
/// little-endian `(re, im)` doubles.
pub fn write_state<W: Write>(rho: &DensityMatrix, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(rho.n_sites() as u64).to_le_bytes())?;
    let m = rho.matrix();
    let d = rho.dim();
    let mut buf = Vec::with_capacity(16 * d * d);
    for i in 0..d {
        for j in 0..d {
            buf.extend_from_slice(&m[(i, j)].re.to_le_bytes());
            buf.extend_from_slice(&m[(i, j)].im.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read a state written by [`write_state`]; the density-matrix checks are applied.
pub fn read_state<R: Read>(mut r: R) -> Result<DensityMatrix> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..8] != MAGIC {
        return Err(Error::Parse("not a steady-state file".into()));
    }
    let n = u64::from_le_bytes(header[8..].try_into().expect("8 bytes")) as usize;
    if n == 0 || n > MAX_SITES {
        return Err(Error::Parse(format!("unsupported chain length {n}")));
    }
    let d = 1usize << n;
    let mut buf = vec![0u8; 16 * d * d];
    r.read_exact(&mut buf)?;
    let f = |k: usize| f64::from_le_bytes(buf[8 * k..8 * k + 8].try_into().expect("8 bytes"));
    let m = Mat::from_fn(d, d, |i, j| {
        let k = 2 * (i * d + j);
        Complex64::new(f(k), f(k + 1))
    });
    DensityMatrix::new(n, m)
}

pub fn save_state(rho: &DensityMatrix, path: &Path) -> Result<()> {
    write_state(rho, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_state(path: &Path) -> Result<DensityMatrix> {
    read_state(std::io::BufReader::new(std::fs::File::open(path)?))
}
