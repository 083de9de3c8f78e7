//! Sparse and dense numerical kernels: CSR storage, matrix exponentials and
//! a small Arnoldi iteration.

use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Real matrix in compressed sparse row form.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Square matrix from per-row `(column, value)` lists.
    pub fn from_rows(n: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        assert_eq!(rows.len(), n);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            for &(c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b]
            .iter()
            .copied()
            .zip(self.vals[a..b].iter().copied())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        let mut sums = vec![0.0; self.n];
        for (&c, &v) in self.cols.iter().zip(&self.vals) {
            sums[c] += v.abs();
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.n, self.n);
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }

    /// The block with the first `skip` rows and columns removed, as a faer
    /// sparse matrix.
    pub fn trailing_block(&self, skip: usize) -> Result<SparseColMat<usize, f64>> {
        let m = self.n - skip;
        let mut trip = Vec::with_capacity(self.nnz());
        for i in skip..self.n {
            for (c, v) in self.row(i) {
                if c >= skip {
                    trip.push(Triplet::new(i - skip, c - skip, v));
                }
            }
        }
        SparseColMat::try_new_from_triplets(m, m, &trip)
            .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))
    }

    /// Column `col` with the first `skip` rows removed.
    pub fn column_tail(&self, col: usize, skip: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n - skip];
        for i in skip..self.n {
            for (c, v) in self.row(i) {
                if c == col {
                    out[i - skip] += v;
                }
            }
        }
        out
    }
}

/// Padé-13 numerator/denominator coefficients for scaling and squaring.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

pub fn dense_norm_1(a: &Mat<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by degree-13 Padé approximation with scaling and squaring.
pub fn expm(a: &Mat<f64>) -> Result<Mat<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: a.ncols(),
        });
    }
    let norm = dense_norm_1(a);
    if !norm.is_finite() {
        return Err(Error::InvalidArgument(
            "non-finite matrix in exponential".into(),
        ));
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a * faer::Scale(0.5f64.powi(s));
    let b = &PADE13;
    let id = Mat::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * faer::Scale(b[13]) + &a4 * faer::Scale(b[11]) + &a2 * faer::Scale(b[9]);
    let u_poly = &a6 * &inner_u
        + &a6 * faer::Scale(b[7])
        + &a4 * faer::Scale(b[5])
        + &a2 * faer::Scale(b[3])
        + &id * faer::Scale(b[1]);
    let u = &a * &u_poly;
    let inner_v = &a6 * faer::Scale(b[12]) + &a4 * faer::Scale(b[10]) + &a2 * faer::Scale(b[8]);
    let v = &a6 * &inner_v
        + &a6 * faer::Scale(b[6])
        + &a4 * faer::Scale(b[4])
        + &a2 * faer::Scale(b[2])
        + &id * faer::Scale(b[0]);
    let p = &v + &u;
    let q = &v - &u;
    let mut r = {
        use faer::linalg::solvers::Solve;
        q.partial_piv_lu().solve(&p)
    };
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// `exp(t A) v` by truncated Taylor series on substeps with `‖h A‖₁ ≤ 1`.
pub fn expmv(a: &CsrMatrix, t: f64, v: &[f64], tol: f64) -> Vec<f64> {
    let norm = a.norm_1() * t.abs();
    let steps = norm.ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let mut x = v.to_vec();
    let mut term = vec![0.0; v.len()];
    let mut next = vec![0.0; v.len()];
    for _ in 0..steps {
        term.copy_from_slice(&x);
        let mut acc = x.clone();
        for k in 1..=80 {
            a.matvec_into(&term, &mut next);
            let scale = h / k as f64;
            let mut tn = 0.0f64;
            for (t_i, n_i) in term.iter_mut().zip(&next) {
                *t_i = n_i * scale;
                tn = tn.max(t_i.abs());
            }
            for (a_i, t_i) in acc.iter_mut().zip(&term) {
                *a_i += t_i;
            }
            let an = acc.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if tn <= tol * an {
                break;
            }
        }
        x = acc;
    }
    x
}

/// Ritz values from `k` Arnoldi steps of a linear operator, started from a
/// fixed deterministic vector.
pub fn arnoldi_ritz(
    n: usize,
    k: usize,
    mut op: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<Vec<Complex64>> {
    let k = k.min(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    // deterministic start vector with no special structure
    let mut v0: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i as f64 * 0.618_033_988_75).fract() - 0.5))
        .collect();
    let nrm = norm2(&v0);
    v0.iter_mut().for_each(|x| *x /= nrm);
    basis.push(v0);
    let mut h = Mat::<f64>::zeros(k + 1, k);
    let mut m = k;
    for j in 0..k {
        let mut w = op(&basis[j]);
        // modified Gram-Schmidt, repeated once for stability
        for _ in 0..2 {
            for (i, b) in basis.iter().enumerate() {
                let d = dot(&w, b);
                h[(i, j)] += d;
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let beta = norm2(&w);
        h[(j + 1, j)] = beta;
        if beta < 1e-14 {
            m = j + 1;
            break;
        }
        w.iter_mut().for_each(|x| *x /= beta);
        basis.push(w);
    }
    let hm = Mat::from_fn(m, m, |i, j| h[(i, j)]);
    let eig = hm
        .eigen()
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    Ok((0..m).map(|i| eig.S()[i]).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
