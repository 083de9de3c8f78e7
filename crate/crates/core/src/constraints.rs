//! Constraint operators, measured observables and the constraint matrix `K`.
//!
//! For a constraint operator `A` stationarity gives `Tr(A L(ρ)) = 0`, which
//! is linear in the packed coefficients. Column by column the observable
//! whose expectation forms `K_{n,m}` is
//!
//! - Hamiltonian term `h`: `-i[A, h]`
//! - diagonal pair `(r, r)`: `G(r, r)`
//! - real part of `(r, s)`: `G(r, s) + G(s, r)`
//! - imaginary part of `(r, s)`: `i (G(r, s) - G(s, r))`
//!
//! with `G(r, s) = ½([l_s†, A] l_r + l_s† [A, l_r]) = l_s† A l_r - ½{l_s† l_r, A}`.
//! Every one of these is Hermitian, so each entry is a real expectation value.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use faer::Mat;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OperatorBasis, ParamId};
use crate::pauli::{pauli_trace, DensityMatrix, LocalOperator, PauliLetter, PauliString};

/// Relative size of imaginary coefficients tolerated in an observable.
pub const IMAGINARY_TOL: f64 = 1e-8;

/// Ordered list of single-Pauli-string constraint operators.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSet {
    n_sites: usize,
    k_max: usize,
    ordering_seed: u64,
    strings: Vec<PauliString>,
}

impl ConstraintSet {
    /// Every non-identity string whose support spans at most `k_max`
    /// consecutive sites: spans 1 and 2 in site order, then the rest
    /// shuffled by `ordering_seed`.
    pub fn new(n_sites: usize, k_max: usize, ordering_seed: u64) -> Result<Self> {
        Self::window(n_sites, 0, n_sites.saturating_sub(1), k_max, ordering_seed)
    }

    /// As [`ConstraintSet::new`] restricted to strings supported in sites `lo..=hi`.
    pub fn window(
        n_sites: usize,
        lo: usize,
        hi: usize,
        k_max: usize,
        ordering_seed: u64,
    ) -> Result<Self> {
        if n_sites == 0 || n_sites > crate::pauli::MAX_SITES {
            return Err(Error::InvalidArgument(format!(
                "chain length {n_sites} unsupported"
            )));
        }
        if hi >= n_sites || lo > hi {
            return Err(Error::SiteOutOfRange { site: hi, n_sites });
        }
        if k_max == 0 || k_max > n_sites {
            return Err(Error::InvalidArgument(format!(
                "k_max = {k_max} outside 1..={n_sites}"
            )));
        }
        let mut short = Vec::new();
        let mut long = Vec::new();
        for span in 1..=k_max.min(hi - lo + 1) {
            for start in lo..=hi + 1 - span {
                for p in strings_with_span(n_sites, start, span) {
                    if span <= 2 {
                        short.push(p);
                    } else {
                        long.push(p);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ordering_seed);
        long.shuffle(&mut rng);
        short.extend(long);
        Ok(ConstraintSet {
            n_sites,
            k_max,
            ordering_seed,
            strings: short,
        })
    }

    /// Explicit list of strings.
    pub fn from_strings(n_sites: usize, strings: Vec<PauliString>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut k_max = 1;
        for p in &strings {
            if p.n_sites() != n_sites {
                return Err(Error::DimensionMismatch {
                    expected: n_sites,
                    found: p.n_sites(),
                });
            }
            if p.is_identity() {
                return Err(Error::InvalidArgument(
                    "identity is not a constraint".into(),
                ));
            }
            if !seen.insert(*p) {
                return Err(Error::InvalidArgument(format!(
                    "constraint {p} listed twice"
                )));
            }
            k_max = k_max.max(p.span());
        }
        Ok(ConstraintSet {
            n_sites,
            k_max,
            ordering_seed: 0,
            strings,
        })
    }

    /// Single-site `Y_j, Z_j` on every site.
    pub fn single_site_yz(n_sites: usize) -> Result<Self> {
        let mut s = Vec::new();
        for j in 0..n_sites {
            for l in [PauliLetter::Y, PauliLetter::Z] {
                s.push(PauliString::single(n_sites, j, l));
            }
        }
        Self::from_strings(n_sites, s)
    }

    /// The first `n` operators.
    pub fn truncated(&self, n: usize) -> Self {
        ConstraintSet {
            strings: self.strings[..n.min(self.strings.len())].to_vec(),
            ..self.clone()
        }
    }

    /// Concatenation, skipping strings already present.
    pub fn union(&self, other: &ConstraintSet) -> Result<Self> {
        let seen: BTreeSet<_> = self.strings.iter().copied().collect();
        let mut s = self.strings.clone();
        s.extend(other.strings.iter().filter(|p| !seen.contains(p)).copied());
        let mut out = Self::from_strings(self.n_sites, s)?;
        out.ordering_seed = self.ordering_seed;
        Ok(out)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn ordering_seed(&self) -> u64 {
        self.ordering_seed
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn strings(&self) -> &[PauliString] {
        &self.strings
    }

    pub fn operators(&self) -> Vec<LocalOperator> {
        self.strings
            .iter()
            .map(|p| LocalOperator::from_pauli(*p))
            .collect()
    }
}

/// Strings on sites `start..start+span` with non-identity letters at both ends.
fn strings_with_span(n_sites: usize, start: usize, span: usize) -> Vec<PauliString> {
    let mut out = Vec::new();
    let inner = 4usize.pow(span.saturating_sub(2) as u32);
    for a in PauliLetter::NON_IDENTITY {
        if span == 1 {
            out.push(PauliString::single(n_sites, start, a));
            continue;
        }
        for mid in 0..inner {
            for b in PauliLetter::NON_IDENTITY {
                let mut letters = vec![a];
                for k in (0..span - 2).rev() {
                    letters.push(PauliLetter::ALL[(mid >> (2 * k)) & 3]);
                }
                letters.push(b);
                out.push(
                    PauliString::local(n_sites, start, &letters).expect("window inside chain"),
                );
            }
        }
    }
    out
}

fn g_operator(
    l_r: &LocalOperator,
    l_s: &LocalOperator,
    a: &LocalOperator,
) -> Result<LocalOperator> {
    let lsd = l_s.adjoint();
    let left = lsd.commutator(a)?.mul(l_r)?;
    let right = lsd.mul(&a.commutator(l_r)?)?;
    Ok(left.add(&right)?.scaled(Complex64::new(0.5, 0.0)))
}

/// Observable whose expectation is the `K` entry of constraint `a` in `column`.
pub fn column_observable(
    basis: &OperatorBasis,
    a: &LocalOperator,
    column: ParamId,
) -> Result<LocalOperator> {
    let jumps = basis.jump_ops();
    let disjoint = |mask: u64| a.support_sites_mask() & mask == 0;
    if disjoint(basis.param_support(column)) {
        return Ok(LocalOperator::zero(a.n_sites()));
    }
    match column {
        ParamId::Hamiltonian(i) => Ok(a
            .commutator(&basis.hamiltonian_ops()[i])?
            .scaled(Complex64::new(0.0, -1.0))),
        ParamId::Diagonal(r) => g_operator(&jumps[r], &jumps[r], a),
        ParamId::Real(r, s) => {
            g_operator(&jumps[r], &jumps[s], a)?.add(&g_operator(&jumps[s], &jumps[r], a)?)
        }
        ParamId::Imag(r, s) => Ok(g_operator(&jumps[r], &jumps[s], a)?
            .sub(&g_operator(&jumps[s], &jumps[r], a)?)?
            .scaled(Complex64::new(0.0, 1.0))),
    }
}

/// Hermitian observable with sign-normalized real coefficients, used to
/// identify repeated measurements of the same quantity.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObservableKey(Vec<(PauliString, u64)>);

impl ObservableKey {
    pub fn terms(&self) -> impl Iterator<Item = (PauliString, f64)> + '_ {
        self.0.iter().map(|&(p, bits)| (p, f64::from_bits(bits)))
    }

    pub fn to_operator(&self) -> LocalOperator {
        let n = self.0.first().map_or(1, |(p, _)| p.n_sites());
        LocalOperator::from_terms(n, self.terms().map(|(p, c)| (p, Complex64::new(c, 0.0))))
            .expect("key terms share one chain length")
    }
}

/// Split a Hermitian operator into a canonical key and the sign `s` with
/// `op = s · key`. Returns `None` for the zero operator.
pub fn canonicalize(op: &LocalOperator) -> Result<Option<(ObservableKey, f64)>> {
    let scale = op.max_abs_coefficient();
    if scale == 0.0 {
        return Ok(None);
    }
    for (p, c) in op.terms() {
        if c.im.abs() > IMAGINARY_TOL * scale {
            return Err(Error::ImaginaryResidue {
                residue: c.im.abs(),
                observable: format!("{p} in {op}"),
            });
        }
    }
    let mut terms: Vec<(PauliString, f64)> = op
        .terms()
        .map(|(p, c)| (*p, c.re))
        .filter(|(_, c)| *c != 0.0)
        .collect();
    if terms.is_empty() {
        return Ok(None);
    }
    let sign = if terms[0].1 < 0.0 { -1.0 } else { 1.0 };
    for t in &mut terms {
        t.1 *= sign;
    }
    Ok(Some((
        ObservableKey(terms.into_iter().map(|(p, c)| (p, c.to_bits())).collect()),
        sign,
    )))
}

/// Granularity at which measurement noise is shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One draw per distinct observable, reused wherever it appears.
    #[default]
    PerObservable,
    /// One draw per Pauli-string expectation.
    PerPauli,
    /// An independent draw for every nonzero entry of `K`.
    PerEntry,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub seed: u64,
    pub mode: NoiseMode,
}

impl NoiseSpec {
    pub fn exact() -> Self {
        NoiseSpec {
            epsilon: 0.0,
            seed: 0,
            mode: NoiseMode::PerObservable,
        }
    }

    pub fn per_observable(epsilon: f64, seed: u64) -> Self {
        NoiseSpec {
            epsilon,
            seed,
            mode: NoiseMode::PerObservable,
        }
    }
}

/// Measured values of canonical observables.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    n_sites: usize,
    noise: NoiseSpec,
    values: BTreeMap<ObservableKey, f64>,
}

impl MeasurementRecord {
    /// Measure `observables` on `rho`. Noise draws follow the sorted order of
    /// observable keys (or Pauli strings), so the record only depends on the
    /// set of observables, not on their order.
    pub fn measure(
        rho: &DensityMatrix,
        observables: &[LocalOperator],
        noise: NoiseSpec,
    ) -> Result<Self> {
        let n = rho.n_sites();
        let mut keys = BTreeSet::new();
        for op in observables {
            if op.n_sites() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: op.n_sites(),
                });
            }
            if let Some((k, _)) = canonicalize(op)? {
                keys.insert(k);
            }
        }
        let paulis: BTreeSet<PauliString> = keys
            .iter()
            .flat_map(|k| k.terms().map(|(p, _)| p))
            .collect();
        let paulis: Vec<PauliString> = paulis.into_iter().collect();
        let mut expect: Vec<f64> = paulis
            .par_iter()
            .map(|p| pauli_trace(p, rho.matrix()).re)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        if noise.mode == NoiseMode::PerPauli && noise.epsilon != 0.0 {
            for (p, v) in paulis.iter().zip(expect.iter_mut()) {
                if !p.is_identity() {
                    let eta: f64 = StandardNormal.sample(&mut rng);
                    *v += noise.epsilon * eta;
                }
            }
        }
        let lookup: BTreeMap<PauliString, f64> = paulis.into_iter().zip(expect).collect();
        let mut values = BTreeMap::new();
        for k in keys {
            let mut v: f64 = k.terms().map(|(p, c)| c * lookup[&p]).sum();
            if noise.mode == NoiseMode::PerObservable && noise.epsilon != 0.0 {
                let eta: f64 = StandardNormal.sample(&mut rng);
                v += noise.epsilon * eta;
            }
            values.insert(k, v);
        }
        Ok(MeasurementRecord {
            n_sites: n,
            noise,
            values,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn noise(&self) -> NoiseSpec {
        self.noise
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ObservableKey, f64)> {
        self.values.iter().map(|(k, v)| (k, *v))
    }

    pub fn key_value(&self, key: &ObservableKey) -> Result<f64> {
        self.values
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingObservable(key.to_operator().to_string()))
    }

    /// Measured `⟨op⟩`; zero operators need no measurement.
    pub fn value(&self, op: &LocalOperator) -> Result<f64> {
        match canonicalize(op)? {
            None => Ok(0.0),
            Some((k, sign)) => Ok(sign * self.key_value(&k)?),
        }
    }

    pub fn to_file(&self) -> RecordFile {
        RecordFile {
            n_sites: self.n_sites,
            epsilon: self.noise.epsilon,
            seed: self.noise.seed,
            mode: self.noise.mode,
            entries: self
                .values
                .iter()
                .map(|(k, v)| RecordEntry {
                    observable: k.to_operator().to_string(),
                    value: *v,
                })
                .collect(),
        }
    }

    pub fn from_file(file: &RecordFile) -> Result<Self> {
        let mut values = BTreeMap::new();
        for e in &file.entries {
            let op: LocalOperator = e.observable.parse()?;
            let (k, sign) = canonicalize(&op)?
                .ok_or_else(|| Error::Parse("zero observable in record".into()))?;
            values.insert(k, sign * e.value);
        }
        Ok(MeasurementRecord {
            n_sites: file.n_sites,
            noise: NoiseSpec {
                epsilon: file.epsilon,
                seed: file.seed,
                mode: file.mode,
            },
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordFile {
    pub n_sites: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: NoiseMode,
    pub entries: Vec<RecordEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub observable: String,
    pub value: f64,
}

/// Canonical observable (and sign) behind every cell of `K`.
#[derive(Clone, Debug)]
pub struct ObservableTable {
    rows: Vec<PauliString>,
    cols: Vec<ParamId>,
    cells: Vec<Option<(usize, f64)>>,
    keys: Vec<ObservableKey>,
}

impl ObservableTable {
    pub fn new(constraints: &ConstraintSet, basis: &OperatorBasis) -> Result<Self> {
        Self::for_columns(constraints, basis, basis.param_ids())
    }

    pub fn for_columns(
        constraints: &ConstraintSet,
        basis: &OperatorBasis,
        cols: Vec<ParamId>,
    ) -> Result<Self> {
        if constraints.n_sites() != basis.n_sites() {
            return Err(Error::DimensionMismatch {
                expected: basis.n_sites(),
                found: constraints.n_sites(),
            });
        }
        let rows: Vec<Vec<Option<(ObservableKey, f64)>>> = constraints
            .strings()
            .par_iter()
            .map(|p| {
                let a = LocalOperator::from_pauli(*p);
                cols.iter()
                    .map(|&c| canonicalize(&column_observable(basis, &a, c)?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut index: BTreeMap<ObservableKey, usize> = BTreeMap::new();
        let mut keys = Vec::new();
        let mut cells = Vec::with_capacity(rows.len() * cols.len());
        for row in rows {
            for cell in row {
                cells.push(cell.map(|(k, sign)| {
                    let id = *index.entry(k.clone()).or_insert_with(|| {
                        keys.push(k);
                        keys.len() - 1
                    });
                    (id, sign)
                }));
            }
        }
        Ok(ObservableTable {
            rows: constraints.strings().to_vec(),
            cols,
            cells,
            keys,
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn observables(&self) -> Vec<LocalOperator> {
        self.keys.iter().map(ObservableKey::to_operator).collect()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<(&ObservableKey, f64)> {
        self.cells[row * self.cols.len() + col].map(|(k, s)| (&self.keys[k], s))
    }

    /// Fill `K` from a record. Structurally zero cells stay exactly zero.
    pub fn assemble(&self, record: &MeasurementRecord) -> Result<ConstraintMatrix> {
        let values = self
            .keys
            .iter()
            .map(|k| record.key_value(k))
            .collect::<Result<Vec<_>>>()?;
        let (nr, nc) = (self.rows.len(), self.cols.len());
        let mut data = Mat::<f64>::zeros(nr, nc);
        let noise = record.noise();
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        for i in 0..nr {
            for j in 0..nc {
                if let Some((k, sign)) = self.cells[i * nc + j] {
                    let mut v = sign * values[k];
                    if noise.mode == NoiseMode::PerEntry && noise.epsilon != 0.0 {
                        let eta: f64 = StandardNormal.sample(&mut rng);
                        v += noise.epsilon * eta;
                    }
                    data[(i, j)] = v;
                }
            }
        }
        Ok(ConstraintMatrix {
            data,
            row_labels: self.rows.clone(),
            col_labels: self.cols.clone(),
        })
    }
}

/// Observables needed to build `K` for the given constraints and basis.
pub fn required_observables(
    constraints: &ConstraintSet,
    basis: &OperatorBasis,
) -> Result<Vec<LocalOperator>> {
    Ok(ObservableTable::new(constraints, basis)?.observables())
}

/// Single `K` entry from a record.
pub fn k_entry(
    a: &LocalOperator,
    column: ParamId,
    basis: &OperatorBasis,
    record: &MeasurementRecord,
) -> Result<f64> {
    record.value(&column_observable(basis, a, column)?)
}

/// `K` with one row per constraint and one column per basis parameter.
pub fn build_k(
    constraints: &ConstraintSet,
    basis: &OperatorBasis,
    record: &MeasurementRecord,
) -> Result<ConstraintMatrix> {
    ObservableTable::new(constraints, basis)?.assemble(record)
}

/// Part of the generator treated as known, given in basis coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    /// Known Hamiltonian coefficients `c_i`; the dissipative block is unknown.
    Hamiltonian(Vec<f64>),
    /// Known packed dissipative block; the Hamiltonian is unknown.
    Dissipation(Vec<f64>),
}

impl Prior {
    fn split(&self, basis: &OperatorBasis) -> Result<(Vec<(ParamId, f64)>, Vec<ParamId>)> {
        let ids = basis.param_ids();
        let nh = basis.num_hamiltonian();
        let (known_ids, unknown, values) = match self {
            Prior::Hamiltonian(v) => (&ids[..nh], ids[nh..].to_vec(), v),
            Prior::Dissipation(v) => (&ids[nh..], ids[..nh].to_vec(), v),
        };
        if values.len() != known_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: known_ids.len(),
                found: values.len(),
            });
        }
        Ok((
            known_ids
                .iter()
                .copied()
                .zip(values.iter().copied())
                .collect(),
            unknown,
        ))
    }

    /// Columns left unknown by this prior.
    pub fn unknown_columns(&self, basis: &OperatorBasis) -> Result<Vec<ParamId>> {
        Ok(self.split(basis)?.1)
    }
}

/// Per-constraint observable `B_n = Σ_known c_m O_{n,m}`; the right-hand side
/// is `b_n = -⟨B_n⟩` (for a known Hamiltonian, `b_n = ⟨i[A_n, H]⟩`).
pub fn prior_observables(
    constraints: &ConstraintSet,
    basis: &OperatorBasis,
    prior: &Prior,
) -> Result<Vec<LocalOperator>> {
    let (known, _) = prior.split(basis)?;
    constraints
        .strings()
        .par_iter()
        .map(|p| {
            let a = LocalOperator::from_pauli(*p);
            let mut acc = LocalOperator::zero(basis.n_sites());
            for &(id, c) in &known {
                if c != 0.0 {
                    acc =
                        acc.add(&column_observable(basis, &a, id)?.scaled(Complex64::new(c, 0.0)))?;
                }
            }
            Ok(acc)
        })
        .collect()
}

/// `(K_l, b)` for the inhomogeneous system `K_l c_l = b`.
pub fn build_prior_system(
    constraints: &ConstraintSet,
    basis: &OperatorBasis,
    record: &MeasurementRecord,
    prior: &Prior,
) -> Result<(ConstraintMatrix, Vec<f64>)> {
    let unknown = prior.unknown_columns(basis)?;
    let k = ObservableTable::for_columns(constraints, basis, unknown)?.assemble(record)?;
    let b = prior_observables(constraints, basis, prior)?
        .iter()
        .map(|o| record.value(o).map(|v| -v))
        .collect::<Result<Vec<_>>>()?;
    Ok((k, b))
}

/// Real constraint matrix with labelled rows and columns.
#[derive(Clone, Debug)]
pub struct ConstraintMatrix {
    pub data: Mat<f64>,
    pub row_labels: Vec<PauliString>,
    pub col_labels: Vec<ParamId>,
}

impl ConstraintMatrix {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    /// The first `n` rows.
    pub fn top_rows(&self, n: usize) -> Self {
        let n = n.min(self.nrows());
        ConstraintMatrix {
            data: self.data.subrows(0, n).to_owned(),
            row_labels: self.row_labels[..n].to_vec(),
            col_labels: self.col_labels.clone(),
        }
    }

    /// `K v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.ncols(),
                found: v.len(),
            });
        }
        Ok((0..self.nrows())
            .map(|i| (0..self.ncols()).map(|j| self.data[(i, j)] * v[j]).sum())
            .collect())
    }

    /// CSV with a header of column labels and one labelled row per constraint.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["constraint".to_string()];
        header.extend(self.col_labels.iter().map(ToString::to_string));
        out.write_record(&header)?;
        for i in 0..self.nrows() {
            let mut rec = vec![self.row_labels[i].to_string()];
            rec.extend((0..self.ncols()).map(|j| format!("{:.16e}", self.data[(i, j)])));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Row-major little-endian `f64` block preceded by `(rows, cols)` as u64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.nrows() as u64).to_le_bytes())?;
        w.write_all(&(self.ncols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.nrows() * self.ncols());
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                buf.extend_from_slice(&self.data[(i, j)].to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }
}
