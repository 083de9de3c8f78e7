//! Lindbladians expanded in a fixed operator basis.
//!
//! The generator is
//! `ρ̇ = -i Σ_i c_i [h_i, ρ] + Σ_{r,s} c_rs (l_r ρ l_s† - ½{l_s† l_r, ρ})`
//! with real `c_i` and a Hermitian dissipation matrix `c_rs` that is only
//! nonzero on the basis' allowed pairs.
//!
//! Packed parameter vectors are laid out as
//! `[c_i…, c_rr…, Re c_rs (r>s)…, Im c_rs (r>s)…]`.

use std::collections::BTreeMap;
use std::path::Path;

use faer::{Mat, Side};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pauli::{DensityMatrix, LocalOperator, PauliLetter, PauliString, PRUNE_TOL};

/// Dense superoperators are refused above this chain length unless asked for.
pub const DEFAULT_MAX_DENSE_SITES: usize = 6;

const HERMITIAN_DIAG_TOL: f64 = 1e-12;

/// Identity of one entry of the packed parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamId {
    Hamiltonian(usize),
    Diagonal(usize),
    Real(usize, usize),
    Imag(usize, usize),
}

impl ParamId {
    pub fn is_hamiltonian(&self) -> bool {
        matches!(self, ParamId::Hamiltonian(_))
    }
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::Hamiltonian(i) => write!(f, "h{i}"),
            ParamId::Diagonal(r) => write!(f, "d{r}"),
            ParamId::Real(r, s) => write!(f, "re{r}_{s}"),
            ParamId::Imag(r, s) => write!(f, "im{r}_{s}"),
        }
    }
}

/// Hamiltonian terms, jump operators and the jump pairs allowed to carry
/// dissipation coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorBasis {
    n_sites: usize,
    hamiltonian: Vec<LocalOperator>,
    jumps: Vec<LocalOperator>,
    pairs: Vec<(usize, usize)>,
    diagonal: Vec<usize>,
    off_diagonal: Vec<(usize, usize)>,
}

impl OperatorBasis {
    /// `pairs` lists canonical pairs `(r, s)` with `r >= s`. Every jump index
    /// appearing in an off-diagonal pair must also have its diagonal pair.
    pub fn new(
        n_sites: usize,
        hamiltonian: Vec<LocalOperator>,
        jumps: Vec<LocalOperator>,
        pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        for (i, h) in hamiltonian.iter().enumerate() {
            if h.n_sites() != n_sites {
                return Err(Error::DimensionMismatch {
                    expected: n_sites,
                    found: h.n_sites(),
                });
            }
            if !h.is_hermitian(0.0) {
                return Err(Error::InvalidArgument(format!(
                    "Hamiltonian term {i} is not Hermitian"
                )));
            }
        }
        if let Some(l) = jumps.iter().find(|l| l.n_sites() != n_sites) {
            return Err(Error::DimensionMismatch {
                expected: n_sites,
                found: l.n_sites(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut diagonal = Vec::new();
        let mut off_diagonal = Vec::new();
        for &(r, s) in &pairs {
            if r < s || r >= jumps.len() {
                return Err(Error::InvalidArgument(format!(
                    "pair ({r}, {s}) is not canonical"
                )));
            }
            if !seen.insert((r, s)) {
                return Err(Error::InvalidArgument(format!(
                    "pair ({r}, {s}) listed twice"
                )));
            }
            if r == s {
                diagonal.push(r);
            } else {
                off_diagonal.push((r, s));
            }
        }
        for &(r, s) in &off_diagonal {
            if !seen.contains(&(r, r)) || !seen.contains(&(s, s)) {
                return Err(Error::InvalidArgument(format!(
                    "pair ({r}, {s}) lacks its diagonal pairs"
                )));
            }
        }
        Ok(OperatorBasis {
            n_sites,
            hamiltonian,
            jumps,
            pairs,
            diagonal,
            off_diagonal,
        })
    }

    /// On-site `X, Y, Z` per site followed by all nine nearest-neighbour
    /// products per bond (open chain).
    pub fn nn_hamiltonian_terms(n_sites: usize) -> Vec<LocalOperator> {
        let mut h = Vec::with_capacity(3 * n_sites + 9 * n_sites.saturating_sub(1));
        for j in 0..n_sites {
            for a in PauliLetter::NON_IDENTITY {
                h.push(LocalOperator::from_pauli(PauliString::single(
                    n_sites, j, a,
                )));
            }
        }
        for j in 0..n_sites.saturating_sub(1) {
            for a in PauliLetter::NON_IDENTITY {
                for b in PauliLetter::NON_IDENTITY {
                    let p = PauliString::local(n_sites, j, &[a, b]).expect("bond inside chain");
                    h.push(LocalOperator::from_pauli(p));
                }
            }
        }
        h
    }

    fn onsite_jumps(n_sites: usize) -> (Vec<LocalOperator>, Vec<Vec<usize>>) {
        let mut jumps = Vec::new();
        let mut groups = Vec::new();
        for j in 0..n_sites {
            let mut g = Vec::new();
            for a in PauliLetter::NON_IDENTITY {
                g.push(jumps.len());
                jumps.push(LocalOperator::from_pauli(PauliString::single(
                    n_sites, j, a,
                )));
            }
            groups.push(g);
        }
        (jumps, groups)
    }

    /// Diagonal pairs first, then `(a, b)` with `a > b` in group order.
    fn group_pairs(groups: &[Vec<usize>]) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for g in groups {
            for &r in g {
                pairs.push((r, r));
            }
            for a in 1..g.len() {
                for b in 0..a {
                    pairs.push((g[a], g[b]));
                }
            }
        }
        pairs
    }

    /// Nearest-neighbour Hamiltonian terms and on-site Pauli jumps that may
    /// only pair within a site.
    pub fn nearest_neighbor(n_sites: usize) -> Result<Self> {
        check_sites(n_sites, 1)?;
        let (jumps, groups) = Self::onsite_jumps(n_sites);
        let pairs = Self::group_pairs(&groups);
        Self::new(n_sites, Self::nn_hamiltonian_terms(n_sites), jumps, pairs)
    }

    /// Like [`OperatorBasis::nearest_neighbor`] with the extra jumps
    /// `X_j X_{j+1}` and `Y_j Y_{j+1}`; pairs run over the set
    /// `{X_j, Y_j, Z_j, X_j X_{j+1}, Y_j Y_{j+1}}` of each site.
    pub fn nearest_neighbor_pair_jumps(n_sites: usize) -> Result<Self> {
        check_sites(n_sites, 2)?;
        let mut jumps = Vec::new();
        let mut groups = Vec::new();
        for j in 0..n_sites {
            let mut g = Vec::new();
            for a in PauliLetter::NON_IDENTITY {
                g.push(jumps.len());
                jumps.push(LocalOperator::from_pauli(PauliString::single(
                    n_sites, j, a,
                )));
            }
            if j + 1 < n_sites {
                for a in [PauliLetter::X, PauliLetter::Y] {
                    g.push(jumps.len());
                    jumps.push(LocalOperator::from_pauli(PauliString::local(
                        n_sites,
                        j,
                        &[a, a],
                    )?));
                }
            }
            groups.push(g);
        }
        let pairs = Self::group_pairs(&groups);
        Self::new(n_sites, Self::nn_hamiltonian_terms(n_sites), jumps, pairs)
    }

    /// `X_j` per site then `X_j X_{j+1}` per bond, with on-site Pauli jumps.
    pub fn classical_ising(n_sites: usize) -> Result<Self> {
        check_sites(n_sites, 2)?;
        let mut h = Vec::new();
        for j in 0..n_sites {
            h.push(LocalOperator::from_pauli(PauliString::single(
                n_sites,
                j,
                PauliLetter::X,
            )));
        }
        for j in 0..n_sites - 1 {
            let p = PauliString::local(n_sites, j, &[PauliLetter::X, PauliLetter::X])?;
            h.push(LocalOperator::from_pauli(p));
        }
        let (jumps, groups) = Self::onsite_jumps(n_sites);
        let pairs = Self::group_pairs(&groups);
        Self::new(n_sites, h, jumps, pairs)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn hamiltonian_ops(&self) -> &[LocalOperator] {
        &self.hamiltonian
    }

    pub fn jump_ops(&self) -> &[LocalOperator] {
        &self.jumps
    }

    pub fn allowed_pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn diagonal_pairs(&self) -> &[usize] {
        &self.diagonal
    }

    pub fn off_diagonal_pairs(&self) -> &[(usize, usize)] {
        &self.off_diagonal
    }

    pub fn num_hamiltonian(&self) -> usize {
        self.hamiltonian.len()
    }

    pub fn num_dissipative(&self) -> usize {
        self.diagonal.len() + 2 * self.off_diagonal.len()
    }

    /// Parameter count `M`.
    pub fn num_params(&self) -> usize {
        self.num_hamiltonian() + self.num_dissipative()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(self.num_params());
        ids.extend((0..self.hamiltonian.len()).map(ParamId::Hamiltonian));
        ids.extend(self.diagonal.iter().map(|&r| ParamId::Diagonal(r)));
        ids.extend(self.off_diagonal.iter().map(|&(r, s)| ParamId::Real(r, s)));
        ids.extend(self.off_diagonal.iter().map(|&(r, s)| ParamId::Imag(r, s)));
        ids
    }

    /// Site-ordered support mask of the operators behind a parameter.
    pub fn param_support(&self, id: ParamId) -> u64 {
        match id {
            ParamId::Hamiltonian(i) => self.hamiltonian[i].support_sites_mask(),
            ParamId::Diagonal(r) => self.jumps[r].support_sites_mask(),
            ParamId::Real(r, s) | ParamId::Imag(r, s) => {
                self.jumps[r].support_sites_mask() | self.jumps[s].support_sites_mask()
            }
        }
    }
}

fn check_sites(n_sites: usize, min: usize) -> Result<()> {
    if n_sites < min || n_sites > crate::pauli::MAX_SITES {
        return Err(Error::InvalidArgument(format!(
            "chain length {n_sites} outside {min}..={}",
            crate::pauli::MAX_SITES
        )));
    }
    Ok(())
}

/// A Lindbladian: basis plus Hamiltonian and dissipation coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct LindbladModel {
    basis: OperatorBasis,
    c_h: Vec<f64>,
    /// `c_rs` for each allowed pair, aligned with `basis.allowed_pairs()`.
    c_d: Vec<Complex64>,
}

impl LindbladModel {
    /// Rejects non-real diagonal dissipation coefficients.
    pub fn new(basis: OperatorBasis, c_h: Vec<f64>, c_d: Vec<Complex64>) -> Result<Self> {
        if c_h.len() != basis.num_hamiltonian() {
            return Err(Error::DimensionMismatch {
                expected: basis.num_hamiltonian(),
                found: c_h.len(),
            });
        }
        if c_d.len() != basis.pairs.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.pairs.len(),
                found: c_d.len(),
            });
        }
        for (&(r, s), c) in basis.pairs.iter().zip(&c_d) {
            if r == s && c.im.abs() > HERMITIAN_DIAG_TOL * (1.0 + c.re.abs()) {
                return Err(Error::NonHermitianDissipation(format!("c_{r}{r} = {c}")));
            }
        }
        Ok(LindbladModel { basis, c_h, c_d })
    }

    pub fn zero(basis: OperatorBasis) -> Self {
        let (h, d) = (basis.num_hamiltonian(), basis.pairs.len());
        LindbladModel {
            basis,
            c_h: vec![0.0; h],
            c_d: vec![Complex64::default(); d],
        }
    }

    /// Build `c_rs = Σ_j d^{(j)}_r conj(d^{(j)}_s)` from sparse amplitude
    /// vectors, one per physical jump operator.
    pub fn from_jump_amplitudes(
        basis: OperatorBasis,
        c_h: Vec<f64>,
        amplitudes: &[Vec<(usize, Complex64)>],
    ) -> Result<Self> {
        let index: BTreeMap<(usize, usize), usize> = basis
            .pairs
            .iter()
            .enumerate()
            .map(|(k, &p)| (p, k))
            .collect();
        let mut c_d = vec![Complex64::default(); basis.pairs.len()];
        for amps in amplitudes {
            for &(r, dr) in amps {
                for &(s, ds) in amps {
                    if r < s {
                        continue;
                    }
                    let v = dr * ds.conj();
                    match index.get(&(r, s)) {
                        Some(&k) => c_d[k] += v,
                        None if v.norm() == 0.0 => {}
                        None => {
                            return Err(Error::InvalidArgument(format!(
                                "jump amplitudes couple ({r}, {s}) outside the allowed pairs"
                            )))
                        }
                    }
                }
            }
        }
        for ((r, s), c) in basis.pairs.iter().zip(c_d.iter_mut()) {
            if r == s {
                c.im = 0.0;
            }
        }
        Self::new(basis, c_h, c_d)
    }

    pub fn basis(&self) -> &OperatorBasis {
        &self.basis
    }

    pub fn n_sites(&self) -> usize {
        self.basis.n_sites
    }

    pub fn c_h(&self) -> &[f64] {
        &self.c_h
    }

    /// Coefficients aligned with [`OperatorBasis::allowed_pairs`].
    pub fn c_d(&self) -> &[Complex64] {
        &self.c_d
    }

    /// `c_rs` for any ordered pair (zero outside the allowed pairs).
    pub fn dissipation(&self, r: usize, s: usize) -> Complex64 {
        let (a, b, conj) = if r >= s { (r, s, false) } else { (s, r, true) };
        match self.basis.pairs.iter().position(|&p| p == (a, b)) {
            Some(k) if conj => self.c_d[k].conj(),
            Some(k) => self.c_d[k],
            None => Complex64::default(),
        }
    }

    /// Full Hermitian `J × J` dissipation matrix.
    pub fn dissipation_matrix(&self) -> Mat<Complex64> {
        let j = self.basis.jumps.len();
        let mut m = Mat::<Complex64>::zeros(j, j);
        for (&(r, s), &c) in self.basis.pairs.iter().zip(&self.c_d) {
            m[(r, s)] = c;
            m[(s, r)] = c.conj();
        }
        m
    }

    /// Smallest eigenvalue of the dissipation matrix (PSD diagnostic).
    pub fn min_dissipation_eigenvalue(&self) -> Result<f64> {
        if self.basis.jumps.is_empty() {
            return Ok(0.0);
        }
        let ev = self
            .dissipation_matrix()
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        Ok(ev[0])
    }

    /// `Σ_i c_i h_i`.
    pub fn hamiltonian(&self) -> LocalOperator {
        let mut h = LocalOperator::zero(self.n_sites());
        for (op, &c) in self.basis.hamiltonian.iter().zip(&self.c_h) {
            for (p, v) in op.terms() {
                h.add_term(*p, v * c);
            }
        }
        h
    }

    pub fn pack(&self) -> Vec<f64> {
        let b = &self.basis;
        let mut v = Vec::with_capacity(b.num_params());
        v.extend_from_slice(&self.c_h);
        let lookup: BTreeMap<(usize, usize), Complex64> = b
            .pairs
            .iter()
            .copied()
            .zip(self.c_d.iter().copied())
            .collect();
        v.extend(b.diagonal.iter().map(|&r| lookup[&(r, r)].re));
        v.extend(b.off_diagonal.iter().map(|p| lookup[p].re));
        v.extend(b.off_diagonal.iter().map(|p| lookup[p].im));
        v
    }

    /// Inverse of [`LindbladModel::pack`]; positivity of `c_rs` is not enforced.
    pub fn unpack(basis: &OperatorBasis, values: &[f64]) -> Result<Self> {
        if values.len() != basis.num_params() {
            return Err(Error::DimensionMismatch {
                expected: basis.num_params(),
                found: values.len(),
            });
        }
        let nh = basis.num_hamiltonian();
        let nd = basis.diagonal.len();
        let no = basis.off_diagonal.len();
        let mut lookup = BTreeMap::new();
        for (k, &r) in basis.diagonal.iter().enumerate() {
            lookup.insert((r, r), Complex64::new(values[nh + k], 0.0));
        }
        for (k, &p) in basis.off_diagonal.iter().enumerate() {
            lookup.insert(
                p,
                Complex64::new(values[nh + nd + k], values[nh + nd + no + k]),
            );
        }
        let c_d = basis.pairs.iter().map(|p| lookup[p]).collect();
        Ok(LindbladModel {
            basis: basis.clone(),
            c_h: values[..nh].to_vec(),
            c_d,
        })
    }

    /// Compile the generator into a sum of Pauli sandwiches.
    pub fn generator(&self) -> Generator {
        let n = self.n_sites();
        let mut acc: BTreeMap<(PauliString, PauliString), Complex64> = BTreeMap::new();
        let id = PauliString::identity(n);
        let mut push = |l: PauliString, r: PauliString, c: Complex64| {
            *acc.entry((l, r)).or_default() += c;
        };
        let minus_i = Complex64::new(0.0, -1.0);
        for (op, &c) in self.basis.hamiltonian.iter().zip(&self.c_h) {
            if c == 0.0 {
                continue;
            }
            for (p, h) in op.terms() {
                push(*p, id, minus_i * h * c);
                push(id, *p, -minus_i * h * c);
            }
        }
        for (&(r, s), &c) in self.basis.pairs.iter().zip(&self.c_d) {
            if c.norm() == 0.0 {
                continue;
            }
            let mut ordered = vec![(r, s, c)];
            if r != s {
                ordered.push((s, r, c.conj()));
            }
            for (a, b, crs) in ordered {
                // c_ab (l_a ρ l_b† - ½ l_b† l_a ρ - ½ ρ l_b† l_a)
                for (p, lp) in self.basis.jumps[a].terms() {
                    for (q, lq) in self.basis.jumps[b].terms() {
                        let w = crs * lp * lq.conj();
                        push(*p, *q, w);
                        let (ph, qp) = q.mul_unchecked(p);
                        let half = ph.apply(w) * -0.5;
                        push(qp, id, half);
                        push(id, qp, half);
                    }
                }
            }
        }
        let terms = acc
            .into_iter()
            .filter(|(_, c)| c.norm() >= PRUNE_TOL)
            .map(|((left, right), coeff)| SandwichTerm { left, right, coeff })
            .collect();
        Generator { n_sites: n, terms }
    }

    /// `ρ̇` for a dense state.
    pub fn apply(&self, rho: &DensityMatrix) -> Result<Mat<Complex64>> {
        if rho.n_sites() != self.n_sites() {
            return Err(Error::DimensionMismatch {
                expected: self.n_sites(),
                found: rho.n_sites(),
            });
        }
        Ok(self.generator().apply(rho.matrix()))
    }

    /// Dense superoperator acting on column-stacked `vec(ρ)`.
    pub fn superoperator(&self) -> Result<Mat<Complex64>> {
        self.generator().superoperator(DEFAULT_MAX_DENSE_SITES)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            n_sites: self.n_sites(),
            hamiltonian: self
                .basis
                .hamiltonian
                .iter()
                .map(OperatorDescriptor::from_operator)
                .collect(),
            jumps: self
                .basis
                .jumps
                .iter()
                .map(OperatorDescriptor::from_operator)
                .collect(),
            c_h: self.c_h.clone(),
            c_d: self
                .basis
                .pairs
                .iter()
                .zip(&self.c_d)
                .map(|(&(r, s), c)| (r, s, c.re, c.im))
                .collect(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let n = file.n_sites;
        check_sites(n, 1)?;
        let h = file
            .hamiltonian
            .iter()
            .map(|d| d.to_operator(n))
            .collect::<Result<Vec<_>>>()?;
        let l = file
            .jumps
            .iter()
            .map(|d| d.to_operator(n))
            .collect::<Result<Vec<_>>>()?;
        let pairs = file.c_d.iter().map(|&(r, s, _, _)| (r, s)).collect();
        let basis = OperatorBasis::new(n, h, l, pairs)?;
        let c_d = file
            .c_d
            .iter()
            .map(|&(_, _, re, im)| Complex64::new(re, im))
            .collect();
        Self::new(basis, file.c_h.clone(), c_d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk model layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub n_sites: usize,
    pub hamiltonian: Vec<OperatorDescriptor>,
    pub jumps: Vec<OperatorDescriptor>,
    pub c_h: Vec<f64>,
    /// `(r, s, re, im)` for each allowed pair.
    pub c_d: Vec<(usize, usize, f64, f64)>,
}

/// Operator restricted to consecutive sites starting at `offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    pub offset: usize,
    pub terms: Vec<TermDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermDescriptor {
    pub letters: String,
    pub re: f64,
    pub im: f64,
}

impl OperatorDescriptor {
    pub fn from_operator(op: &LocalOperator) -> Self {
        let (a, b) = op.support_range().unwrap_or((0, 0));
        let terms = op
            .terms()
            .map(|(p, c)| TermDescriptor {
                letters: (a..=b).map(|s| p.letter(s).as_char()).collect(),
                re: c.re,
                im: c.im,
            })
            .collect();
        OperatorDescriptor { offset: a, terms }
    }

    pub fn to_operator(&self, n_sites: usize) -> Result<LocalOperator> {
        let mut op = LocalOperator::zero(n_sites);
        for t in &self.terms {
            let letters = t
                .letters
                .chars()
                .map(PauliLetter::from_char)
                .collect::<Result<Vec<_>>>()?;
            op.add_term(
                PauliString::local(n_sites, self.offset, &letters)?,
                Complex64::new(t.re, t.im),
            );
        }
        Ok(op)
    }
}

/// `coeff · left · ρ · right`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SandwichTerm {
    pub left: PauliString,
    pub right: PauliString,
    pub coeff: Complex64,
}

/// A Lindbladian compiled to a sum of Pauli sandwiches.
#[derive(Clone, Debug)]
pub struct Generator {
    n_sites: usize,
    terms: Vec<SandwichTerm>,
}

impl Generator {
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn terms(&self) -> &[SandwichTerm] {
        &self.terms
    }

    /// `Σ coeff · L ρ R` on a dense matrix.
    pub fn apply(&self, rho: &Mat<Complex64>) -> Mat<Complex64> {
        let d = 1usize << self.n_sites;
        let mut out = Mat::<Complex64>::zeros(d, d);
        for t in &self.terms {
            let (xl, xr) = (t.left.x_mask() as usize, t.right.x_mask() as usize);
            for b in 0..d {
                let phr = t.right.column_phase(b);
                let bb = b ^ xr;
                for a in 0..d {
                    let aa = a ^ xl;
                    let ph = t.left.column_phase(aa) * phr;
                    out[(a, b)] += ph.apply(t.coeff * rho[(aa, bb)]);
                }
            }
        }
        out
    }

    /// Dense `4^n × 4^n` matrix on column-stacked vectors (`vec` index `i + j·d`).
    pub fn superoperator(&self, max_sites: usize) -> Result<Mat<Complex64>> {
        if self.n_sites > max_sites {
            return Err(Error::SizeBudget {
                n_sites: self.n_sites,
                max_sites,
            });
        }
        let d = 1usize << self.n_sites;
        let mut s = Mat::<Complex64>::zeros(d * d, d * d);
        for t in &self.terms {
            let (xl, xr) = (t.left.x_mask() as usize, t.right.x_mask() as usize);
            for b in 0..d {
                let phr = t.right.column_phase(b);
                for a in 0..d {
                    let aa = a ^ xl;
                    let ph = t.left.column_phase(aa) * phr;
                    s[(a + b * d, aa + (b ^ xr) * d)] += ph.apply(t.coeff);
                }
            }
        }
        Ok(s)
    }

    /// Heisenberg-picture dual: the operator `O` with `Tr(A L(ρ)) = Tr(O ρ)`.
    pub fn dual(&self, a: &LocalOperator) -> Result<LocalOperator> {
        if a.n_sites() != self.n_sites {
            return Err(Error::DimensionMismatch {
                expected: self.n_sites,
                found: a.n_sites(),
            });
        }
        let mut out = LocalOperator::zero(self.n_sites);
        for (p, c) in a.terms() {
            for t in &self.terms {
                let (ph1, rp) = t.right.mul_unchecked(p);
                let (ph2, q) = rp.mul_unchecked(&t.left);
                out.add_term(q, (ph1 * ph2).apply(t.coeff * c));
            }
        }
        Ok(out)
    }

    /// Row `P` of the real Pauli-transfer matrix `T` (`ṙ = T r`, `r_P = Tr(P ρ)`),
    /// as `(column, value)` sorted by column.
    pub fn transfer_row(&self, p: &PauliString) -> Vec<(usize, f64)> {
        let mut entries: Vec<(usize, Complex64)> = self
            .terms
            .iter()
            .map(|t| {
                let (ph1, rp) = t.right.mul_unchecked(p);
                let (ph2, q) = rp.mul_unchecked(&t.left);
                (q.index(), (ph1 * ph2).apply(t.coeff))
            })
            .collect();
        entries.sort_by_key(|e| e.0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        let mut k = 0;
        while k < entries.len() {
            let col = entries[k].0;
            let mut sum = Complex64::default();
            while k < entries.len() && entries[k].0 == col {
                sum += entries[k].1;
                k += 1;
            }
            // real up to rounding because the generator preserves Hermiticity
            if sum.re.abs() >= PRUNE_TOL {
                row.push((col, sum.re));
            }
        }
        row
    }

    /// Sparse transfer matrix in CSR form.
    pub fn transfer_matrix(&self) -> crate::linalg::CsrMatrix {
        let dim = 1usize << (2 * self.n_sites);
        let rows: Vec<Vec<(usize, f64)>> = {
            use rayon::prelude::*;
            (0..dim)
                .into_par_iter()
                .map(|i| self.transfer_row(&PauliString::from_index(self.n_sites, i)))
                .collect()
        };
        crate::linalg::CsrMatrix::from_rows(dim, &rows)
    }
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std)
        .map_err(|e| Error::InvalidArgument(format!("bad standard deviation {std}: {e}")))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn complex_amplitudes(
    rng: &mut ChaCha8Rng,
    dist: &Normal<f64>,
    ops: &[usize],
) -> Vec<(usize, Complex64)> {
    ops.iter()
        .map(|&r| {
            let re = dist.sample(rng);
            let im = dist.sample(rng);
            (r, Complex64::new(re, im))
        })
        .collect()
}

/// Jump indices per site group, in the order produced by the basis builders.
fn site_groups(basis: &OperatorBasis) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last = usize::MAX;
    for &r in basis.diagonal_pairs() {
        let site = basis.jumps[r].support_range().map_or(0, |(a, _)| a);
        if site != last {
            groups.push(Vec::new());
            last = site;
        }
        groups.last_mut().expect("group pushed").push(r);
    }
    groups
}

/// Random nearest-neighbour Hamiltonian with `N(0, 1)` coefficients and one
/// on-site jump per site whose Pauli amplitudes have `N(0, α_D²)` real and
/// imaginary parts.
pub fn random_nn_model(n_sites: usize, alpha_d: f64, seed: u64) -> Result<LindbladModel> {
    check_sites(n_sites, 2)?;
    random_with_basis(OperatorBasis::nearest_neighbor(n_sites)?, alpha_d, seed)
}

/// As [`random_nn_model`] with `X_j X_{j+1}` and `Y_j Y_{j+1}` added to each
/// site's jump operator.
pub fn random_nn_jump_model(n_sites: usize, alpha_d: f64, seed: u64) -> Result<LindbladModel> {
    check_sites(n_sites, 2)?;
    random_with_basis(
        OperatorBasis::nearest_neighbor_pair_jumps(n_sites)?,
        alpha_d,
        seed,
    )
}

fn random_with_basis(basis: OperatorBasis, alpha_d: f64, seed: u64) -> Result<LindbladModel> {
    if !(alpha_d >= 0.0 && alpha_d.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "α_D = {alpha_d} must be non-negative"
        )));
    }
    let dist = normal(alpha_d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_h = gaussian_vec(&mut rng, basis.num_hamiltonian());
    let amps: Vec<_> = site_groups(&basis)
        .iter()
        .map(|g| complex_amplitudes(&mut rng, &dist, g))
        .collect();
    LindbladModel::from_jump_amplitudes(basis, c_h, &amps)
}

/// Random nearest-neighbour Hamiltonian plus loss `α_L σ⁻_j` and dephasing
/// `(1 - α_L) Z_j` on every site.
pub fn loss_dephasing_model(n_sites: usize, alpha_l: f64, seed: u64) -> Result<LindbladModel> {
    check_sites(n_sites, 2)?;
    if !(0.0..=1.0).contains(&alpha_l) {
        return Err(Error::InvalidArgument(format!(
            "α_L = {alpha_l} outside [0, 1]"
        )));
    }
    let basis = OperatorBasis::nearest_neighbor(n_sites)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_h = gaussian_vec(&mut rng, basis.num_hamiltonian());
    let mut amps = Vec::new();
    for j in 0..n_sites {
        let (x, y, z) = (3 * j, 3 * j + 1, 3 * j + 2);
        // σ⁻ = (X - iY)/2
        amps.push(vec![
            (x, Complex64::new(alpha_l / 2.0, 0.0)),
            (y, Complex64::new(0.0, -alpha_l / 2.0)),
        ]);
        amps.push(vec![(z, Complex64::new(1.0 - alpha_l, 0.0))]);
    }
    LindbladModel::from_jump_amplitudes(basis, c_h, &amps)
}

/// Random field and coupling in the X basis, `Σ b_j X_j + Σ J_j X_j X_{j+1}`,
/// with loss `2σ⁻_j` on every site.
pub fn classical_ising_loss_model(n_sites: usize, seed: u64) -> Result<LindbladModel> {
    let basis = OperatorBasis::classical_ising(n_sites)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_h = gaussian_vec(&mut rng, basis.num_hamiltonian());
    ising_with_coefficients(basis, c_h)
}

/// Classical Ising model with given `[b…, J…]` and loss `2σ⁻_j`.
pub fn classical_ising_loss_with(
    n_sites: usize,
    fields: &[f64],
    couplings: &[f64],
) -> Result<LindbladModel> {
    let basis = OperatorBasis::classical_ising(n_sites)?;
    if fields.len() != n_sites || couplings.len() + 1 != n_sites {
        return Err(Error::DimensionMismatch {
            expected: 2 * n_sites - 1,
            found: fields.len() + couplings.len(),
        });
    }
    ising_with_coefficients(basis, fields.iter().chain(couplings).copied().collect())
}

fn ising_with_coefficients(basis: OperatorBasis, c_h: Vec<f64>) -> Result<LindbladModel> {
    let n = basis.n_sites();
    // 2σ⁻ = X - iY
    let amps: Vec<_> = (0..n)
        .map(|j| {
            vec![
                (3 * j, Complex64::new(1.0, 0.0)),
                (3 * j + 1, Complex64::new(0.0, -1.0)),
            ]
        })
        .collect();
    LindbladModel::from_jump_amplitudes(basis, c_h, &amps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn max_abs(m: &Mat<Complex64>) -> f64 {
        let mut v = 0.0f64;
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                v = v.max(m[(i, j)].norm());
            }
        }
        v
    }

    fn kron(a: &Mat<Complex64>, b: &Mat<Complex64>) -> Mat<Complex64> {
        let (ra, ca, rb, cb) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
        Mat::from_fn(ra * rb, ca * cb, |i, j| {
            a[(i / rb, j / cb)] * b[(i % rb, j % cb)]
        })
    }

    /// Direct dense evaluation of the master equation.
    fn oracle_apply(model: &LindbladModel, rho: &Mat<Complex64>) -> Mat<Complex64> {
        let h = model.hamiltonian().dense();
        let i = c(0.0, 1.0);
        let mut out = (&h * rho - rho * &h) * faer::Scale(-i);
        let ls: Vec<_> = model.basis().jump_ops().iter().map(|l| l.dense()).collect();
        for r in 0..ls.len() {
            for s in 0..ls.len() {
                let crs = model.dissipation(r, s);
                if crs.norm() == 0.0 {
                    continue;
                }
                let lsd = ls[s].adjoint().to_owned();
                let prod = &lsd * &ls[r];
                let term =
                    &(&ls[r] * rho) * &lsd - (&prod * rho + rho * &prod) * faer::Scale(c(0.5, 0.0));
                out += term * faer::Scale(crs);
            }
        }
        out
    }

    fn vec_col(m: &Mat<Complex64>) -> Mat<Complex64> {
        let d = m.nrows();
        Mat::from_fn(d * d, 1, |k, _| m[(k % d, k / d)])
    }

    #[test]
    fn nn_parameter_count_at_six_sites() {
        let m = random_nn_model(6, 1.0 / 2f64.sqrt(), 1).unwrap();
        assert_eq!(m.basis().num_hamiltonian(), 63);
        assert_eq!(m.basis().num_dissipative(), 54);
        assert_eq!(m.basis().num_params(), 117);
    }

    #[test]
    fn zero_dissipation_strength_gives_zero_c_d() {
        let m = random_nn_model(4, 0.0, 3).unwrap();
        assert!(m.c_d().iter().all(|c| c.norm() == 0.0));
        let m = random_nn_jump_model(3, 0.0, 3).unwrap();
        assert!(m.c_d().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn generated_dissipation_is_psd() {
        for seed in 0..20 {
            assert!(
                random_nn_model(4, 0.7, seed)
                    .unwrap()
                    .min_dissipation_eigenvalue()
                    .unwrap()
                    >= -1e-12
            );
            assert!(
                random_nn_jump_model(4, 0.7, seed)
                    .unwrap()
                    .min_dissipation_eigenvalue()
                    .unwrap()
                    >= -1e-12
            );
            let ld = loss_dephasing_model(3, 0.3, seed).unwrap();
            assert!(ld.min_dissipation_eigenvalue().unwrap() >= -1e-12);
        }
    }

    #[test]
    fn pair_jump_basis_counts() {
        let b = OperatorBasis::nearest_neighbor_pair_jumps(2).unwrap();
        assert_eq!(b.jump_ops().len(), 8);
        // group of five on site 0: 5 + 10 pairs, group of three on site 1: 3 + 3
        assert_eq!(b.diagonal_pairs().len(), 8);
        assert_eq!(b.off_diagonal_pairs().len(), 13);
    }

    #[test]
    fn ising_term_count() {
        let m = classical_ising_loss_model(6, 2).unwrap();
        assert_eq!(m.basis().num_hamiltonian(), 11);
    }

    #[test]
    fn pack_places_off_diagonal_parts() {
        let basis = OperatorBasis::nearest_neighbor(2).unwrap();
        let mut c_d = vec![c(0.0, 0.0); basis.allowed_pairs().len()];
        let k = basis
            .allowed_pairs()
            .iter()
            .position(|&p| p == (1, 0))
            .unwrap();
        c_d[k] = c(0.3, 0.4);
        let m = LindbladModel::new(basis.clone(), vec![0.0; 15], c_d).unwrap();
        let v = m.pack();
        let ids = basis.param_ids();
        let re = ids.iter().position(|&p| p == ParamId::Real(1, 0)).unwrap();
        let im = ids.iter().position(|&p| p == ParamId::Imag(1, 0)).unwrap();
        // 15 Hamiltonian terms, 6 diagonal, then 6 real and 6 imaginary parts
        assert_eq!((re, im), (21, 27));
        assert_eq!(v[re], 0.3);
        assert_eq!(v[im], 0.4);
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 2);
    }

    #[test]
    fn unpack_zero_vector_is_zero_model() {
        let basis = OperatorBasis::nearest_neighbor(3).unwrap();
        let m = LindbladModel::unpack(&basis, &vec![0.0; basis.num_params()]).unwrap();
        assert_eq!(m, LindbladModel::zero(basis.clone()));
        assert!(LindbladModel::unpack(&basis, &[1.0]).is_err());
    }

    #[test]
    fn non_hermitian_diagonal_rejected() {
        let basis = OperatorBasis::nearest_neighbor(2).unwrap();
        let mut c_d = vec![c(0.0, 0.0); basis.allowed_pairs().len()];
        c_d[0] = c(1.0, 0.5);
        assert!(matches!(
            LindbladModel::new(basis, vec![0.0; 15], c_d),
            Err(Error::NonHermitianDissipation(_))
        ));
    }

    #[test]
    fn apply_matches_dense_master_equation() {
        for (seed, model) in [
            (1, random_nn_model(3, 0.8, 1).unwrap()),
            (2, random_nn_jump_model(3, 0.8, 2).unwrap()),
            (3, loss_dephasing_model(3, 0.4, 3).unwrap()),
        ] {
            let rho = DensityMatrix::random(3, seed + 100);
            let got = model.apply(&rho).unwrap();
            let want = oracle_apply(&model, rho.matrix());
            assert!(max_abs(&(&got - &want)) < 1e-12);
        }
    }

    #[test]
    fn superoperator_matches_vectorized_apply() {
        let model = random_nn_model(3, 0.6, 9).unwrap();
        let s = model.superoperator().unwrap();
        for seed in 0..3 {
            let rho = DensityMatrix::random(3, seed);
            let lhs = &s * &vec_col(rho.matrix());
            let rhs = vec_col(&model.apply(&rho).unwrap());
            assert!(max_abs(&(&lhs - &rhs)) < 1e-12 * (1.0 + max_abs(&rhs)));
        }
    }

    #[test]
    fn superoperator_of_two_site_model_agrees_on_random_states() {
        let model = random_nn_jump_model(2, 0.9, 4).unwrap();
        let s = model.superoperator().unwrap();
        for seed in 0..10 {
            let rho = DensityMatrix::random(2, 50 + seed);
            let lhs = &s * &vec_col(rho.matrix());
            let rhs = vec_col(&oracle_apply(&model, rho.matrix()));
            assert!(max_abs(&(&lhs - &rhs)) < 1e-12);
        }
    }

    #[test]
    fn single_site_z_superoperator() {
        let basis = OperatorBasis::nearest_neighbor(1).unwrap();
        let m = LindbladModel::new(basis, vec![0.0, 0.0, 1.0], vec![c(0.0, 0.0); 6]).unwrap();
        let s = m.superoperator().unwrap();
        let z = PauliString::single(1, 0, PauliLetter::Z).dense();
        let id = Mat::<Complex64>::identity(2, 2);
        // column stacking: vec(Zρ) = (I⊗Z) vec ρ, vec(ρZ) = (Zᵀ⊗I) vec ρ
        let want =
            (kron(&id, &z) - kron(&z.transpose().to_owned(), &id)) * faer::Scale(c(0.0, -1.0));
        assert!(max_abs(&(&s - &want)) < 1e-15);
    }

    #[test]
    fn single_site_loss_kernel_is_spin_down() {
        // L = σ⁻ = (X - iY)/2 on one site
        let basis = OperatorBasis::nearest_neighbor(1).unwrap();
        let amps = vec![vec![(0, c(0.5, 0.0)), (1, c(0.0, -0.5))]];
        let m = LindbladModel::from_jump_amplitudes(basis, vec![0.0; 3], &amps).unwrap();
        let s = m.superoperator().unwrap();
        let eig = s.eigen().unwrap();
        let vals = eig.S();
        let k = (0..4)
            .min_by(|&a, &b| vals[a].norm().partial_cmp(&vals[b].norm()).unwrap())
            .unwrap();
        assert!(vals[k].norm() < 1e-12);
        let v = eig.U().col(k);
        let rho = Mat::from_fn(2, 2, |i, j| v[i + 2 * j]);
        let rho = DensityMatrix::hermitize_normalize(1, &rho).unwrap();
        assert!((rho.matrix()[(1, 1)] - c(1.0, 0.0)).norm() < 1e-12);
        assert!(max_abs(&m.apply(&DensityMatrix::all_down(1)).unwrap()) < 1e-15);
    }

    #[test]
    fn hamiltonian_eigenprojector_is_stationary() {
        let basis = OperatorBasis::nearest_neighbor(2).unwrap();
        let mut c_h = vec![0.0; 15];
        c_h[2] = 0.7; // Z_0
        c_h[14] = -1.3; // Z_0 Z_1
        let m = LindbladModel::new(basis, c_h, vec![c(0.0, 0.0); 12]).unwrap();
        for b in 0..4 {
            let out = m.apply(&DensityMatrix::basis_state(2, b)).unwrap();
            assert!(max_abs(&out) < 1e-15);
        }
    }

    #[test]
    fn hermitian_jumps_leave_fully_mixed_state_fixed() {
        let m = loss_dephasing_model(3, 0.0, 5).unwrap();
        let out = m.apply(&DensityMatrix::fully_mixed(3)).unwrap();
        assert!(max_abs(&out) < 1e-14);
        let m = loss_dephasing_model(3, 1.0, 5).unwrap();
        assert!(max_abs(&m.apply(&DensityMatrix::fully_mixed(3)).unwrap()) > 1e-3);
    }

    #[test]
    fn fully_mixed_residual_scales_quadratically_in_loss() {
        let norm = |a: f64| {
            let m = loss_dephasing_model(3, a, 8).unwrap();
            let out = m.apply(&DensityMatrix::fully_mixed(3)).unwrap();
            out.norm_l2()
        };
        let (n1, n2) = (norm(0.01), norm(0.02));
        assert!((n2 / n1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn transfer_matrix_matches_dual_and_apply() {
        let model = random_nn_jump_model(3, 0.7, 12).unwrap();
        let g = model.generator();
        let t = g.transfer_matrix();
        let rho = DensityMatrix::random(3, 1);
        let r = rho.pauli_vector();
        let rdot = t.matvec(&r);
        let direct = DensityMatrix::from_matrix_unchecked(3, g.apply(rho.matrix()))
            .unwrap()
            .pauli_vector();
        for (a, b) in rdot.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        // identity row vanishes (trace preservation)
        assert!(g.transfer_row(&PauliString::identity(3)).is_empty());
        let p: PauliString = "XZI".parse().unwrap();
        let dual = g.dual(&LocalOperator::from_pauli(p)).unwrap();
        for (col, v) in g.transfer_row(&p) {
            assert!((dual.coefficient(&PauliString::from_index(3, col)).re - v).abs() < 1e-14);
        }
    }

    #[test]
    fn superoperator_budget_guard() {
        let basis = OperatorBasis::nearest_neighbor(7).unwrap();
        let m = LindbladModel::zero(basis);
        assert!(matches!(m.superoperator(), Err(Error::SizeBudget { .. })));
    }

    #[test]
    fn json_round_trip_is_exact() {
        for m in [
            random_nn_model(3, 0.7, 1).unwrap(),
            random_nn_jump_model(3, 0.7, 1).unwrap(),
            classical_ising_loss_model(4, 1).unwrap(),
        ] {
            let back = LindbladModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn ensemble_statistics() {
        let mut all = Vec::new();
        let mut seed = 0;
        while all.len() < 10_000 {
            all.extend_from_slice(random_nn_model(2, 0.5, seed).unwrap().c_h());
            seed += 1;
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 5.0 / n.sqrt());
        // variance of the sample variance is 2/n for unit Gaussians
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n).sqrt());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn pack_unpack_round_trip(values in prop::collection::vec(-10.0f64..10.0, 33)) {
            let basis = OperatorBasis::nearest_neighbor(2).unwrap();
            let m = LindbladModel::unpack(&basis, &values).unwrap();
            prop_assert_eq!(m.pack(), values);
        }

    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn apply_preserves_trace_and_hermiticity(seed in 0u64..10_000) {
            let model = random_nn_model(3, 0.7, seed).unwrap();
            let rho = DensityMatrix::random(3, seed ^ 0xabc);
            let out = model.apply(&rho).unwrap();
            let tr: Complex64 = (0..8).map(|i| out[(i, i)]).sum();
            prop_assert!(tr.norm() < 1e-10);
            let adj = out.adjoint().to_owned();
            prop_assert!(max_abs(&(&out - &adj)) < 1e-10);
        }
    }
}
