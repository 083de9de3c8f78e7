//! Pauli-string algebra, local operators and dense density matrices.
//!
//! A [`PauliString`] stores its X and Z parts as bitmasks. Bit `n - 1 - i`
//! of each mask belongs to site `i`, so the masks line up with computational
//! basis indices where site 0 is the most significant bit. Strings are bare
//! tensor products of `I, X, Y, Z` (no `2^{-n/2}` normalization).
//!
//! Basis state `|0>` is spin up (`Z = +1`), so `σ⁻ = (X - iY)/2 = |1><0|`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use faer::{Mat, Side};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Coefficients with magnitude below this are dropped.
pub const PRUNE_TOL: f64 = 1e-14;

/// Largest supported chain length for bitmask-encoded strings.
pub const MAX_SITES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PauliLetter {
    I,
    X,
    Y,
    Z,
}

impl PauliLetter {
    pub const NON_IDENTITY: [PauliLetter; 3] = [PauliLetter::X, PauliLetter::Y, PauliLetter::Z];
    pub const ALL: [PauliLetter; 4] = [
        PauliLetter::I,
        PauliLetter::X,
        PauliLetter::Y,
        PauliLetter::Z,
    ];

    fn bits(self) -> (bool, bool) {
        match self {
            PauliLetter::I => (false, false),
            PauliLetter::X => (true, false),
            PauliLetter::Y => (true, true),
            PauliLetter::Z => (false, true),
        }
    }

    fn from_bits(x: bool, z: bool) -> Self {
        match (x, z) {
            (false, false) => PauliLetter::I,
            (true, false) => PauliLetter::X,
            (true, true) => PauliLetter::Y,
            (false, true) => PauliLetter::Z,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            PauliLetter::I => 'I',
            PauliLetter::X => 'X',
            PauliLetter::Y => 'Y',
            PauliLetter::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        match c {
            'I' => Ok(PauliLetter::I),
            'X' => Ok(PauliLetter::X),
            'Y' => Ok(PauliLetter::Y),
            'Z' => Ok(PauliLetter::Z),
            other => Err(Error::Parse(format!("unknown Pauli letter {other:?}"))),
        }
    }
}

/// A power of `i`: the phase picked up when multiplying Pauli strings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Phase(u8);

impl Phase {
    pub const ONE: Phase = Phase(0);
    pub const I: Phase = Phase(1);
    pub const MINUS_ONE: Phase = Phase(2);
    pub const MINUS_I: Phase = Phase(3);

    pub fn from_exponent(k: u32) -> Self {
        Phase((k % 4) as u8)
    }

    pub fn exponent(self) -> u8 {
        self.0
    }

    pub fn to_complex(self) -> Complex64 {
        match self.0 {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, 1.0),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, -1.0),
        }
    }

    /// Multiply a complex number by this phase without rounding.
    #[inline]
    pub fn apply(self, c: Complex64) -> Complex64 {
        match self.0 {
            0 => c,
            1 => Complex64::new(-c.im, c.re),
            2 => Complex64::new(-c.re, -c.im),
            _ => Complex64::new(c.im, -c.re),
        }
    }
}

impl std::ops::Mul for Phase {
    type Output = Phase;
    fn mul(self, rhs: Phase) -> Phase {
        Phase((self.0 + rhs.0) % 4)
    }
}

/// Tensor product of single-site Pauli letters on a chain of `n_sites`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PauliString {
    n_sites: u8,
    x: u64,
    z: u64,
}

impl PauliString {
    pub fn identity(n_sites: usize) -> Self {
        assert!(
            (1..=MAX_SITES).contains(&n_sites),
            "chain length {n_sites} outside 1..={MAX_SITES}"
        );
        PauliString {
            n_sites: n_sites as u8,
            x: 0,
            z: 0,
        }
    }

    pub fn from_letters(letters: &[PauliLetter]) -> Self {
        let mut p = Self::identity(letters.len());
        for (site, &l) in letters.iter().enumerate() {
            p.set(site, l);
        }
        p
    }

    /// Build from raw masks (bit `n - 1 - i` is site `i`).
    pub fn from_masks(n_sites: usize, x: u64, z: u64) -> Self {
        let p = Self::identity(n_sites);
        let full = p.full_mask();
        PauliString {
            x: x & full,
            z: z & full,
            ..p
        }
    }

    pub fn single(n_sites: usize, site: usize, letter: PauliLetter) -> Self {
        let mut p = Self::identity(n_sites);
        p.set(site, letter);
        p
    }

    /// Place `letters` on consecutive sites starting at `offset`.
    pub fn local(n_sites: usize, offset: usize, letters: &[PauliLetter]) -> Result<Self> {
        if offset + letters.len() > n_sites {
            return Err(Error::SiteOutOfRange {
                site: offset + letters.len() - 1,
                n_sites,
            });
        }
        let mut p = Self::identity(n_sites);
        for (k, &l) in letters.iter().enumerate() {
            p.set(offset + k, l);
        }
        Ok(p)
    }

    #[inline]
    fn bit(&self, site: usize) -> u64 {
        1u64 << (self.n_sites as usize - 1 - site)
    }

    #[inline]
    fn full_mask(&self) -> u64 {
        if self.n_sites as usize == 64 {
            u64::MAX
        } else {
            (1u64 << self.n_sites) - 1
        }
    }

    fn set(&mut self, site: usize, letter: PauliLetter) {
        assert!(site < self.n_sites as usize, "site {site} out of range");
        let b = self.bit(site);
        let (xb, zb) = letter.bits();
        self.x = if xb { self.x | b } else { self.x & !b };
        self.z = if zb { self.z | b } else { self.z & !b };
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites as usize
    }

    pub fn x_mask(&self) -> u64 {
        self.x
    }

    pub fn z_mask(&self) -> u64 {
        self.z
    }

    pub fn letter(&self, site: usize) -> PauliLetter {
        let b = self.bit(site);
        PauliLetter::from_bits(self.x & b != 0, self.z & b != 0)
    }

    pub fn letters(&self) -> Vec<PauliLetter> {
        (0..self.n_sites()).map(|s| self.letter(s)).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.x == 0 && self.z == 0
    }

    pub fn weight(&self) -> usize {
        (self.x | self.z).count_ones() as usize
    }

    /// Sites carrying a non-identity letter, ascending.
    pub fn support(&self) -> Vec<usize> {
        (0..self.n_sites())
            .filter(|&s| self.letter(s) != PauliLetter::I)
            .collect()
    }

    /// Bitmask of the support, in site order (bit `i` is site `i`).
    pub fn support_sites_mask(&self) -> u64 {
        let m = self.x | self.z;
        let n = self.n_sites();
        let mut out = 0u64;
        for s in 0..n {
            if m & (1u64 << (n - 1 - s)) != 0 {
                out |= 1 << s;
            }
        }
        out
    }

    /// `(first, last)` non-identity site, or `None` for the identity.
    pub fn support_range(&self) -> Option<(usize, usize)> {
        let m = self.x | self.z;
        if m == 0 {
            return None;
        }
        let n = self.n_sites();
        let first = n - 1 - (63 - m.leading_zeros() as usize);
        let last = n - 1 - m.trailing_zeros() as usize;
        Some((first, last))
    }

    /// Number of contiguous sites spanned by the support (0 for identity).
    pub fn span(&self) -> usize {
        self.support_range().map_or(0, |(a, b)| b - a + 1)
    }

    pub fn commutes_with(&self, other: &PauliString) -> bool {
        ((self.x & other.z).count_ones() + (self.z & other.x).count_ones()) % 2 == 0
    }

    /// `self · other = phase · product`.
    pub fn multiply(&self, other: &PauliString) -> Result<(Phase, PauliString)> {
        if self.n_sites != other.n_sites {
            return Err(Error::DimensionMismatch {
                expected: self.n_sites(),
                found: other.n_sites(),
            });
        }
        Ok(self.mul_unchecked(other))
    }

    #[inline]
    pub(crate) fn mul_unchecked(&self, other: &PauliString) -> (Phase, PauliString) {
        let x = self.x ^ other.x;
        let z = self.z ^ other.z;
        let k = (self.x & self.z).count_ones()
            + (other.x & other.z).count_ones()
            + 2 * (self.z & other.x).count_ones()
            + 4 * 64
            - (x & z).count_ones();
        (
            Phase::from_exponent(k),
            PauliString {
                n_sites: self.n_sites,
                x,
                z,
            },
        )
    }

    /// Action on a basis state: `P|b> = amplitude · |b ^ x>`.
    #[inline]
    pub fn apply_to_basis(&self, b: usize) -> (Complex64, usize) {
        (self.column_phase(b).to_complex(), b ^ self.x as usize)
    }

    /// Phase of the nonzero entry in column `b`: `i^{|x&z|} (-1)^{|z&b|}`.
    #[inline]
    pub(crate) fn column_phase(&self, b: usize) -> Phase {
        let y = (self.x & self.z).count_ones();
        let s = (self.z & b as u64).count_ones();
        Phase::from_exponent(y + 2 * s)
    }

    /// Dense `2^n × 2^n` matrix.
    pub fn dense(&self) -> Mat<Complex64> {
        let d = 1usize << self.n_sites;
        let mut m = Mat::<Complex64>::zeros(d, d);
        for b in 0..d {
            let (amp, row) = self.apply_to_basis(b);
            m[(row, b)] = amp;
        }
        m
    }

    /// Index in `0..4^n` used by Pauli-coordinate vectors.
    #[inline]
    pub fn index(&self) -> usize {
        ((self.x as usize) << self.n_sites) | self.z as usize
    }

    pub fn from_index(n_sites: usize, index: usize) -> Self {
        let d = 1usize << n_sites;
        PauliString::from_masks(n_sites, (index / d) as u64, (index % d) as u64)
    }

    /// Every string on `n_sites`, ordered by [`PauliString::index`].
    pub fn all(n_sites: usize) -> impl Iterator<Item = PauliString> {
        (0..1usize << (2 * n_sites)).map(move |i| PauliString::from_index(n_sites, i))
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in 0..self.n_sites() {
            write!(f, "{}", self.letter(s).as_char())?;
        }
        Ok(())
    }
}

impl fmt::Debug for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PauliString({self})")
    }
}

impl FromStr for PauliString {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let letters = s
            .trim()
            .chars()
            .map(PauliLetter::from_char)
            .collect::<Result<Vec<_>>>()?;
        if letters.is_empty() || letters.len() > MAX_SITES {
            return Err(Error::Parse(format!("bad Pauli string length in {s:?}")));
        }
        Ok(PauliString::from_letters(&letters))
    }
}

/// Linear combination of Pauli strings with complex coefficients.
#[derive(Clone, PartialEq)]
pub struct LocalOperator {
    n_sites: usize,
    terms: BTreeMap<PauliString, Complex64>,
}

impl LocalOperator {
    pub fn zero(n_sites: usize) -> Self {
        LocalOperator {
            n_sites,
            terms: BTreeMap::new(),
        }
    }

    pub fn identity(n_sites: usize) -> Self {
        Self::from_pauli(PauliString::identity(n_sites))
    }

    pub fn from_pauli(p: PauliString) -> Self {
        Self::from_term(p, Complex64::new(1.0, 0.0))
    }

    pub fn from_term(p: PauliString, c: Complex64) -> Self {
        let mut op = Self::zero(p.n_sites());
        op.add_term(p, c);
        op
    }

    pub fn from_terms(
        n_sites: usize,
        terms: impl IntoIterator<Item = (PauliString, Complex64)>,
    ) -> Result<Self> {
        let mut op = Self::zero(n_sites);
        for (p, c) in terms {
            if p.n_sites() != n_sites {
                return Err(Error::DimensionMismatch {
                    expected: n_sites,
                    found: p.n_sites(),
                });
            }
            op.add_term(p, c);
        }
        Ok(op)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn terms(&self) -> impl Iterator<Item = (&PauliString, &Complex64)> {
        self.terms.iter()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coefficient(&self, p: &PauliString) -> Complex64 {
        self.terms.get(p).copied().unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_term(&mut self, p: PauliString, c: Complex64) {
        debug_assert_eq!(p.n_sites(), self.n_sites);
        let slot = self.terms.entry(p).or_default();
        *slot += c;
        if slot.norm() < PRUNE_TOL {
            self.terms.remove(&p);
        }
    }

    fn check_dims(&self, other: &LocalOperator) -> Result<()> {
        if self.n_sites != other.n_sites {
            return Err(Error::DimensionMismatch {
                expected: self.n_sites,
                found: other.n_sites,
            });
        }
        Ok(())
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        let mut out = Self::zero(self.n_sites);
        for (p, c) in &self.terms {
            out.add_term(*p, c * s);
        }
        out
    }

    pub fn add(&self, other: &LocalOperator) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (p, c) in &other.terms {
            out.add_term(*p, *c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &LocalOperator) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (p, c) in &other.terms {
            out.add_term(*p, -*c);
        }
        Ok(out)
    }

    /// Operator product `self · other`.
    pub fn mul(&self, other: &LocalOperator) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = Self::zero(self.n_sites);
        for (pa, ca) in &self.terms {
            for (pb, cb) in &other.terms {
                let (ph, q) = pa.mul_unchecked(pb);
                out.add_term(q, ph.apply(ca * cb));
            }
        }
        Ok(out)
    }

    /// `self · other - other · self`.
    ///
    /// Contributions to each output string are summed in an order that only
    /// depends on the unordered pair of input strings, so swapping the
    /// arguments negates every coefficient exactly.
    pub fn commutator(&self, other: &LocalOperator) -> Result<Self> {
        self.check_dims(other)?;
        let mut parts: BTreeMap<PauliString, Vec<((PauliString, PauliString), Complex64)>> =
            BTreeMap::new();
        for (pa, ca) in &self.terms {
            for (pb, cb) in &other.terms {
                if pa.commutes_with(pb) {
                    continue;
                }
                let (ph, q) = pa.mul_unchecked(pb);
                let key = if pa <= pb { (*pa, *pb) } else { (*pb, *pa) };
                parts
                    .entry(q)
                    .or_default()
                    .push((key, ph.apply(ca * cb) * 2.0));
            }
        }
        let mut out = Self::zero(self.n_sites);
        for (q, mut contribs) in parts {
            contribs.sort_by(|a, b| a.0.cmp(&b.0));
            let sum = contribs
                .iter()
                .fold(Complex64::default(), |acc, (_, v)| acc + v);
            out.add_term(q, sum);
        }
        Ok(out)
    }

    /// `self · other + other · self`.
    pub fn anticommutator(&self, other: &LocalOperator) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = Self::zero(self.n_sites);
        for (pa, ca) in &self.terms {
            for (pb, cb) in &other.terms {
                if !pa.commutes_with(pb) {
                    continue;
                }
                let (ph, q) = pa.mul_unchecked(pb);
                out.add_term(q, ph.apply(ca * cb) * 2.0);
            }
        }
        Ok(out)
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zero(self.n_sites);
        for (p, c) in &self.terms {
            out.add_term(*p, c.conj());
        }
        out
    }

    /// All coefficients real (Pauli strings are Hermitian).
    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.terms.values().all(|c| c.im.abs() <= tol)
    }

    /// Site-ordered support mask (bit `i` is site `i`).
    pub fn support_sites_mask(&self) -> u64 {
        self.terms.keys().fold(0, |m, p| m | p.support_sites_mask())
    }

    pub fn support_range(&self) -> Option<(usize, usize)> {
        let m = self.support_sites_mask();
        if m == 0 {
            None
        } else {
            Some((m.trailing_zeros() as usize, 63 - m.leading_zeros() as usize))
        }
    }

    /// Support fits inside `k` contiguous sites.
    pub fn is_local(&self, k: usize) -> bool {
        self.support_range().is_none_or(|(a, b)| b - a < k)
    }

    pub fn dense(&self) -> Mat<Complex64> {
        let d = 1usize << self.n_sites;
        let mut m = Mat::<Complex64>::zeros(d, d);
        for (p, c) in &self.terms {
            for b in 0..d {
                let (amp, row) = p.apply_to_basis(b);
                m[(row, b)] += amp * c;
            }
        }
        m
    }

    /// Largest coefficient magnitude.
    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.norm()))
    }
}

impl fmt::Debug for LocalOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LocalOperator({self})")
    }
}

/// `re+imi * LETTERS` per term, joined by `" + "`; the zero operator prints as `0`.
impl fmt::Display for LocalOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (p, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            let sign = if c.im.is_sign_negative() { '-' } else { '+' };
            write!(f, "{:?}{}{:?}i * {}", c.re, sign, c.im.abs(), p)?;
        }
        Ok(())
    }
}

impl FromStr for LocalOperator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "0" {
            return Err(Error::Parse(
                "the zero operator carries no chain length".into(),
            ));
        }
        let mut n_sites = None;
        let mut terms = Vec::new();
        for part in s.split(" + ") {
            let (coeff, letters) = part
                .split_once(" * ")
                .ok_or_else(|| Error::Parse(format!("missing ' * ' in term {part:?}")))?;
            let p: PauliString = letters.parse()?;
            n_sites.get_or_insert(p.n_sites());
            terms.push((p, parse_complex(coeff)?));
        }
        LocalOperator::from_terms(n_sites.unwrap_or(1), terms)
    }
}

fn parse_complex(s: &str) -> Result<Complex64> {
    let bad = || Error::Parse(format!("bad complex number {s:?}"));
    let body = s.strip_suffix('i').ok_or_else(bad)?;
    // split at the sign separating real and imaginary parts, skipping exponent signs
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'))
        .ok_or_else(bad)?;
    let re: f64 = body[..split].parse().map_err(|_| bad())?;
    let im: f64 = body[split..].parse().map_err(|_| bad())?;
    Ok(Complex64::new(re, im))
}

/// Dense density matrix on `n_sites` qubits (site 0 most significant).
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    n_sites: usize,
    data: Mat<Complex64>,
}

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-8;

impl DensityMatrix {
    /// Wrap a matrix after checking Hermiticity, unit trace and positivity.
    pub fn new(n_sites: usize, data: Mat<Complex64>) -> Result<Self> {
        let rho = Self::from_matrix_unchecked(n_sites, data)?;
        rho.validate(HERMITIAN_TOL, TRACE_TOL, PSD_TOL)?;
        Ok(rho)
    }

    /// Wrap a matrix checking only its shape.
    pub fn from_matrix_unchecked(n_sites: usize, data: Mat<Complex64>) -> Result<Self> {
        let d = 1usize << n_sites;
        if data.nrows() != d || data.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: data.nrows(),
            });
        }
        Ok(DensityMatrix { n_sites, data })
    }

    /// Hermitize as `(m + m†)/2` and rescale to unit trace.
    pub fn hermitize_normalize(n_sites: usize, m: &Mat<Complex64>) -> Result<Self> {
        let d = 1usize << n_sites;
        if m.nrows() != d || m.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: m.nrows(),
            });
        }
        let mut h = Mat::<Complex64>::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                h[(i, j)] = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            }
        }
        let tr: f64 = (0..d).map(|i| h[(i, i)].re).sum();
        if tr.abs() < 1e-300 || !tr.is_finite() {
            return Err(Error::InvalidState("trace vanishes".into()));
        }
        let inv = Complex64::new(1.0 / tr, 0.0);
        for j in 0..d {
            for i in 0..d {
                h[(i, j)] *= inv;
            }
        }
        Ok(DensityMatrix { n_sites, data: h })
    }

    pub fn validate(&self, herm_tol: f64, trace_tol: f64, psd_tol: f64) -> Result<()> {
        let d = self.dim();
        let mut herm = 0.0f64;
        for j in 0..d {
            for i in 0..d {
                herm = herm.max((self.data[(i, j)] - self.data[(j, i)].conj()).norm());
            }
        }
        if herm > herm_tol {
            return Err(Error::InvalidState(format!("non-Hermitian by {herm:e}")));
        }
        let tr = self.trace();
        if (tr - Complex64::new(1.0, 0.0)).norm() > trace_tol {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let min = self.min_eigenvalue()?;
        if min < -psd_tol {
            return Err(Error::InvalidState(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    pub fn fully_mixed(n_sites: usize) -> Self {
        let d = 1usize << n_sites;
        let data = Mat::from_fn(d, d, |i, j| {
            if i == j {
                Complex64::new(1.0 / d as f64, 0.0)
            } else {
                Complex64::default()
            }
        });
        DensityMatrix { n_sites, data }
    }

    /// `|b><b|` for the computational basis state with index `b`.
    pub fn basis_state(n_sites: usize, b: usize) -> Self {
        let d = 1usize << n_sites;
        let mut data = Mat::<Complex64>::zeros(d, d);
        data[(b, b)] = Complex64::new(1.0, 0.0);
        DensityMatrix { n_sites, data }
    }

    /// All spins up, `|↑↑…↑>`.
    pub fn all_up(n_sites: usize) -> Self {
        Self::basis_state(n_sites, 0)
    }

    /// All spins down, `|↓↓…↓>`.
    pub fn all_down(n_sites: usize) -> Self {
        Self::basis_state(n_sites, (1usize << n_sites) - 1)
    }

    /// Projector onto a (normalized) state vector.
    pub fn pure(n_sites: usize, psi: &[Complex64]) -> Result<Self> {
        let d = 1usize << n_sites;
        if psi.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: psi.len(),
            });
        }
        let norm2: f64 = psi.iter().map(|c| c.norm_sqr()).sum();
        if norm2 == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let data = Mat::from_fn(d, d, |i, j| psi[i] * psi[j].conj() / norm2);
        Ok(DensityMatrix { n_sites, data })
    }

    /// Random full-rank state `G G† / Tr(G G†)` with complex Gaussian `G`.
    pub fn random(n_sites: usize, seed: u64) -> Self {
        let d = 1usize << n_sites;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Mat::from_fn(d, d, |_, _| {
            Complex64::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            )
        });
        let m = &g * g.adjoint();
        DensityMatrix::hermitize_normalize(n_sites, &m).expect("Gram matrix has positive trace")
    }

    /// Kronecker product `self ⊗ other` (self on the leading sites).
    pub fn tensor(&self, other: &DensityMatrix) -> Self {
        let (da, db) = (self.dim(), other.dim());
        let data = Mat::from_fn(da * db, da * db, |i, j| {
            self.data[(i / db, j / db)] * other.data[(i % db, j % db)]
        });
        DensityMatrix {
            n_sites: self.n_sites + other.n_sites,
            data,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        1usize << self.n_sites
    }

    pub fn matrix(&self) -> &Mat<Complex64> {
        &self.data
    }

    pub fn into_matrix(self) -> Mat<Complex64> {
        self.data
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim()).map(|i| self.data[(i, i)]).sum()
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let ev = self
            .data
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
        Ok(ev.first().copied().unwrap_or(0.0))
    }

    /// `Tr(P ρ)` for a single Pauli string.
    pub fn pauli_expectation(&self, p: &PauliString) -> Result<Complex64> {
        if p.n_sites() != self.n_sites {
            return Err(Error::DimensionMismatch {
                expected: self.n_sites,
                found: p.n_sites(),
            });
        }
        Ok(pauli_trace(p, &self.data))
    }

    /// Coordinates `r_P = Tr(P ρ)` indexed by [`PauliString::index`].
    pub fn pauli_vector(&self) -> Vec<f64> {
        PauliString::all(self.n_sites)
            .map(|p| pauli_trace(&p, &self.data).re)
            .collect()
    }

    /// Inverse of [`DensityMatrix::pauli_vector`]: `ρ = 2^{-n} Σ r_P P`.
    pub fn from_pauli_vector(n_sites: usize, r: &[f64]) -> Result<Self> {
        let d = 1usize << n_sites;
        if r.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                found: r.len(),
            });
        }
        let mut data = Mat::<Complex64>::zeros(d, d);
        let scale = 1.0 / d as f64;
        for (idx, &v) in r.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let p = PauliString::from_index(n_sites, idx);
            for b in 0..d {
                let (amp, row) = p.apply_to_basis(b);
                data[(row, b)] += amp * (v * scale);
            }
        }
        Ok(DensityMatrix { n_sites, data })
    }
}

#[inline]
pub(crate) fn pauli_trace(p: &PauliString, m: &Mat<Complex64>) -> Complex64 {
    // Tr(P m) = Σ_c phase(c) m[c, c^x]
    let d = m.nrows();
    let x = p.x_mask() as usize;
    let mut acc = Complex64::default();
    for c in 0..d {
        acc += p.column_phase(c).apply(m[(c, c ^ x)]);
    }
    acc
}

/// `Tr(op · ρ)`.
pub fn expectation(rho: &DensityMatrix, op: &LocalOperator) -> Result<Complex64> {
    if op.n_sites() != rho.n_sites() {
        return Err(Error::DimensionMismatch {
            expected: rho.n_sites(),
            found: op.n_sites(),
        });
    }
    Ok(op
        .terms()
        .map(|(p, c)| c * pauli_trace(p, rho.matrix()))
        .sum())
}

/// `phase · dense(a·b)` convenience: product of two strings.
pub fn multiply(a: &PauliString, b: &PauliString) -> Result<(Complex64, PauliString)> {
    a.multiply(b).map(|(ph, p)| (ph.to_complex(), p))
}

/// Operator commutator `[a, b]`.
pub fn commutator(a: &LocalOperator, b: &LocalOperator) -> Result<LocalOperator> {
    a.commutator(b)
}

/// Reduced state on `keep` (strictly increasing site list).
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    let n = rho.n_sites();
    for w in keep.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidArgument(
                "kept sites must be strictly increasing".into(),
            ));
        }
    }
    if let Some(&s) = keep.iter().find(|&&s| s >= n) {
        return Err(Error::SiteOutOfRange {
            site: s,
            n_sites: n,
        });
    }
    if keep.is_empty() {
        return Err(Error::InvalidArgument("must keep at least one site".into()));
    }
    let traced: Vec<usize> = (0..n).filter(|s| !keep.contains(s)).collect();
    let k = keep.len();
    let dk = 1usize << k;
    let dt = 1usize << traced.len();
    // full index from (kept bits, traced bits); site s sits at bit n-1-s
    let compose = |kept: usize, tr: usize| -> usize {
        let mut idx = 0usize;
        for (pos, &s) in keep.iter().enumerate() {
            if kept >> (k - 1 - pos) & 1 == 1 {
                idx |= 1 << (n - 1 - s);
            }
        }
        for (pos, &s) in traced.iter().enumerate() {
            if tr >> (traced.len() - 1 - pos) & 1 == 1 {
                idx |= 1 << (n - 1 - s);
            }
        }
        idx
    };
    let m = rho.matrix();
    let mut out = Mat::<Complex64>::zeros(dk, dk);
    for t in 0..dt {
        for j in 0..dk {
            let cj = compose(j, t);
            for i in 0..dk {
                out[(i, j)] += m[(compose(i, t), cj)];
            }
        }
    }
    DensityMatrix::from_matrix_unchecked(k, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn ps(s: &str) -> PauliString {
        s.parse().unwrap()
    }

    fn op(s: &str) -> LocalOperator {
        LocalOperator::from_pauli(ps(s))
    }

    fn max_diff(a: &Mat<Complex64>, b: &Mat<Complex64>) -> f64 {
        let mut m = 0.0f64;
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                m = m.max((a[(i, j)] - b[(i, j)]).norm());
            }
        }
        m
    }

    #[test]
    fn x_times_y_is_i_z() {
        let (ph, p) = multiply(&ps("X"), &ps("Y")).unwrap();
        assert_eq!(ph, c(0.0, 1.0));
        assert_eq!(p, ps("Z"));
    }

    #[test]
    fn disjoint_strings_multiply_without_phase() {
        let (ph, p) = multiply(&ps("XI"), &ps("IX")).unwrap();
        assert_eq!(ph, c(1.0, 0.0));
        assert_eq!(p, ps("XX"));
    }

    #[test]
    fn xy_times_yx_matches_dense_product() {
        let (a, b) = (ps("XY"), ps("YX"));
        let (ph, p) = multiply(&a, &b).unwrap();
        let lhs = &a.dense() * &b.dense();
        let rhs = LocalOperator::from_term(p, ph).dense();
        assert!(max_diff(&lhs, &rhs) < 1e-15);
        // (XY)(YX) = (XY)⊗(YX) = (iZ)⊗(-iZ) = ZZ
        assert_eq!((ph, p), (c(1.0, 0.0), ps("ZZ")));
    }

    #[test]
    fn exhaustive_two_site_products_match_dense() {
        let all: Vec<_> = PauliString::all(2).collect();
        assert_eq!(all.len(), 16);
        for a in &all {
            for b in &all {
                let (ph, p) = multiply(a, b).unwrap();
                assert!([c(1., 0.), c(-1., 0.), c(0., 1.), c(0., -1.)].contains(&ph));
                let lhs = &a.dense() * &b.dense();
                let rhs = LocalOperator::from_term(p, ph).dense();
                assert_eq!(max_diff(&lhs, &rhs), 0.0, "{a} * {b}");
            }
            assert_eq!(
                multiply(a, a).unwrap(),
                (c(1.0, 0.0), PauliString::identity(2))
            );
        }
    }

    #[test]
    fn multiply_rejects_mismatched_lengths() {
        assert!(matches!(
            ps("X").multiply(&ps("XX")),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn commutator_examples() {
        let xy = commutator(&op("X"), &op("Y")).unwrap();
        assert_eq!(xy, LocalOperator::from_term(ps("Z"), c(0.0, 2.0)));

        assert!(commutator(&op("XI"), &op("IZ")).unwrap().is_zero());

        let got = commutator(&op("XX"), &op("ZI")).unwrap();
        let dense = {
            let (a, b) = (ps("XX").dense(), ps("ZI").dense());
            &(&a * &b) - &(&b * &a)
        };
        assert!(max_diff(&got.dense(), &dense) < 1e-15);
        assert_eq!(got, LocalOperator::from_term(ps("YX"), c(0.0, -2.0)));
    }

    #[test]
    fn commutator_dimension_mismatch() {
        assert!(commutator(&op("X"), &op("XX")).is_err());
    }

    #[test]
    fn expectation_examples() {
        let mixed = DensityMatrix::fully_mixed(3);
        for p in PauliString::all(3).filter(|p| !p.is_identity()) {
            assert!(
                expectation(&mixed, &LocalOperator::from_pauli(p))
                    .unwrap()
                    .norm()
                    < 1e-15
            );
        }
        let up = DensityMatrix::all_up(1);
        assert_eq!(expectation(&up, &op("Z")).unwrap(), c(1.0, 0.0));

        let rho = DensityMatrix::random(2, 7);
        let o = op("XY");
        let dense = &o.dense() * rho.matrix();
        let tr: Complex64 = (0..4).map(|i| dense[(i, i)]).sum();
        let got = expectation(&rho, &o).unwrap();
        assert!((got - tr).norm() < 1e-14);
        assert!(got.im.abs() < 1e-10);
    }

    #[test]
    fn partial_trace_examples() {
        let up = DensityMatrix::all_up(2);
        let r = partial_trace(&up, &[0]).unwrap();
        assert!(max_diff(r.matrix(), DensityMatrix::all_up(1).matrix()) < 1e-15);

        let s = 1.0 / 2f64.sqrt();
        let bell = DensityMatrix::pure(2, &[c(s, 0.), c(0., 0.), c(0., 0.), c(s, 0.)]).unwrap();
        let r = partial_trace(&bell, &[0]).unwrap();
        assert!(max_diff(r.matrix(), DensityMatrix::fully_mixed(1).matrix()) < 1e-15);
    }

    #[test]
    fn partial_trace_matches_index_contraction() {
        let rho = DensityMatrix::random(3, 11);
        let r = partial_trace(&rho, &[0, 2]).unwrap();
        let m = rho.matrix();
        // ρ[(a b c),(a' b' c')] with index a*4 + b*2 + c; contract b = b'
        for a in 0..2 {
            for cc in 0..2 {
                for a2 in 0..2 {
                    for c2 in 0..2 {
                        let mut want = Complex64::default();
                        for b in 0..2 {
                            want += m[(a * 4 + b * 2 + cc, a2 * 4 + b * 2 + c2)];
                        }
                        assert!((r.matrix()[(a * 2 + cc, a2 * 2 + c2)] - want).norm() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn partial_trace_errors() {
        let rho = DensityMatrix::fully_mixed(2);
        assert!(matches!(
            partial_trace(&rho, &[2]),
            Err(Error::SiteOutOfRange { .. })
        ));
        assert!(partial_trace(&rho, &[1, 0]).is_err());
    }

    #[test]
    fn partial_trace_of_everything_is_identity_map() {
        let rho = DensityMatrix::random(3, 5);
        let r = partial_trace(&rho, &[0, 1, 2]).unwrap();
        assert_eq!(max_diff(r.matrix(), rho.matrix()), 0.0);
    }

    #[test]
    fn text_form_round_trips() {
        let o = LocalOperator::from_terms(
            3,
            [
                (ps("XIZ"), c(1.5, 0.0)),
                (ps("YYI"), c(-0.25, -3e-7)),
                (ps("IIZ"), c(0.1, 2.0)),
            ],
        )
        .unwrap();
        let text = o.to_string();
        assert!(text.contains("1.5+0.0i * XIZ"));
        let back: LocalOperator = text.parse().unwrap();
        assert_eq!(back, o);
    }

    #[test]
    fn pauli_vector_round_trip() {
        let rho = DensityMatrix::random(2, 3);
        let r = rho.pauli_vector();
        assert!((r[0] - 1.0).abs() < 1e-14);
        let back = DensityMatrix::from_pauli_vector(2, &r).unwrap();
        assert!(max_diff(back.matrix(), rho.matrix()) < 1e-14);
    }

    #[test]
    fn support_and_locality() {
        let p = ps("IXIZI");
        assert_eq!(p.support(), vec![1, 3]);
        assert_eq!(p.support_range(), Some((1, 3)));
        assert_eq!(p.span(), 3);
        let o = LocalOperator::from_terms(5, [(p, c(1., 0.)), (ps("IIIIY"), c(1., 0.))]).unwrap();
        assert_eq!(o.support_range(), Some((1, 4)));
        assert!(o.is_local(4));
        assert!(!o.is_local(3));
        assert!(o.is_hermitian(0.0));
        assert!(!o.scaled(c(0.0, 1.0)).is_hermitian(1e-12));
    }

    #[test]
    fn pruning_drops_cancelled_terms() {
        let a = op("XY");
        assert!(a.sub(&a).unwrap().is_zero());
        let tiny = LocalOperator::from_term(ps("Z"), c(1e-15, 0.0));
        assert!(tiny.is_zero());
    }

    fn arb_operator(n: usize) -> impl Strategy<Value = LocalOperator> {
        prop::collection::vec((0..(1usize << (2 * n)), -2.0f64..2.0, -2.0f64..2.0), 1..5).prop_map(
            move |terms| {
                LocalOperator::from_terms(
                    n,
                    terms
                        .into_iter()
                        .map(|(i, re, im)| (PauliString::from_index(n, i), c(re, im))),
                )
                .unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn commutator_is_exactly_antisymmetric(a in arb_operator(3), b in arb_operator(3)) {
            let ab = a.commutator(&b).unwrap();
            let ba = b.commutator(&a).unwrap();
            prop_assert_eq!(ab, ba.scaled(c(-1.0, 0.0)));
        }

        #[test]
        fn commutator_matches_dense(a in arb_operator(2), b in arb_operator(2)) {
            let got = a.commutator(&b).unwrap().dense();
            let (da, db) = (a.dense(), b.dense());
            let want = &(&da * &db) - &(&db * &da);
            prop_assert!(max_diff(&got, &want) < 1e-12);
        }

        #[test]
        fn expectation_is_linear_and_conjugate_symmetric(a in arb_operator(2), b in arb_operator(2), seed in 0u64..1000) {
            let rho = DensityMatrix::random(2, seed);
            let ea = expectation(&rho, &a).unwrap();
            let eb = expectation(&rho, &b).unwrap();
            let sum = expectation(&rho, &a.add(&b).unwrap()).unwrap();
            prop_assert!((sum - ea - eb).norm() < 1e-12);
            let adj = expectation(&rho, &a.adjoint()).unwrap();
            prop_assert!((adj - ea.conj()).norm() < 1e-12);
        }

        #[test]
        fn partial_trace_preserves_trace(seed in 0u64..1000, mask in 1usize..8) {
            let rho = DensityMatrix::random(3, seed);
            let keep: Vec<usize> = (0..3).filter(|s| mask >> s & 1 == 1).collect();
            let r = partial_trace(&rho, &keep).unwrap();
            prop_assert!((r.trace() - rho.trace()).norm() < 1e-12);
            r.validate(1e-12, 1e-12, 1e-12).unwrap();
        }
    }
}
