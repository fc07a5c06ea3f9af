//! Sparse operator algebra over a [`SpaceSpec`].
//!
//! Operators are stored in compressed-row form with sorted column indices
//! and are immutable: every arithmetic operation returns a new operator.
//! Row-parallel kernels keep a fixed per-row accumulation order and reduce
//! inner products over fixed-size chunks, so results do not depend on the
//! number of worker threads.

use std::io::{self, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::hspace::{SpaceError, SpaceSpec, SubsystemKind};

pub type C64 = Complex64;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
pub(crate) const I: C64 = C64::new(0.0, 1.0);

/// Entrywise tolerance for `A == A^dagger`.
pub const HERMITIAN_TOL: f64 = 1e-12;

const ROW_CHUNK: usize = 2048;
const DOT_CHUNK: usize = 8192;

#[derive(Debug, Error)]
pub enum OpError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("space fingerprint mismatch ({0:#x} vs {1:#x})")]
    FingerprintMismatch(u64, u64),
    #[error("`{label}` is a {found}, expected a {expected}")]
    WrongKind { label: String, expected: &'static str, found: &'static str },
    #[error("operator is not Hermitian: max |A - A^dagger| = {defect:e}")]
    NotHermitian { defect: f64 },
    #[error("expectation of a Hermitian operator has imaginary part {im:e} (real part {re:e})")]
    ComplexExpectation { re: f64, im: f64 },
    #[error("fill-in overflow while multiplying operators")]
    FillOverflow,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty operator expression")]
    EmptyExpression,
}

/// A linear map on a fixed space that can be applied to amplitude slices.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    fn fingerprint(&self) -> u64;

    /// `y = A x`; `y` is overwritten.
    fn apply_into(&self, x: &[C64], y: &mut [C64]);

    /// Largest violation of `A == A^dagger` this operator can report.
    ///
    /// The default probes two fixed pseudo-random vectors and returns
    /// `|<x|Ay> - <Ax|y>|` relative to `|x||Ay| + |Ax||y|`.
    fn hermiticity_defect(&self) -> f64 {
        let n = self.dim();
        let x = probe_vector(n, 0x9e37_79b9);
        let y = probe_vector(n, 0x85eb_ca6b);
        let mut ax = vec![ZERO; n];
        let mut ay = vec![ZERO; n];
        self.apply_into(&x, &mut ax);
        self.apply_into(&y, &mut ay);
        let lhs = vdot(&x, &ay);
        let rhs = vdot(&ax, &y);
        let scale = norm(&x) * norm(&ay) + norm(&ax) * norm(&y);
        if scale == 0.0 {
            0.0
        } else {
            (lhs - rhs).norm() / scale
        }
    }
}

fn probe_vector(n: usize, seed: u64) -> Vec<C64> {
    // splitmix64; any fixed sequence works
    let mut state = seed;
    let mut next = || {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    (0..n).map(|_| C64::new(next(), next())).collect()
}

/// `<a|b>` with conjugation on `a`, reduced in fixed-size chunks.
pub fn vdot(a: &[C64], b: &[C64]) -> C64 {
    debug_assert_eq!(a.len(), b.len());
    let partial: Vec<C64> = a
        .par_chunks(DOT_CHUNK)
        .zip(b.par_chunks(DOT_CHUNK))
        .map(|(ca, cb)| ca.iter().zip(cb).fold(ZERO, |acc, (x, y)| acc + x.conj() * y))
        .collect();
    partial.into_iter().fold(ZERO, |acc, z| acc + z)
}

pub fn norm(a: &[C64]) -> f64 {
    let partial: Vec<f64> =
        a.par_chunks(DOT_CHUNK).map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>()).collect();
    partial.into_iter().sum::<f64>().sqrt()
}

/// Dense amplitude vector tagged with its space.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    fingerprint: u64,
    amplitudes: Vec<C64>,
}

impl StateVector {
    pub fn from_amplitudes(space: &SpaceSpec, amplitudes: Vec<C64>) -> Result<Self, OpError> {
        if amplitudes.len() != space.total_dim() {
            return Err(OpError::DimensionMismatch(amplitudes.len(), space.total_dim()));
        }
        Ok(Self { fingerprint: space.fingerprint(), amplitudes })
    }

    pub(crate) fn from_raw(fingerprint: u64, amplitudes: Vec<C64>) -> Self {
        Self { fingerprint, amplitudes }
    }

    pub fn basis(space: &SpaceSpec, occupations: &[usize]) -> Result<Self, OpError> {
        let i = space.basis_index(occupations)?;
        let mut amplitudes = vec![ZERO; space.total_dim()];
        amplitudes[i] = ONE;
        Ok(Self { fingerprint: space.fingerprint(), amplitudes })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        norm(&self.amplitudes)
    }

    pub fn inner(&self, other: &StateVector) -> Result<C64, OpError> {
        check_fp(self.fingerprint, other.fingerprint)?;
        Ok(vdot(&self.amplitudes, &other.amplitudes))
    }

    /// Returns the norm before rescaling.
    pub fn normalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            let inv = 1.0 / n;
            self.amplitudes.par_iter_mut().for_each(|z| *z *= inv);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `|self - other|`.
    pub fn distance(&self, other: &StateVector) -> Result<f64, OpError> {
        check_fp(self.fingerprint, other.fingerprint)?;
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt())
    }
}

fn check_fp(a: u64, b: u64) -> Result<(), OpError> {
    if a == b {
        Ok(())
    } else {
        Err(OpError::FingerprintMismatch(a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PauliAxis {
    X,
    Y,
    Z,
}

/// Compressed-row complex operator with sorted columns per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    fingerprint: u64,
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
    hermitian_hint: Option<bool>,
}

impl SparseOperator {
    pub fn identity(space: &SpaceSpec) -> Self {
        Self::scalar(space, ONE)
    }

    pub fn scalar(space: &SpaceSpec, c: C64) -> Self {
        let n = space.total_dim();
        let hint = if c.im == 0.0 { Some(true) } else { None };
        if c == ZERO {
            return Self::zero(space);
        }
        Self {
            fingerprint: space.fingerprint(),
            dim: n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![c; n],
            hermitian_hint: hint,
        }
    }

    pub fn zero(space: &SpaceSpec) -> Self {
        let n = space.total_dim();
        Self {
            fingerprint: space.fingerprint(),
            dim: n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            vals: Vec::new(),
            hermitian_hint: Some(true),
        }
    }

    /// Diagonal operator with `diag[i]` at `(i, i)`; zeros are dropped.
    pub fn diagonal(space: &SpaceSpec, diag: &[C64]) -> Result<Self, OpError> {
        if diag.len() != space.total_dim() {
            return Err(OpError::DimensionMismatch(diag.len(), space.total_dim()));
        }
        let triplets = diag.iter().enumerate().map(|(i, &v)| (i, i, v));
        let hint = diag.iter().all(|z| z.im == 0.0).then_some(true);
        Ok(Self::from_triplets_unchecked(space.fingerprint(), space.total_dim(), triplets, hint))
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// exact zeros dropped.
    pub fn from_triplets(
        space: &SpaceSpec,
        triplets: impl IntoIterator<Item = (usize, usize, C64)>,
    ) -> Result<Self, OpError> {
        let n = space.total_dim();
        let list: Vec<_> = triplets.into_iter().collect();
        if let Some(&(r, c, _)) = list.iter().find(|(r, c, _)| *r >= n || *c >= n) {
            return Err(OpError::Space(SpaceError::IndexOutOfRange { index: r.max(c), dim: n }));
        }
        Ok(Self::from_triplets_unchecked(space.fingerprint(), n, list, None))
    }

    pub(crate) fn from_triplets_unchecked(
        fingerprint: u64,
        dim: usize,
        triplets: impl IntoIterator<Item = (usize, usize, C64)>,
        hermitian_hint: Option<bool>,
    ) -> Self {
        let mut list: Vec<(usize, usize, C64)> = triplets.into_iter().collect();
        list.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(list.len());
        let mut vals: Vec<C64> = Vec::with_capacity(list.len());
        let mut last: Option<(usize, usize)> = None;
        let mut rows_of = Vec::with_capacity(list.len());
        for (r, c, v) in list {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                rows_of.push(r);
                last = Some((r, c));
            }
        }
        let mut keep_cols = Vec::with_capacity(cols.len());
        let mut keep_vals = Vec::with_capacity(vals.len());
        for ((r, c), v) in rows_of.into_iter().zip(cols).zip(vals) {
            if v != ZERO {
                row_ptr[r + 1] += 1;
                keep_cols.push(c);
                keep_vals.push(v);
            }
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { fingerprint, dim, row_ptr, cols: keep_cols, vals: keep_vals, hermitian_hint }
    }

    /// Builds directly from CSR arrays whose rows are already sorted and
    /// free of duplicates.
    pub(crate) fn from_csr_unchecked(
        fingerprint: u64,
        dim: usize,
        row_ptr: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<C64>,
        hermitian_hint: Option<bool>,
    ) -> Self {
        debug_assert_eq!(row_ptr.len(), dim + 1);
        Self { fingerprint, dim, row_ptr, cols, vals, hermitian_hint }
    }

    /// Embeds a local `d x d` matrix acting on subsystem `k`.
    pub(crate) fn embed_local(space: &SpaceSpec, k: usize, local: &[Vec<C64>], hint: Option<bool>) -> Self {
        let n = space.total_dim();
        let d = space.dims()[k];
        let stride = space.strides()[k];
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            let m = (i / stride) % d;
            let base = i - m * stride;
            for (src, &v) in local[m].iter().enumerate() {
                if v != ZERO {
                    cols.push(base + src * stride);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { fingerprint: space.fingerprint(), dim: n, row_ptr, cols, vals, hermitian_hint: hint }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn hermitian_hint(&self) -> Option<bool> {
        self.hermitian_hint
    }

    pub fn with_hermitian_hint(mut self, hint: Option<bool>) -> Self {
        self.hermitian_hint = hint;
        self
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(pos) => self.vals[span.start + pos],
            Err(_) => ZERO,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    fn same_space(&self, other: &Self) -> Result<(), OpError> {
        check_fp(self.fingerprint, other.fingerprint)
    }

    pub fn adjoint(&self) -> Self {
        let mut counts = vec![0usize; self.dim + 1];
        for &c in &self.cols {
            counts[c + 1] += 1;
        }
        for r in 0..self.dim {
            counts[r + 1] += counts[r];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut cols = vec![0usize; self.nnz()];
        let mut vals = vec![ZERO; self.nnz()];
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                let slot = next[c];
                cols[slot] = r;
                vals[slot] = v.conj();
                next[c] += 1;
            }
        }
        Self {
            fingerprint: self.fingerprint,
            dim: self.dim,
            row_ptr,
            cols,
            vals,
            hermitian_hint: self.hermitian_hint,
        }
    }

    pub fn scale(&self, c: C64) -> Self {
        if c == ZERO {
            return Self {
                fingerprint: self.fingerprint,
                dim: self.dim,
                row_ptr: vec![0; self.dim + 1],
                cols: Vec::new(),
                vals: Vec::new(),
                hermitian_hint: Some(true),
            };
        }
        let hint = match self.hermitian_hint {
            Some(true) if c.im == 0.0 => Some(true),
            _ => None,
        };
        Self {
            vals: self.vals.iter().map(|v| v * c).collect(),
            hermitian_hint: hint,
            ..self.clone()
        }
    }

    /// `self + c * other`, merging sorted rows and dropping exact zeros.
    pub fn add_scaled(&self, other: &Self, c: C64) -> Result<Self, OpError> {
        self.same_space(other)?;
        let mut row_ptr = Vec::with_capacity(self.dim + 1);
        row_ptr.push(0);
        let mut cols = Vec::with_capacity(self.nnz() + other.nnz());
        let mut vals = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.dim {
            let mut a = self.row(r).peekable();
            let mut b = other.row(r).map(|(col, v)| (col, v * c)).peekable();
            loop {
                let (col, v) = match (a.peek(), b.peek()) {
                    (None, None) => break,
                    (Some(_), None) => a.next().unwrap(),
                    (None, Some(_)) => b.next().unwrap(),
                    (Some(&(ca, va)), Some(&(cb, vb))) => {
                        if ca < cb {
                            a.next();
                            (ca, va)
                        } else if cb < ca {
                            b.next();
                            (cb, vb)
                        } else {
                            a.next();
                            b.next();
                            (ca, va + vb)
                        }
                    }
                };
                if v != ZERO {
                    cols.push(col);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        let hint = match (self.hermitian_hint, other.hermitian_hint) {
            (Some(true), Some(true)) if c.im == 0.0 => Some(true),
            _ => None,
        };
        Ok(Self { fingerprint: self.fingerprint, dim: self.dim, row_ptr, cols, vals, hermitian_hint: hint })
    }

    pub fn add(&self, other: &Self) -> Result<Self, OpError> {
        self.add_scaled(other, ONE)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, OpError> {
        self.add_scaled(other, -ONE)
    }

    /// Operator product `self * other` (apply `other` first).
    pub fn mul(&self, other: &Self) -> Result<Self, OpError> {
        self.same_space(other)?;
        let n = self.dim;
        let rows: Vec<(Vec<usize>, Vec<C64>)> = (0..n)
            .into_par_iter()
            .with_min_len(ROW_CHUNK)
            .map(|r| {
                let mut acc: Vec<(usize, C64)> = Vec::new();
                for (k, a) in self.row(r) {
                    for (c, b) in other.row(k) {
                        acc.push((c, a * b));
                    }
                }
                acc.sort_by_key(|e| e.0);
                let mut cols = Vec::with_capacity(acc.len());
                let mut vals: Vec<C64> = Vec::with_capacity(acc.len());
                for (c, v) in acc {
                    if cols.last() == Some(&c) {
                        *vals.last_mut().unwrap() += v;
                    } else {
                        cols.push(c);
                        vals.push(v);
                    }
                }
                let (cols, vals): (Vec<_>, Vec<_>) =
                    cols.into_iter().zip(vals).filter(|(_, v)| *v != ZERO).unzip();
                (cols, vals)
            })
            .collect();
        let total = rows.iter().try_fold(0usize, |acc, (c, _)| acc.checked_add(c.len()));
        let total = total.ok_or(OpError::FillOverflow)?;
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::with_capacity(total);
        let mut vals = Vec::with_capacity(total);
        for (c, v) in rows {
            cols.extend(c);
            vals.extend(v);
            row_ptr.push(cols.len());
        }
        Ok(Self { fingerprint: self.fingerprint, dim: n, row_ptr, cols, vals, hermitian_hint: None })
    }

    /// `X + X^dagger`, flagged Hermitian.
    pub fn plus_hc(&self) -> Self {
        let mut out = self.add(&self.adjoint()).expect("same space");
        out.hermitian_hint = Some(true);
        out
    }

    /// Max entrywise `|A - A^dagger|`, exact.
    pub fn hermiticity_defect_exact(&self) -> f64 {
        let diff = self.sub(&self.adjoint()).expect("same space");
        diff.vals.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }

    pub fn check_hermitian(&self, tol: f64) -> Result<(), OpError> {
        let defect = self.hermiticity_defect_exact();
        if defect <= tol {
            Ok(())
        } else {
            Err(OpError::NotHermitian { defect })
        }
    }

    /// Max entrywise `|A - B|`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, OpError> {
        let d = self.sub(other)?;
        Ok(d.vals.iter().fold(0.0f64, |m, v| m.max(v.norm())))
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector, OpError> {
        check_fp(self.fingerprint, psi.fingerprint)?;
        let mut out = vec![ZERO; self.dim];
        self.apply_into(&psi.amplitudes, &mut out);
        Ok(StateVector { fingerprint: self.fingerprint, amplitudes: out })
    }

    /// `<psi|A|psi>`. Operators flagged Hermitian must give a real value.
    pub fn expectation(&self, psi: &StateVector) -> Result<C64, OpError> {
        check_fp(self.fingerprint, psi.fingerprint)?;
        let n = psi.norm();
        if (n - 1.0).abs() > 1e-6 {
            log::warn!("expectation on a state with norm {n}");
        }
        let value: C64 = psi
            .amplitudes
            .par_chunks(ROW_CHUNK)
            .enumerate()
            .map(|(chunk, amps)| {
                let start = chunk * ROW_CHUNK;
                let mut acc = ZERO;
                for (off, a) in amps.iter().enumerate() {
                    let r = start + off;
                    let mut row = ZERO;
                    for (c, v) in self.row(r) {
                        row += v * psi.amplitudes[c];
                    }
                    acc += a.conj() * row;
                }
                acc
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(ZERO, |acc, z| acc + z);
        if self.hermitian_hint == Some(true) && value.im.abs() > 1e-9 * (1.0 + value.re.abs()) {
            return Err(OpError::ComplexExpectation { re: value.re, im: value.im });
        }
        Ok(value)
    }

    /// Writes the operator in Matrix Market coordinate format (1-based).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate complex general")?;
        writeln!(w, "{} {} {}", self.dim, self.dim, self.nnz())?;
        for (r, c, v) in self.triplets() {
            writeln!(w, "{} {} {:.17e} {:.17e}", r + 1, c + 1, v.re, v.im)?;
        }
        Ok(())
    }
}

impl LinearOperator for SparseOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        y.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(chunk, out)| {
            let start = chunk * ROW_CHUNK;
            for (off, slot) in out.iter_mut().enumerate() {
                let r = start + off;
                let mut acc = ZERO;
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += self.vals[k] * x[self.cols[k]];
                }
                *slot = acc;
            }
        });
    }

    fn hermiticity_defect(&self) -> f64 {
        self.hermiticity_defect_exact()
    }
}

fn boson_cutoff(space: &SpaceSpec, label: &str) -> Result<(usize, usize), OpError> {
    let k = space.position(label)?;
    match space.subsystems()[k].kind {
        SubsystemKind::Boson { cutoff } => Ok((k, cutoff)),
        SubsystemKind::TwoLevel => Err(OpError::WrongKind {
            label: label.to_string(),
            expected: "boson mode",
            found: "two-level system",
        }),
    }
}

fn two_level(space: &SpaceSpec, label: &str) -> Result<usize, OpError> {
    let k = space.position(label)?;
    match space.subsystems()[k].kind {
        SubsystemKind::TwoLevel => Ok(k),
        SubsystemKind::Boson { .. } => Err(OpError::WrongKind {
            label: label.to_string(),
            expected: "two-level system",
            found: "boson mode",
        }),
    }
}

/// Local `(cutoff+1)^2` annihilation matrix, `<n-1|a|n> = sqrt(n)`.
pub(crate) fn local_lower(cutoff: usize) -> Vec<Vec<C64>> {
    let d = cutoff + 1;
    let mut m = vec![vec![ZERO; d]; d];
    for n in 1..d {
        m[n - 1][n] = C64::new((n as f64).sqrt(), 0.0);
    }
    m
}

pub(crate) fn local_pauli(axis: PauliAxis) -> Vec<Vec<C64>> {
    // basis order |g> = 0, |e> = 1; sigma_z |g> = -|g>
    match axis {
        PauliAxis::X => vec![vec![ZERO, ONE], vec![ONE, ZERO]],
        PauliAxis::Y => vec![vec![ZERO, I], vec![-I, ZERO]],
        PauliAxis::Z => vec![vec![-ONE, ZERO], vec![ZERO, ONE]],
    }
}

/// Annihilation operator of boson mode `label`, identity elsewhere.
pub fn lower(space: &SpaceSpec, label: &str) -> Result<SparseOperator, OpError> {
    let (k, cutoff) = boson_cutoff(space, label)?;
    Ok(SparseOperator::embed_local(space, k, &local_lower(cutoff), None))
}

/// Creation operator; the exact adjoint of [`lower`].
pub fn raise(space: &SpaceSpec, label: &str) -> Result<SparseOperator, OpError> {
    Ok(lower(space, label)?.adjoint())
}

/// `a^dagger a` for boson mode `label`.
pub fn number(space: &SpaceSpec, label: &str) -> Result<SparseOperator, OpError> {
    let (k, cutoff) = boson_cutoff(space, label)?;
    let d = cutoff + 1;
    let mut m = vec![vec![ZERO; d]; d];
    for (n, row) in m.iter_mut().enumerate() {
        row[n] = C64::new(n as f64, 0.0);
    }
    Ok(SparseOperator::embed_local(space, k, &m, Some(true)))
}

pub fn pauli(space: &SpaceSpec, label: &str, axis: PauliAxis) -> Result<SparseOperator, OpError> {
    let k = two_level(space, label)?;
    Ok(SparseOperator::embed_local(space, k, &local_pauli(axis), Some(true)))
}

/// Excited-state projector `(1 + sigma_z) / 2`.
pub fn excited_projector(space: &SpaceSpec, label: &str) -> Result<SparseOperator, OpError> {
    let k = two_level(space, label)?;
    let m = vec![vec![ZERO, ZERO], vec![ZERO, ONE]];
    Ok(SparseOperator::embed_local(space, k, &m, Some(true)))
}

/// `AB - BA`.
pub fn commutator(a: &SparseOperator, b: &SparseOperator) -> Result<SparseOperator, OpError> {
    a.mul(b)?.sub(&b.mul(a)?)
}

/// Expression tree over operators evaluated by [`compose`].
#[derive(Debug, Clone)]
pub enum OpTree {
    Leaf(SparseOperator),
    Add(Vec<OpTree>),
    /// Left-to-right operator product.
    Mul(Vec<OpTree>),
    Scale(C64, Box<OpTree>),
    Adjoint(Box<OpTree>),
}

pub fn compose(tree: &OpTree) -> Result<SparseOperator, OpError> {
    match tree {
        OpTree::Leaf(op) => Ok(op.clone()),
        OpTree::Add(items) | OpTree::Mul(items) => {
            let mut it = items.iter();
            let mut acc = compose(it.next().ok_or(OpError::EmptyExpression)?)?;
            for item in it {
                let rhs = compose(item)?;
                acc = if matches!(tree, OpTree::Add(_)) { acc.add(&rhs)? } else { acc.mul(&rhs)? };
            }
            Ok(acc)
        }
        OpTree::Scale(c, inner) => Ok(compose(inner)?.scale(*c)),
        OpTree::Adjoint(inner) => Ok(compose(inner)?.adjoint()),
    }
}

pub fn expectation(op: &SparseOperator, psi: &StateVector) -> Result<C64, OpError> {
    op.expectation(psi)
}

pub fn apply(op: &SparseOperator, psi: &StateVector) -> Result<StateVector, OpError> {
    op.apply(psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hspace::{build_space, SubsystemSpec};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
        a.kronecker(b)
    }

    fn dense_local(m: &[Vec<C64>]) -> DMatrix<C64> {
        DMatrix::from_fn(m.len(), m.len(), |r, c| m[r][c])
    }

    fn max_diff(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, z| m.max(z.norm()))
    }

    fn rand_state(space: &SpaceSpec, rng: &mut impl Rng) -> StateVector {
        let amps = (0..space.total_dim()).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let mut s = StateVector::from_amplitudes(space, amps.collect()).unwrap();
        s.normalize();
        s
    }

    #[test]
    fn lower_matrix_elements() {
        let s = build_space(vec![SubsystemSpec::boson("a", 1)]).unwrap();
        let a = lower(&s, "a").unwrap().to_dense();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[ZERO, ONE, ZERO, ZERO]));
        let s = build_space(vec![SubsystemSpec::boson("a", 5)]).unwrap();
        assert_relative_eq!(lower(&s, "a").unwrap().get(2, 3).re, 3f64.sqrt());
        let e = build_space(vec![SubsystemSpec::two_level("e")]).unwrap();
        assert!(matches!(lower(&e, "e"), Err(OpError::WrongKind { .. })));
        assert!(matches!(lower(&s, "x"), Err(OpError::Space(SpaceError::UnknownLabel(_)))));
        assert!(matches!(pauli(&s, "a", PauliAxis::X), Err(OpError::WrongKind { .. })));
    }

    #[test]
    fn embedding_matches_kronecker() {
        let s = build_space(vec![SubsystemSpec::boson("a", 3), SubsystemSpec::boson("b", 3)]).unwrap();
        let la = dense_local(&local_lower(3));
        let id = DMatrix::<C64>::identity(4, 4);
        assert_eq!(max_diff(&lower(&s, "a").unwrap().to_dense(), &kron(&la, &id)), 0.0);
        assert_eq!(max_diff(&lower(&s, "b").unwrap().to_dense(), &kron(&id, &la)), 0.0);
        let s3 = build_space(vec![
            SubsystemSpec::boson("a", 2),
            SubsystemSpec::two_level("e"),
            SubsystemSpec::boson("b", 1),
        ])
        .unwrap();
        let sy = dense_local(&local_pauli(PauliAxis::Y));
        let expect = kron(&kron(&DMatrix::identity(3, 3), &sy), &DMatrix::identity(2, 2));
        assert_eq!(max_diff(&pauli(&s3, "e", PauliAxis::Y).unwrap().to_dense(), &expect), 0.0);
    }

    #[test]
    fn raise_is_adjoint_and_truncated_ccr() {
        let s = build_space(vec![SubsystemSpec::boson("a", 4), SubsystemSpec::two_level("e")]).unwrap();
        let a = lower(&s, "a").unwrap();
        let ad = raise(&s, "a").unwrap();
        assert_eq!(a.adjoint(), ad);
        assert_eq!(ad.adjoint(), a);
        let vac = StateVector::basis(&s, &[0, 0]).unwrap();
        assert_eq!(ad.apply(&vac).unwrap(), StateVector::basis(&s, &[1, 0]).unwrap());
        // [a, a^dagger] = I - (N+1)|N><N|
        let ccr = commutator(&a, &ad).unwrap().to_dense();
        let mut expect = DMatrix::<C64>::identity(10, 10);
        for e in 0..2 {
            let top = s.basis_index(&[4, e]).unwrap();
            expect[(top, top)] -= C64::new(5.0, 0.0);
        }
        assert!(max_diff(&ccr, &expect) < 1e-15);
    }

    #[test]
    fn pauli_algebra() {
        let s = build_space(vec![SubsystemSpec::boson("a", 1), SubsystemSpec::two_level("e")]).unwrap();
        let sx = pauli(&s, "e", PauliAxis::X).unwrap();
        let sy = pauli(&s, "e", PauliAxis::Y).unwrap();
        let sz = pauli(&s, "e", PauliAxis::Z).unwrap();
        assert_eq!(sx.mul(&sx).unwrap(), SparseOperator::identity(&s).with_hermitian_hint(None));
        let lhs = commutator(&sz, &sx).unwrap();
        assert_eq!(lhs.max_abs_diff(&sy.scale(2.0 * I)).unwrap(), 0.0);
        let n_hat = SparseOperator::identity(&s).add(&sz).unwrap().scale(C64::new(0.5, 0.0));
        let g = StateVector::basis(&s, &[1, 0]).unwrap();
        assert_eq!(n_hat.apply(&g).unwrap().norm(), 0.0);
        assert_eq!(n_hat.max_abs_diff(&excited_projector(&s, "e").unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn composition_and_adjoint_of_products() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let s = build_space(vec![SubsystemSpec::boson("a", 7), SubsystemSpec::two_level("e"), SubsystemSpec::two_level("f")]).unwrap();
        let n = s.total_dim();
        for _ in 0..5 {
            let mut random_op = || {
                let trip: Vec<_> = (0..3 * n)
                    .map(|_| {
                        (rng.random_range(0..n), rng.random_range(0..n), C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    })
                    .collect();
                SparseOperator::from_triplets(&s, trip).unwrap()
            };
            let a = random_op();
            let b = random_op();
            let ab = a.mul(&b).unwrap();
            assert!(max_diff(&ab.to_dense(), &(a.to_dense() * b.to_dense())) < 1e-12);
            let lhs = ab.adjoint();
            let rhs = b.adjoint().mul(&a.adjoint()).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
            let id = SparseOperator::identity(&s);
            assert_eq!(a.mul(&id).unwrap().max_abs_diff(&a).unwrap(), 0.0);
            assert_eq!(a.adjoint().adjoint(), a);
            assert_eq!(commutator(&a, &a).unwrap().nnz(), 0);
            let tree = OpTree::Add(vec![
                OpTree::Mul(vec![OpTree::Leaf(a.clone()), OpTree::Leaf(b.clone())]),
                OpTree::Scale(C64::new(0.0, 2.0), Box::new(OpTree::Adjoint(Box::new(OpTree::Leaf(a.clone()))))),
            ]);
            let dense = a.to_dense() * b.to_dense() + a.to_dense().adjoint() * C64::new(0.0, 2.0);
            assert!(max_diff(&compose(&tree).unwrap().to_dense(), &dense) < 1e-12);
        }
    }

    #[test]
    fn composite_operator_matches_dense() {
        // sz_A c3 c2A + h.c. on a minimal space
        let s = build_space(vec![
            SubsystemSpec::boson("idler_A", 1),
            SubsystemSpec::boson("signal", 1),
            SubsystemSpec::two_level("electron_A"),
        ])
        .unwrap();
        let op = pauli(&s, "electron_A", PauliAxis::Z)
            .unwrap()
            .mul(&lower(&s, "signal").unwrap())
            .unwrap()
            .mul(&lower(&s, "idler_A").unwrap())
            .unwrap()
            .plus_hc();
        let a = dense_local(&local_lower(1));
        let id2 = DMatrix::<C64>::identity(2, 2);
        let sz = dense_local(&local_pauli(PauliAxis::Z));
        let x = kron(&kron(&id2, &id2), &sz) * kron(&kron(&id2, &a), &id2) * kron(&kron(&a, &id2), &id2);
        let dense = &x + x.adjoint();
        assert_eq!(max_diff(&op.to_dense(), &dense), 0.0);
        assert!(op.check_hermitian(HERMITIAN_TOL).is_ok());
        assert_eq!(op.hermitian_hint(), Some(true));
    }

    #[test]
    fn apply_matches_dense_and_identity() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let s = build_space(vec![SubsystemSpec::boson("a", 9), SubsystemSpec::boson("b", 9), SubsystemSpec::two_level("e")]).unwrap();
        let psi = rand_state(&s, &mut rng);
        let id = SparseOperator::identity(&s);
        assert_eq!(id.apply(&psi).unwrap(), psi);
        let op = lower(&s, "a")
            .unwrap()
            .mul(&raise(&s, "b").unwrap())
            .unwrap()
            .add(&pauli(&s, "e", PauliAxis::Y).unwrap())
            .unwrap();
        let dense = op.to_dense() * nalgebra::DVector::from_column_slice(psi.amplitudes());
        let got = op.apply(&psi).unwrap();
        let err = got.amplitudes().iter().zip(dense.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        assert!(err < 1e-12);
    }

    #[test]
    fn coherent_eigenrelation_with_tail_bound() {
        let cutoff = 30;
        let s = build_space(vec![SubsystemSpec::boson("a", cutoff)]).unwrap();
        let alpha = C64::new(1.2, -0.7);
        let mut amps = vec![ZERO; cutoff + 1];
        let mut c = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
        for (n, slot) in amps.iter_mut().enumerate() {
            *slot = c;
            c = c * alpha / ((n + 1) as f64).sqrt();
        }
        let psi = StateVector::from_amplitudes(&s, amps.clone()).unwrap();
        let a_psi = lower(&s, "a").unwrap().apply(&psi).unwrap();
        let err: f64 = a_psi
            .amplitudes()
            .iter()
            .zip(&amps)
            .map(|(x, y)| (x - alpha * y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        // only the top amplitude breaks the eigenrelation
        let tail = (alpha * amps[cutoff]).norm();
        assert!(err <= tail + 1e-14);
        assert!(tail < 1e-12);
    }

    #[test]
    fn expectation_checks() {
        let s = build_space(vec![SubsystemSpec::boson("a", 3), SubsystemSpec::two_level("e")]).unwrap();
        let vac = StateVector::basis(&s, &[0, 0]).unwrap();
        assert_eq!(number(&s, "a").unwrap().expectation(&vac).unwrap(), ZERO);
        // an operator wrongly flagged Hermitian is caught
        let bad = lower(&s, "a").unwrap().scale(I).with_hermitian_hint(Some(true));
        let h = C64::new(0.5f64.sqrt(), 0.0);
        let mut amps = vec![ZERO; 8];
        amps[s.basis_index(&[0, 0]).unwrap()] = h;
        amps[s.basis_index(&[1, 0]).unwrap()] = h;
        let psi = StateVector::from_amplitudes(&s, amps).unwrap();
        assert!(matches!(bad.expectation(&psi), Err(OpError::ComplexExpectation { .. })));
        let other = build_space(vec![SubsystemSpec::boson("a", 3), SubsystemSpec::two_level("f")]).unwrap();
        let wrong = StateVector::basis(&other, &[0, 0]).unwrap();
        assert!(matches!(number(&s, "a").unwrap().expectation(&wrong), Err(OpError::FingerprintMismatch(..))));
        assert!(matches!(number(&s, "a").unwrap().add(&number(&other, "a").unwrap()), Err(OpError::FingerprintMismatch(..))));
    }

    #[test]
    fn linearity_of_apply() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let s = build_space(vec![SubsystemSpec::boson("a", 4), SubsystemSpec::two_level("e")]).unwrap();
        let op = lower(&s, "a").unwrap().mul(&pauli(&s, "e", PauliAxis::X).unwrap()).unwrap();
        let x = rand_state(&s, &mut rng);
        let y = rand_state(&s, &mut rng);
        let (p, q) = (C64::new(0.3, -1.1), C64::new(-2.0, 0.4));
        let combo: Vec<C64> = x.amplitudes().iter().zip(y.amplitudes()).map(|(a, b)| p * a + q * b).collect();
        let lhs = op.apply(&StateVector::from_amplitudes(&s, combo).unwrap()).unwrap();
        let ox = op.apply(&x).unwrap();
        let oy = op.apply(&y).unwrap();
        for i in 0..s.total_dim() {
            assert!((lhs.amplitudes()[i] - (p * ox.amplitudes()[i] + q * oy.amplitudes()[i])).norm() < 1e-14);
        }
    }

    #[test]
    fn matrix_market_dump() {
        let s = build_space(vec![SubsystemSpec::boson("a", 2)]).unwrap();
        let mut buf = Vec::new();
        lower(&s, "a").unwrap().write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate complex general");
        assert_eq!(lines[1], "3 3 2");
        assert!(lines[2].starts_with("1 2 1.0"));
    }

    #[test]
    fn probe_defect_flags_non_hermitian() {
        let s = build_space(vec![SubsystemSpec::boson("a", 4)]).unwrap();
        struct Wrap(SparseOperator);
        impl LinearOperator for Wrap {
            fn dim(&self) -> usize {
                self.0.dim
            }
            fn fingerprint(&self) -> u64 {
                self.0.fingerprint
            }
            fn apply_into(&self, x: &[C64], y: &mut [C64]) {
                self.0.apply_into(x, y)
            }
        }
        assert!(Wrap(lower(&s, "a").unwrap()).hermiticity_defect() > 1e-3);
        assert!(Wrap(lower(&s, "a").unwrap().plus_hc()).hermiticity_defect() < 1e-15);
    }
}
