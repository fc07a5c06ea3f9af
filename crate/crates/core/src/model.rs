//! Hamiltonians of the single medium and of the two interferometer
//! configurations.
//!
//! A single medium couples pump (1), idler (2) and signal (3) photons to a
//! two-level electronic system and one phonon mode:
//!
//! ```text
//! H0 = W1 n1 + W2 n2 + W3 n3 + w a'a + n_e (nu (a' + a) + eps) + M sum_i (c_i' + c_i)
//! n_e = (1 + sz) / 2
//! M   = (mu + tau (a' + a)) sx + tau (a' + a)
//! ```
//!
//! In configuration C1 both media couple to one shared signal mode; in C2
//! each medium has its own signal mode and the Hamiltonian is a sum of two
//! independent copies of `H0`. No rotating-wave approximation is made.
//!
//! A [`Hamiltonian`] keeps its named terms, and can be materialised as a
//! [`SparseOperator`] or applied matrix-free for spaces too large to store.

use std::fmt;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hspace::{SpaceError, SpaceSpec, SubsystemKind, SubsystemSpec};
use crate::opalg::{LinearOperator, OpError, PauliAxis, SparseOperator, C64, HERMITIAN_TOL, I, ONE, ZERO};
use crate::opdsl::SymbolTable;

const ROW_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("subsystem `{label}` must be a {expected}")]
    WrongKind { label: String, expected: &'static str },
    #[error("space does not have the {0} layout: {1}")]
    WrongTopology(Topology, String),
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParam { name: &'static str, value: f64, reason: &'static str },
    #[error("built Hamiltonian is not Hermitian (defect {0:e})")]
    NotHermitian(f64),
}

/// Couplings and frequencies in units of the phonon frequency, `hbar = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Phonon frequency.
    pub omega: f64,
    /// Pump frequency.
    pub omega1: f64,
    /// Idler frequency.
    pub omega2: f64,
    /// Signal frequency.
    pub omega3: f64,
    /// Bare transition dipole.
    pub mu: f64,
    /// Phonon-modulated dipole.
    pub tau: f64,
    /// Electron-phonon coupling. Not fixed by the reference parameter set;
    /// the default of 1.0 is a modelling choice.
    pub nu: f64,
    /// Electronic gap.
    pub epsilon: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { omega: 1.0, omega1: 13.5, omega2: 12.5, omega3: 1.0, mu: 0.5, tau: 0.1, nu: 1.0, epsilon: 27.0 }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            ("omega", self.omega),
            ("omega1", self.omega1),
            ("omega2", self.omega2),
            ("omega3", self.omega3),
            ("mu", self.mu),
            ("tau", self.tau),
            ("nu", self.nu),
            ("epsilon", self.epsilon),
        ];
        for (name, value) in all {
            if !value.is_finite() {
                return Err(ModelError::InvalidParam { name, value, reason: "must be finite" });
            }
        }
        if self.omega <= 0.0 {
            return Err(ModelError::InvalidParam { name: "omega", value: self.omega, reason: "must be > 0" });
        }
        for (name, value) in [("omega1", self.omega1), ("omega2", self.omega2), ("omega3", self.omega3)] {
            if value < 0.0 {
                return Err(ModelError::InvalidParam { name, value, reason: "must be >= 0" });
            }
        }
        Ok(())
    }

    /// Same parameters with all light-matter couplings switched off.
    pub fn decoupled(&self) -> Self {
        Self { mu: 0.0, tau: 0.0, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topology {
    #[serde(rename = "single")]
    SingleSite,
    C1,
    C2,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::SingleSite => "single",
            Topology::C1 => "C1",
            Topology::C2 => "C2",
        })
    }
}

/// Fock cutoffs per mode class (highest retained occupation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cutoffs {
    pub pump: usize,
    pub idler: usize,
    pub signal: usize,
    pub phonon: usize,
}

impl Cutoffs {
    pub fn uniform(n: usize) -> Self {
        Self { pump: n, idler: n, signal: n, phonon: n }
    }
}

/// Subsystem labels of one medium and the photon modes it couples to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteLabels {
    pub pump: String,
    pub idler: String,
    pub signal: String,
    pub phonon: String,
    pub electron: String,
}

impl SiteLabels {
    fn suffixed(site: &str, signal: &str) -> Self {
        Self {
            pump: format!("pump_{site}"),
            idler: format!("idler_{site}"),
            signal: signal.to_string(),
            phonon: format!("phonon_{site}"),
            electron: format!("electron_{site}"),
        }
    }

    pub fn single() -> Self {
        Self {
            pump: "pump".into(),
            idler: "idler".into(),
            signal: "signal".into(),
            phonon: "phonon".into(),
            electron: "electron".into(),
        }
    }
}

/// Mode naming and ordering for one topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteLayout {
    pub topology: Topology,
    pub sites: Vec<SiteLabels>,
}

impl SiteLayout {
    pub fn new(topology: Topology) -> Self {
        let sites = match topology {
            Topology::SingleSite => vec![SiteLabels::single()],
            Topology::C1 => vec![SiteLabels::suffixed("A", "signal"), SiteLabels::suffixed("B", "signal")],
            Topology::C2 => vec![SiteLabels::suffixed("A", "signal_A"), SiteLabels::suffixed("B", "signal_B")],
        };
        Self { topology, sites }
    }

    /// Signal mode labels, each listed once.
    pub fn signal_labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.sites {
            if !out.contains(&s.signal.as_str()) {
                out.push(&s.signal);
            }
        }
        out
    }

    /// Subsystem list in basis order: pumps, idlers, signal(s), phonons,
    /// electrons.
    pub fn subsystems(&self, cutoffs: &Cutoffs) -> Vec<SubsystemSpec> {
        let mut v = Vec::new();
        v.extend(self.sites.iter().map(|s| SubsystemSpec::boson(&s.pump, cutoffs.pump)));
        v.extend(self.sites.iter().map(|s| SubsystemSpec::boson(&s.idler, cutoffs.idler)));
        v.extend(self.signal_labels().into_iter().map(|l| SubsystemSpec::boson(l, cutoffs.signal)));
        v.extend(self.sites.iter().map(|s| SubsystemSpec::boson(&s.phonon, cutoffs.phonon)));
        v.extend(self.sites.iter().map(|s| SubsystemSpec::two_level(&s.electron)));
        v
    }

    pub fn space(&self, cutoffs: &Cutoffs) -> Result<SpaceSpec, SpaceError> {
        SpaceSpec::new(self.subsystems(cutoffs))
    }

    /// DSL identifiers: `c1A`/`c2A`/`c3` (`c3A` in C2), `a_A`, `sx_A`...;
    /// single-site layouts drop the site suffix. Raw labels also resolve.
    pub fn symbol_table(&self, space: &SpaceSpec) -> SymbolTable {
        let mut t = SymbolTable::from_labels(space);
        for site in &self.sites {
            let (suffix, underscore) = match self.topology {
                Topology::SingleSite => (String::new(), String::new()),
                _ => {
                    let s = site.pump.trim_start_matches("pump_").to_string();
                    (s.clone(), format!("_{s}"))
                }
            };
            t.insert_mode(&format!("c1{suffix}"), &site.pump);
            t.insert_mode(&format!("c2{suffix}"), &site.idler);
            let signal_ident = if self.topology == Topology::C1 { "c3".to_string() } else { format!("c3{suffix}") };
            t.insert_mode(&signal_ident, &site.signal);
            t.insert_mode(&format!("a{underscore}"), &site.phonon);
            t.insert_pauli(&format!("sx{underscore}"), &site.electron, PauliAxis::X);
            t.insert_pauli(&format!("sy{underscore}"), &site.electron, PauliAxis::Y);
            t.insert_pauli(&format!("sz{underscore}"), &site.electron, PauliAxis::Z);
        }
        t
    }

    /// Checks that `space` holds every subsystem of this layout with the
    /// right kind.
    pub fn check_space(&self, space: &SpaceSpec) -> Result<(), ModelError> {
        for site in &self.sites {
            for label in [&site.pump, &site.idler, &site.signal, &site.phonon] {
                match space.subsystem(label) {
                    Ok(s) if s.kind.is_boson() => {}
                    Ok(_) => return Err(ModelError::WrongKind { label: label.clone(), expected: "boson mode" }),
                    Err(_) => return Err(ModelError::WrongTopology(self.topology, format!("missing `{label}`"))),
                }
            }
            match space.subsystem(&site.electron) {
                Ok(s) if s.kind == SubsystemKind::TwoLevel => {}
                Ok(_) => {
                    return Err(ModelError::WrongKind { label: site.electron.clone(), expected: "two-level system" })
                }
                Err(_) => {
                    return Err(ModelError::WrongTopology(self.topology, format!("missing `{}`", site.electron)))
                }
            }
        }
        if self.topology == Topology::C1 && space.subsystem("signal_A").is_ok() {
            return Err(ModelError::WrongTopology(self.topology, "per-site signal modes present".into()));
        }
        Ok(())
    }
}

/// Local single-subsystem factor of a monomial. Every factor maps a basis
/// state to at most one basis state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LocalFactor {
    Lower,
    Raise,
    Number,
    SigmaX,
    SigmaY,
    SigmaZ,
    /// `(1 + sz) / 2`
    Excited,
}

impl LocalFactor {
    /// For local target state `m`, the source state and matrix element.
    fn source(self, m: usize, dim: usize) -> Option<(usize, C64)> {
        let re = |v: f64| C64::new(v, 0.0);
        match self {
            LocalFactor::Lower => (m + 1 < dim).then(|| (m + 1, re(((m + 1) as f64).sqrt()))),
            LocalFactor::Raise => (m >= 1).then(|| (m - 1, re((m as f64).sqrt()))),
            LocalFactor::Number => (m > 0).then(|| (m, re(m as f64))),
            LocalFactor::SigmaX => Some((1 - m, ONE)),
            LocalFactor::SigmaY => Some(if m == 0 { (1, I) } else { (0, -I) }),
            LocalFactor::SigmaZ => Some((m, if m == 0 { -ONE } else { ONE })),
            LocalFactor::Excited => (m == 1).then_some((1, ONE)),
        }
    }

    fn is_diagonal(self) -> bool {
        matches!(self, LocalFactor::Number | LocalFactor::SigmaZ | LocalFactor::Excited)
    }

    fn symbol(self) -> &'static str {
        match self {
            LocalFactor::Lower => "a",
            LocalFactor::Raise => "a'",
            LocalFactor::Number => "n",
            LocalFactor::SigmaX => "sx",
            LocalFactor::SigmaY => "sy",
            LocalFactor::SigmaZ => "sz",
            LocalFactor::Excited => "n_e",
        }
    }
}

/// `coeff * prod_k factor_k` over distinct subsystems.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coeff: C64,
    pub factors: Vec<(usize, LocalFactor)>,
}

/// A named physical contribution to the Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub name: String,
    pub monomials: Vec<Monomial>,
}

#[derive(Debug, Clone)]
struct CompiledFactor {
    k: usize,
    /// Indexed by local target state: (index offset to source, element).
    table: Vec<(isize, C64)>,
}

#[derive(Debug, Clone)]
struct CompiledMonomial {
    coeff: C64,
    factors: Vec<CompiledFactor>,
}

/// Off-diagonal part of one medium in factored form:
/// `M (sum_m c_m + c_m') + nu n_e (a' + a)` with
/// `M = (mu + tau (a' + a)) sx + tau (a' + a)`.
#[derive(Debug, Clone)]
struct SiteStencil {
    mu: f64,
    tau: f64,
    nu: f64,
    electron: usize,
    phonon: usize,
    modes: Vec<usize>,
}

/// Per-call work space of the factored apply.
#[derive(Default)]
struct Scratch(Mutex<Vec<C64>>);

impl Clone for Scratch {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl fmt::Debug for Scratch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Scratch")
    }
}

/// Term-structured Hamiltonian on a fixed space.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    space: SpaceSpec,
    terms: Vec<Term>,
    diagonal: Vec<C64>,
    off_diagonal: Vec<CompiledMonomial>,
    stencil: Option<Vec<SiteStencil>>,
    scratch: Scratch,
}

impl Hamiltonian {
    pub fn from_terms(space: &SpaceSpec, terms: Vec<Term>) -> Self {
        let compile = |m: &Monomial| CompiledMonomial {
            coeff: m.coeff,
            factors: m
                .factors
                .iter()
                .map(|&(k, f)| {
                    let dim = space.dims()[k];
                    let stride = space.strides()[k] as isize;
                    let table = (0..dim)
                        .map(|t| match f.source(t, dim) {
                            Some((src, v)) => ((src as isize - t as isize) * stride, v),
                            None => (0, ZERO),
                        })
                        .collect();
                    CompiledFactor { k, table }
                })
                .collect(),
        };
        let all: Vec<&Monomial> = terms.iter().flat_map(|t| &t.monomials).filter(|m| m.coeff != ZERO).collect();
        let diag_monos: Vec<CompiledMonomial> =
            all.iter().filter(|m| m.factors.iter().all(|(_, f)| f.is_diagonal())).map(|m| compile(m)).collect();
        let off_diagonal: Vec<CompiledMonomial> =
            all.iter().filter(|m| !m.factors.iter().all(|(_, f)| f.is_diagonal())).map(|m| compile(m)).collect();
        let n = space.total_dim();
        let mut diagonal = vec![ZERO; n];
        diagonal.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(chunk, out)| {
            let start = chunk * ROW_CHUNK;
            let mut occ = space.basis_unindex(start).expect("in range");
            for slot in out.iter_mut() {
                let mut acc = ZERO;
                for m in &diag_monos {
                    let mut v = m.coeff;
                    for f in &m.factors {
                        v *= f.table[occ[f.k]].1;
                    }
                    acc += v;
                }
                *slot = acc;
                odometer_step(&mut occ, space.dims());
            }
        });
        Self { space: space.clone(), terms, diagonal, off_diagonal, stencil: None, scratch: Scratch::default() }
    }

    /// Whether the fast factored apply is in use.
    pub fn is_factored(&self) -> bool {
        self.stencil.is_some()
    }

    fn with_stencil(mut self, sites: &[SiteLabels], params: &[&ModelParams]) -> Result<Self, ModelError> {
        let mut stencil = Vec::new();
        for (site, p) in sites.iter().zip(params) {
            stencil.push(SiteStencil {
                mu: p.mu,
                tau: p.tau,
                nu: p.nu,
                electron: self.space.position(&site.electron)?,
                phonon: self.space.position(&site.phonon)?,
                modes: [&site.pump, &site.idler, &site.signal]
                    .into_iter()
                    .map(|l| self.space.position(l))
                    .collect::<Result<_, _>>()?,
            });
        }
        self.stencil = Some(stencil);
        Ok(self)
    }

    /// Factored apply: first `u_s = sum_m (c_m + c_m') x` for every site,
    /// then the matter factors and the diagonal in a second pass.
    fn apply_factored(&self, sites: &[SiteStencil], x: &[C64], y: &mut [C64]) {
        let n = self.space.total_dim();
        let dims = self.space.dims();
        let strides = self.space.strides();
        let ns = sites.len();
        let max_dim = dims.iter().copied().max().unwrap_or(1);
        let sq: Vec<f64> = (0..=max_dim).map(|k| (k as f64).sqrt()).collect();
        let mut guard = self.scratch.0.lock().unwrap_or_else(|e| e.into_inner());
        if guard.len() != n * ns {
            *guard = vec![ZERO; n * ns];
        }
        let u: &mut [C64] = &mut guard;
        // (c + c') z at row i
        let ladder = |z: &[C64], i: usize, m: usize, k: usize| -> C64 {
            let s = strides[k];
            let mut acc = ZERO;
            if m > 0 {
                acc += z[i - s] * sq[m];
            }
            if m + 1 < dims[k] {
                acc += z[i + s] * sq[m + 1];
            }
            acc
        };
        u.par_chunks_mut(ROW_CHUNK * ns).enumerate().for_each(|(chunk, out)| {
            let start = chunk * ROW_CHUNK;
            let mut occ = self.space.basis_unindex(start).expect("in range");
            for (off, row) in out.chunks_mut(ns).enumerate() {
                let i = start + off;
                for (slot, site) in row.iter_mut().zip(sites) {
                    let mut acc = ZERO;
                    for &k in &site.modes {
                        acc += ladder(x, i, occ[k], k);
                    }
                    *slot = acc;
                }
                odometer_step(&mut occ, dims);
            }
        });
        let u: &[C64] = u;
        y.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(chunk, out)| {
            let start = chunk * ROW_CHUNK;
            let mut occ = self.space.basis_unindex(start).expect("in range");
            for (off, slot) in out.iter_mut().enumerate() {
                let i = start + off;
                let mut acc = self.diagonal[i] * x[i];
                for (s, site) in sites.iter().enumerate() {
                    let e = occ[site.electron];
                    let se = strides[site.electron];
                    let flipped = if e == 0 { i + se } else { i - se };
                    let ph = site.phonon;
                    let m = occ[ph];
                    let sp = strides[ph];
                    // phonon ladder on the site's slice of the scratch
                    let pu = |j: usize| -> C64 {
                        let mut acc = ZERO;
                        if m > 0 {
                            acc += u[(j - sp) * ns + s] * sq[m];
                        }
                        if m + 1 < dims[ph] {
                            acc += u[(j + sp) * ns + s] * sq[m + 1];
                        }
                        acc
                    };
                    acc += u[flipped * ns + s] * site.mu + (pu(flipped) + pu(i)) * site.tau;
                    if e == 1 {
                        acc += ladder(x, i, m, ph) * site.nu;
                    }
                }
                *slot = acc;
                odometer_step(&mut occ, dims);
            }
        });
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn term_names(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.name.as_str()).collect()
    }

    /// Upper bound on stored nonzeros of the sparse form.
    pub fn nnz_estimate(&self) -> usize {
        self.space.total_dim() * (1 + self.off_diagonal.len())
    }

    pub fn to_sparse(&self) -> SparseOperator {
        let n = self.space.total_dim();
        let dims = self.space.dims().to_vec();
        let rows: Vec<(Vec<usize>, Vec<usize>, Vec<C64>)> = (0..n.div_ceil(ROW_CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let start = chunk * ROW_CHUNK;
                let end = (start + ROW_CHUNK).min(n);
                let mut occ = self.space.basis_unindex(start).expect("in range");
                let mut cols = Vec::new();
                let mut vals = Vec::new();
                let mut counts = Vec::with_capacity(end - start);
                let mut row: Vec<(usize, C64)> = Vec::new();
                for i in start..end {
                    row.clear();
                    if self.diagonal[i] != ZERO {
                        row.push((i, self.diagonal[i]));
                    }
                    for m in &self.off_diagonal {
                        if let Some((j, v)) = eval_monomial(m, i, &occ) {
                            row.push((j, v));
                        }
                    }
                    row.sort_by_key(|e| e.0);
                    let before = cols.len();
                    for &(c, v) in row.iter() {
                        if cols.len() > before && *cols.last().unwrap() == c {
                            *vals.last_mut().unwrap() += v;
                        } else {
                            cols.push(c);
                            vals.push(v);
                        }
                    }
                    // drop exact cancellations
                    let mut w = before;
                    for r in before..cols.len() {
                        if vals[r] != ZERO {
                            cols[w] = cols[r];
                            vals[w] = vals[r];
                            w += 1;
                        }
                    }
                    cols.truncate(w);
                    vals.truncate(w);
                    counts.push(w - before);
                    odometer_step(&mut occ, &dims);
                }
                (counts, cols, vals)
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0usize);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (counts, c, v) in rows {
            for k in counts {
                row_ptr.push(row_ptr.last().unwrap() + k);
            }
            cols.extend(c);
            vals.extend(v);
        }
        SparseOperator::from_csr_unchecked(self.space.fingerprint(), n, row_ptr, cols, vals, Some(true))
    }

    /// Sparse form of a single named term.
    pub fn term_operator(&self, name: &str) -> Option<SparseOperator> {
        let term = self.terms.iter().find(|t| t.name == name)?;
        let single = Hamiltonian::from_terms(&self.space, vec![term.clone()]);
        Some(single.to_sparse().with_hermitian_hint(None))
    }

    /// Human-readable listing of every term and its monomials.
    pub fn describe_terms(&self) -> String {
        let mut out = String::new();
        for t in &self.terms {
            out.push_str(&t.name);
            out.push('\n');
            for m in &t.monomials {
                let factors: Vec<String> = m
                    .factors
                    .iter()
                    .map(|(k, f)| format!("{}[{}]", f.symbol(), self.space.subsystems()[*k].label))
                    .collect();
                out.push_str(&format!("    ({:+}{:+}i) {}\n", m.coeff.re, m.coeff.im, factors.join(" ")));
            }
        }
        out
    }

    /// Verifies Hermiticity of the materialised operator, entrywise.
    pub fn check_hermitian(&self) -> Result<(), ModelError> {
        let defect = self.to_sparse().hermiticity_defect_exact();
        if defect <= HERMITIAN_TOL {
            Ok(())
        } else {
            Err(ModelError::NotHermitian(defect))
        }
    }
}

#[inline]
fn odometer_step(occ: &mut [usize], dims: &[usize]) {
    for k in (0..occ.len()).rev() {
        occ[k] += 1;
        if occ[k] < dims[k] {
            return;
        }
        occ[k] = 0;
    }
}

#[inline]
fn eval_monomial(m: &CompiledMonomial, row: usize, occ: &[usize]) -> Option<(usize, C64)> {
    let mut v = m.coeff;
    let mut j = row as isize;
    for f in &m.factors {
        let (delta, e) = f.table[occ[f.k]];
        if e == ZERO {
            return None;
        }
        v *= e;
        j += delta;
    }
    Some((j as usize, v))
}

impl LinearOperator for Hamiltonian {
    fn dim(&self) -> usize {
        self.space.total_dim()
    }

    fn fingerprint(&self) -> u64 {
        self.space.fingerprint()
    }

    fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        if let Some(sites) = &self.stencil {
            return self.apply_factored(sites, x, y);
        }
        let dims = self.space.dims();
        y.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(chunk, out)| {
            let start = chunk * ROW_CHUNK;
            let mut occ = self.space.basis_unindex(start).expect("in range");
            for (off, slot) in out.iter_mut().enumerate() {
                let i = start + off;
                let mut acc = self.diagonal[i] * x[i];
                for m in &self.off_diagonal {
                    if let Some((j, v)) = eval_monomial(m, i, &occ) {
                        acc += v * x[j];
                    }
                }
                *slot = acc;
                odometer_step(&mut occ, dims);
            }
        });
    }
}

fn mono(coeff: f64, factors: Vec<(usize, LocalFactor)>) -> Monomial {
    Monomial { coeff: C64::new(coeff, 0.0), factors }
}

fn free_term(space: &SpaceSpec, freq: f64, label: &str, name: &str) -> Result<Term, ModelError> {
    let k = space.position(label)?;
    Ok(Term { name: format!("{name}*n({label})"), monomials: vec![mono(freq, vec![(k, LocalFactor::Number)])] })
}

/// Matter terms of one medium plus its dipole coupling to `photons`.
fn site_terms(
    space: &SpaceSpec,
    site: &SiteLabels,
    p: &ModelParams,
    free_photons: &[(&str, f64, &str)],
) -> Result<Vec<Term>, ModelError> {
    let mut terms = Vec::new();
    for &(label, freq, name) in free_photons {
        terms.push(free_term(space, freq, label, name)?);
    }
    let ph = space.position(&site.phonon)?;
    let el = space.position(&site.electron)?;
    terms.push(free_term(space, p.omega, &site.phonon, "omega")?);
    terms.push(Term {
        name: format!("n_e({})*(nu*(a'+a)({})+epsilon)", site.electron, site.phonon),
        monomials: vec![
            mono(p.nu, vec![(ph, LocalFactor::Raise), (el, LocalFactor::Excited)]),
            mono(p.nu, vec![(ph, LocalFactor::Lower), (el, LocalFactor::Excited)]),
            mono(p.epsilon, vec![(el, LocalFactor::Excited)]),
        ],
    });
    for label in [&site.pump, &site.idler, &site.signal] {
        let c = space.position(label)?;
        let mut monomials = Vec::new();
        for cf in [LocalFactor::Raise, LocalFactor::Lower] {
            monomials.push(mono(p.mu, vec![(c, cf), (el, LocalFactor::SigmaX)]));
            for af in [LocalFactor::Raise, LocalFactor::Lower] {
                monomials.push(mono(p.tau, vec![(c, cf), (ph, af), (el, LocalFactor::SigmaX)]));
                monomials.push(mono(p.tau, vec![(c, cf), (ph, af)]));
            }
        }
        terms.push(Term { name: format!("M({})*(c'+c)({})", site.electron, label), monomials });
    }
    Ok(terms)
}

impl Hamiltonian {
    /// Single medium on the labels of `site`.
    pub fn single_site(space: &SpaceSpec, params: &ModelParams, site: &SiteLabels) -> Result<Self, ModelError> {
        params.validate()?;
        let layout = SiteLayout { topology: Topology::SingleSite, sites: vec![site.clone()] };
        layout.check_space(space)?;
        let photons = [
            (site.pump.as_str(), params.omega1, "Omega1"),
            (site.idler.as_str(), params.omega2, "Omega2"),
            (site.signal.as_str(), params.omega3, "Omega3"),
        ];
        Self::from_terms(space, site_terms(space, site, params, &photons)?)
            .with_stencil(std::slice::from_ref(site), &[params])
    }

    /// Two media sharing one signal mode.
    pub fn c1(space: &SpaceSpec, site_a: &ModelParams, site_b: &ModelParams) -> Result<Self, ModelError> {
        Self::two_site(Topology::C1, space, site_a, site_b)
    }

    /// Two independent media, each with its own signal mode.
    pub fn c2(space: &SpaceSpec, site_a: &ModelParams, site_b: &ModelParams) -> Result<Self, ModelError> {
        Self::two_site(Topology::C2, space, site_a, site_b)
    }

    pub fn for_topology(
        topology: Topology,
        space: &SpaceSpec,
        site_a: &ModelParams,
        site_b: &ModelParams,
    ) -> Result<Self, ModelError> {
        match topology {
            Topology::SingleSite => Self::single_site(space, site_a, &SiteLabels::single()),
            _ => Self::two_site(topology, space, site_a, site_b),
        }
    }

    fn two_site(
        topology: Topology,
        space: &SpaceSpec,
        site_a: &ModelParams,
        site_b: &ModelParams,
    ) -> Result<Self, ModelError> {
        site_a.validate()?;
        site_b.validate()?;
        let layout = SiteLayout::new(topology);
        layout.check_space(space)?;
        let mut terms = Vec::new();
        if topology == Topology::C1 {
            if site_a.omega3 != site_b.omega3 {
                return Err(ModelError::InvalidParam {
                    name: "omega3",
                    value: site_b.omega3,
                    reason: "a shared signal mode needs one frequency",
                });
            }
            terms.push(free_term(space, site_a.omega3, "signal", "Omega3")?);
        }
        for (site, p) in layout.sites.iter().zip([site_a, site_b]) {
            let mut photons = vec![
                (site.pump.as_str(), p.omega1, "Omega1"),
                (site.idler.as_str(), p.omega2, "Omega2"),
            ];
            if topology == Topology::C2 {
                photons.push((site.signal.as_str(), p.omega3, "Omega3"));
            }
            terms.extend(site_terms(space, site, p, &photons)?);
        }
        Self::from_terms(space, terms).with_stencil(&layout.sites, &[site_a, site_b])
    }
}

fn checked(h: Hamiltonian) -> Result<SparseOperator, ModelError> {
    let op = h.to_sparse();
    let defect = op.hermiticity_defect_exact();
    if defect > HERMITIAN_TOL {
        return Err(ModelError::NotHermitian(defect));
    }
    Ok(op)
}

/// Single-medium Hamiltonian as a sparse operator.
pub fn build_h0(space: &SpaceSpec, params: &ModelParams, labels: &SiteLabels) -> Result<SparseOperator, ModelError> {
    checked(Hamiltonian::single_site(space, params, labels)?)
}

/// C1 Hamiltonian with identical media.
pub fn build_h1(space: &SpaceSpec, params: &ModelParams) -> Result<SparseOperator, ModelError> {
    checked(Hamiltonian::c1(space, params, params)?)
}

/// C2 Hamiltonian with identical media.
pub fn build_h2(space: &SpaceSpec, params: &ModelParams) -> Result<SparseOperator, ModelError> {
    checked(Hamiltonian::c2(space, params, params)?)
}

/// Electron-phonon part of one medium, `w a'a + n_e (nu (a'+a) + eps)`,
/// on its own `phonon x electron` space.
pub fn matter_hamiltonian(params: &ModelParams, phonon_cutoff: usize) -> Result<(SpaceSpec, SparseOperator), ModelError> {
    let space = SpaceSpec::new(vec![SubsystemSpec::boson("phonon", phonon_cutoff), SubsystemSpec::two_level("electron")])?;
    let ph = 0;
    let el = 1;
    let terms = vec![Term {
        name: "matter".into(),
        monomials: vec![
            mono(params.omega, vec![(ph, LocalFactor::Number)]),
            mono(params.nu, vec![(ph, LocalFactor::Raise), (el, LocalFactor::Excited)]),
            mono(params.nu, vec![(ph, LocalFactor::Lower), (el, LocalFactor::Excited)]),
            mono(params.epsilon, vec![(el, LocalFactor::Excited)]),
        ],
    }];
    let h = Hamiltonian::from_terms(&space, terms).to_sparse();
    Ok((space, h))
}
