//! Measured quantities: mode occupations, the idler output of the second
//! beam splitter, composite operator expectations and the idler equation
//! of motion.
//!
//! The second beam splitter is a readout transform. With the phase `phi`
//! applied to arm B before it,
//!
//! ```text
//! c_2'A = (c_2A + i e^{i phi} c_2B) / sqrt2
//! c_2'B = (i c_2A + e^{i phi} c_2B) / sqrt2
//! ```
//!
//! so `N_2'A = (n_2A + n_2B)/2 - Im[e^{i phi} <c_2A' c_2B>]`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hspace::{SpaceError, SpaceSpec};
use crate::model::{ModelParams, SiteLabels};
use crate::opalg::{self, OpError, PauliAxis, SparseOperator, StateVector, C64, I, ONE};
use crate::opdsl::{self, CompileError, SymbolTable};

#[derive(Debug, Error)]
pub enum ObservableError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("`{0}` is not Hermitian; composite observables need a trailing `+ h.c.`")]
    NotHermitian(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("phase {0} outside [0, 2pi)")]
    Phase(f64),
    #[error("observable `{name}`: {message}")]
    Spec { name: String, message: String },
    #[error("finite-difference check needs dt > 0")]
    Step,
}

/// `<c'c>` of a boson mode.
pub fn occupation(space: &SpaceSpec, psi: &StateVector, label: &str) -> Result<f64, ObservableError> {
    Ok(opalg::number(space, label)?.expectation(psi)?.re)
}

/// Output port of the second beam splitter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Port {
    #[default]
    A,
    B,
}

fn check_phase(phi: f64) -> Result<(), ObservableError> {
    if (0.0..TAU).contains(&phi) {
        Ok(())
    } else {
        Err(ObservableError::Phase(phi))
    }
}

/// Output mode operator `c_2'A` or `c_2'B` on the given idler labels.
pub fn bs2_mode(space: &SpaceSpec, idler_a: &str, idler_b: &str, phi: f64, port: Port) -> Result<SparseOperator, ObservableError> {
    check_phase(phi)?;
    let ca = opalg::lower(space, idler_a)?;
    let cb = opalg::lower(space, idler_b)?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let e = C64::from_polar(1.0, phi);
    let (wa, wb) = match port {
        Port::A => (ONE, I * e),
        Port::B => (I, e),
    };
    Ok(ca.scale(wa * s).add_scaled(&cb, wb * s)?)
}

/// Number operator of a BS2 output port.
pub fn bs2_operator(space: &SpaceSpec, idler_a: &str, idler_b: &str, phi: f64, port: Port) -> Result<SparseOperator, ObservableError> {
    let c = bs2_mode(space, idler_a, idler_b, phi, port)?;
    Ok(c.adjoint().mul(&c)?.with_hermitian_hint(Some(true)))
}

/// `<c_2'A' c_2'A>` with the default `idler_A`/`idler_B` labels.
pub fn bs2_output(space: &SpaceSpec, psi: &StateVector, phi: f64) -> Result<f64, ObservableError> {
    Ok(bs2_operator(space, "idler_A", "idler_B", phi, Port::A)?.expectation(psi)?.re)
}

pub fn bs2_output_port(space: &SpaceSpec, psi: &StateVector, phi: f64, port: Port) -> Result<f64, ObservableError> {
    Ok(bs2_operator(space, "idler_A", "idler_B", phi, port)?.expectation(psi)?.re)
}

/// Second moments of the idler pair; every BS2 output follows from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdlerMoments {
    pub n_a: f64,
    pub n_b: f64,
    /// `<c_2A' c_2B>`
    pub cross: C64,
}

impl IdlerMoments {
    pub fn measure(space: &SpaceSpec, psi: &StateVector, idler_a: &str, idler_b: &str) -> Result<Self, ObservableError> {
        let ca = opalg::lower(space, idler_a)?;
        let cb = opalg::lower(space, idler_b)?;
        let cross = ca.adjoint().mul(&cb)?;
        Ok(Self {
            n_a: occupation(space, psi, idler_a)?,
            n_b: occupation(space, psi, idler_b)?,
            cross: cross.expectation(psi)?,
        })
    }

    pub fn output(&self, phi: f64, port: Port) -> f64 {
        let z = C64::from_polar(1.0, phi) * self.cross;
        match port {
            Port::A => 0.5 * (self.n_a + self.n_b) - z.im,
            Port::B => 0.5 * (self.n_a + self.n_b) + z.im,
        }
    }
}

/// Composite operators tracked alongside the photon numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Fig8a,
    Fig8b,
    Fig8c,
    Fig8d,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Fig8a, Preset::Fig8b, Preset::Fig8c, Preset::Fig8d];

    pub fn expression(self) -> &'static str {
        match self {
            Preset::Fig8a => "sz_A * c3 * c2A + h.c.",
            Preset::Fig8b => "sz_B * c3 * c2B + h.c.",
            Preset::Fig8c => "sy_A * c3 * c2A * c2B' + h.c.",
            Preset::Fig8d => "sz_B * sx_A * c3 * c2A * c2B' + h.c.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig8a => "fig8a",
            Preset::Fig8b => "fig8b",
            Preset::Fig8c => "fig8c",
            Preset::Fig8d => "fig8d",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, ObservableError> {
        Self::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| ObservableError::UnknownPreset(name.into()))
    }
}

/// Lowers a Hermitian composite expression.
pub fn composite_operator(space: &SpaceSpec, table: &SymbolTable, expr: &str) -> Result<SparseOperator, ObservableError> {
    let parsed = opdsl::parse(expr).map_err(CompileError::from)?;
    if !parsed.plus_hc {
        return Err(ObservableError::NotHermitian(expr.to_string()));
    }
    Ok(opdsl::compile(expr, space, table)?)
}

pub fn composite_expectation(
    space: &SpaceSpec,
    table: &SymbolTable,
    psi: &StateVector,
    expr: &str,
) -> Result<f64, ObservableError> {
    Ok(composite_operator(space, table, expr)?.expectation(psi)?.re)
}

/// Operators of the idler equation of motion for one site.
///
/// `i d/dt c_2 = [c_2, H] = W2 c_2 + M [c_2, c_2']`, and on a truncated
/// mode `[c, c'] = 1 - (N+1)|N><N|`, so the commutator equals
/// `printed - (N+1) M P_N` exactly, `printed = W2 c_2 + M`.
pub struct IdlerEom {
    pub idler: SparseOperator,
    pub printed: SparseOperator,
    pub truncation: SparseOperator,
    rhs: SparseOperator,
}

impl IdlerEom {
    pub fn new(space: &SpaceSpec, params: &ModelParams, site: &SiteLabels) -> Result<Self, ObservableError> {
        let c = opalg::lower(space, &site.idler)?;
        let x = opalg::lower(space, &site.phonon)?.plus_hc();
        let sx = opalg::pauli(space, &site.electron, PauliAxis::X)?;
        let r = |v: f64| C64::new(v, 0.0);
        let m = sx
            .scale(r(params.mu))
            .add(&x.mul(&sx)?.scale(r(params.tau)))?
            .add(&x.scale(r(params.tau)))?;
        let printed = c.scale(r(params.omega2)).add(&m)?;
        let cutoff = space.dims()[space.position(&site.idler)?] - 1;
        let top: Vec<C64> = (0..space.total_dim())
            .map(|i| if space.occupation_of(i, space.position(&site.idler).unwrap()) == cutoff { ONE } else { C64::new(0.0, 0.0) })
            .collect();
        let p_top = SparseOperator::diagonal(space, &top)?;
        let truncation = m.mul(&p_top)?.scale(r((cutoff + 1) as f64));
        let rhs = printed.sub(&truncation)?;
        Ok(Self { idler: c, printed, truncation, rhs })
    }

    /// `[c_2, H]` on the truncated space.
    pub fn commutator_rhs(&self) -> &SparseOperator {
        &self.rhs
    }

    /// `d/dt <c_2>` predicted at one state.
    pub fn derivative(&self, psi: &StateVector) -> Result<C64, ObservableError> {
        Ok(-I * self.rhs.expectation(psi)?)
    }
}

/// Outcome of one finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EomCheck {
    /// `|FD - predicted|` with the truncation-exact right-hand side.
    pub residual: f64,
    /// Contribution of the truncation term alone, `|(N+1) <M P_N>|`.
    pub truncation: f64,
}

/// Compares the centred difference of `<c_2>` from states at `t - dt`
/// and `t + dt` with the prediction at `t`. The residual is `O(dt^2)`.
pub fn verify_eom_idler(
    eom: &IdlerEom,
    before: &StateVector,
    at: &StateVector,
    after: &StateVector,
    dt: f64,
) -> Result<EomCheck, ObservableError> {
    if !(dt > 0.0) {
        return Err(ObservableError::Step);
    }
    let fd = (eom.idler.expectation(after)? - eom.idler.expectation(before)?) / (2.0 * dt);
    let predicted = eom.derivative(at)?;
    let truncation = eom.truncation.expectation(at)?.norm();
    Ok(EomCheck { residual: (fd - predicted).norm(), truncation })
}

/// What an observable measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObservableKind {
    Occupation(String),
    Bs2 { phase: f64, port: Port },
    MutualInformation { a: Vec<String>, b: Vec<String> },
    Operator(String),
    Preset(Preset),
}

/// A named observable of a scenario, recorded every `stride` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawObservable", into = "RawObservable")]
pub struct ObservableSpec {
    pub name: String,
    pub kind: ObservableKind,
    pub stride: usize,
}

/// Config form: `name`, exactly one of `occupation`, `bs2`,
/// `mutual_information`, `expr`, `preset`, and an optional `stride`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawObservable {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bs2: Option<RawBs2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutual_information: Option<RawMi>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBs2 {
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub port: Port,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMi {
    pub a: Vec<String>,
    pub b: Vec<String>,
}

/// Default stride of entanglement observables.
pub const MI_STRIDE: usize = 10;

impl TryFrom<RawObservable> for ObservableSpec {
    type Error = ObservableError;

    fn try_from(raw: RawObservable) -> Result<Self, Self::Error> {
        let err = |m: &str| ObservableError::Spec { name: raw.name.clone(), message: m.to_string() };
        let mut kinds = Vec::new();
        if let Some(l) = &raw.occupation {
            kinds.push(ObservableKind::Occupation(l.clone()));
        }
        if let Some(b) = &raw.bs2 {
            check_phase(b.phase).map_err(|e| err(&e.to_string()))?;
            kinds.push(ObservableKind::Bs2 { phase: b.phase, port: b.port });
        }
        if let Some(m) = &raw.mutual_information {
            if m.a.is_empty() || m.b.is_empty() {
                return Err(err("mutual information groups must be nonempty"));
            }
            kinds.push(ObservableKind::MutualInformation { a: m.a.clone(), b: m.b.clone() });
        }
        if let Some(e) = &raw.expr {
            kinds.push(ObservableKind::Operator(e.clone()));
        }
        if let Some(p) = raw.preset {
            kinds.push(ObservableKind::Preset(p));
        }
        if kinds.len() != 1 {
            return Err(err("needs exactly one of occupation, bs2, mutual_information, expr, preset"));
        }
        if raw.name.is_empty() || raw.name.contains([',', '"', '\n']) {
            return Err(err("name must be nonempty and free of commas, quotes and newlines"));
        }
        let kind = kinds.pop().unwrap();
        let default_stride = if matches!(kind, ObservableKind::MutualInformation { .. }) { MI_STRIDE } else { 1 };
        let stride = raw.stride.unwrap_or(default_stride);
        if stride == 0 {
            return Err(err("stride must be at least 1"));
        }
        Ok(Self { name: raw.name, kind, stride })
    }
}

impl From<ObservableSpec> for RawObservable {
    fn from(s: ObservableSpec) -> Self {
        let mut raw = RawObservable { name: s.name, stride: Some(s.stride), ..Default::default() };
        match s.kind {
            ObservableKind::Occupation(l) => raw.occupation = Some(l),
            ObservableKind::Bs2 { phase, port } => raw.bs2 = Some(RawBs2 { phase, port }),
            ObservableKind::MutualInformation { a, b } => raw.mutual_information = Some(RawMi { a, b }),
            ObservableKind::Operator(e) => raw.expr = Some(e),
            ObservableKind::Preset(p) => raw.preset = Some(p),
        }
        raw
    }
}

impl ObservableSpec {
    pub fn new(name: &str, kind: ObservableKind) -> Self {
        let stride = if matches!(kind, ObservableKind::MutualInformation { .. }) { MI_STRIDE } else { 1 };
        Self { name: name.to_string(), kind, stride }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

/// An observable ready for evaluation on states of one space.
pub enum CompiledObservable {
    Operator(SparseOperator),
    MutualInformation { a: Vec<String>, b: Vec<String> },
}

impl CompiledObservable {
    pub fn compile(space: &SpaceSpec, table: &SymbolTable, spec: &ObservableSpec) -> Result<Self, ObservableError> {
        let wrap = |e: ObservableError| ObservableError::Spec { name: spec.name.clone(), message: e.to_string() };
        Ok(match &spec.kind {
            ObservableKind::Occupation(label) => {
                let label = table.get(label).map(|s| s.label.clone()).unwrap_or_else(|| label.clone());
                Self::Operator(opalg::number(space, &label).map_err(|e| wrap(e.into()))?)
            }
            ObservableKind::Bs2 { phase, port } => {
                Self::Operator(bs2_operator(space, "idler_A", "idler_B", *phase, *port).map_err(wrap)?)
            }
            ObservableKind::MutualInformation { a, b } => {
                let resolve = |g: &Vec<String>| -> Result<Vec<String>, ObservableError> {
                    g.iter()
                        .map(|l| {
                            let label = table.get(l).map(|s| s.label.clone()).unwrap_or_else(|| l.clone());
                            space.position(&label).map(|_| label).map_err(|e| wrap(e.into()))
                        })
                        .collect()
                };
                let (a, b) = (resolve(a)?, resolve(b)?);
                if let Some(x) = a.iter().find(|l| b.contains(l)) {
                    return Err(wrap(ObservableError::Spec { name: spec.name.clone(), message: format!("`{x}` in both groups") }));
                }
                Self::MutualInformation { a, b }
            }
            ObservableKind::Operator(expr) => Self::Operator(composite_operator(space, table, expr).map_err(wrap)?),
            ObservableKind::Preset(p) => Self::Operator(composite_operator(space, table, p.expression()).map_err(wrap)?),
        })
    }
}
