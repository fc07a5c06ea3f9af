//! Scenario files, runs, sweeps and their CSV/JSON output.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! name = "c1_desk"
//! topology = "C1"          # "C1", "C2" or "single"
//! alpha_sq = 8.0           # mean pump photon number before BS1
//!
//! [cutoffs]
//! pump = 12
//! idler = 4
//! signal = 4
//! phonon = 6
//!
//! [params]                 # optional; omitted keys take the defaults
//! nu = 1.0
//!
//! [propagator]             # optional
//! t_end = 32.0
//! dt_sample = 0.05
//!
//! [[observables]]          # optional; a standard set is used if absent
//! name = "N2A"
//! occupation = "idler_A"
//! ```
//!
//! See `ScenarioFile` for every key. The resolved scenario, with all
//! defaults filled in, is written next to the CSV so a run can be
//! reproduced from its metadata alone.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::entangle::{mutual_information_parts, EntangleError, EntropyUnit, DEFAULT_KEPT_DIM_GUARD};
use crate::hspace::{SpaceError, SpaceSpec};
use crate::model::{Cutoffs, Hamiltonian, ModelError, ModelParams, SiteLayout, Topology};
use crate::observables::{CompiledObservable, ObservableError, ObservableKind, ObservableSpec, Port, Preset};
use crate::opalg::{LinearOperator, SparseOperator};
use crate::propagate::{evolve_with, PropagateError, PropagatorConfig, StepStats};
use crate::states::{initial_state, StateError, DEFAULT_TAIL_BOUND};

pub const NORM_DRIFT_TOL: f64 = 1e-9;
pub const ENERGY_DRIFT_TOL: f64 = 1e-8;
const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Observable(#[from] ObservableError),
    #[error(transparent)]
    Propagate(#[from] PropagateError),
    #[error(transparent)]
    Entangle(#[from] EntangleError),
    #[error("estimated memory {estimate_gib:.3} GiB exceeds the budget of {budget_gib:.3} GiB")]
    MemoryBudget { estimate_gib: f64, budget_gib: f64 },
    #[error("{quantity} drift {achieved:e} exceeds {tolerance:e}")]
    Conservation { quantity: &'static str, achieved: f64, tolerance: f64 },
    #[error("observable `{name}` is not finite at t = {t}")]
    NonFinite { name: String, t: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// How the Hamiltonian is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    /// Factored matrix-free for the model Hamiltonians; otherwise sparse
    /// when it fits the memory budget.
    #[default]
    Auto,
    Sparse,
    MatrixFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub mem_budget_gib: f64,
    pub operator: OperatorMode,
    /// Largest reduced density matrix dimension for entanglement.
    pub kept_dim_guard: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { mem_budget_gib: 4.0, operator: OperatorMode::Auto, kept_dim_guard: DEFAULT_KEPT_DIM_GUARD }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Pump,
    Idler,
    Signal,
    Phonon,
    Nu,
    Phi,
    Alpha,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, RunError> {
        Ok(match s {
            "pump" | "cutoff.pump" => Self::Pump,
            "idler" | "cutoff.idler" => Self::Idler,
            "signal" | "cutoff.signal" => Self::Signal,
            "phonon" | "cutoff.phonon" => Self::Phonon,
            "nu" => Self::Nu,
            "phi" => Self::Phi,
            "alpha" | "alpha_sq" => Self::Alpha,
            other => return Err(RunError::Config(format!("unknown sweep axis `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pump => "pump",
            Self::Idler => "idler",
            Self::Signal => "signal",
            Self::Phonon => "phonon",
            Self::Nu => "nu",
            Self::Phi => "phi",
            Self::Alpha => "alpha",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    1e-3
}

/// Fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub topology: Topology,
    pub alpha_sq: f64,
    pub cutoffs: Cutoffs,
    pub params: ModelParams,
    /// Parameters of medium B when they differ from medium A.
    pub params_b: Option<ModelParams>,
    pub tail_bound: f64,
    pub propagator: PropagatorConfig,
    pub entropy_unit: EntropyUnit,
    pub observables: Vec<ObservableSpec>,
    pub limits: Limits,
    pub sweep: Option<SweepConfig>,
}

/// On-disk form; every key except `name`, `topology`, `alpha_sq` and
/// `cutoffs` is optional.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub topology: Topology,
    pub alpha_sq: f64,
    pub cutoffs: Cutoffs,
    #[serde(default)]
    pub params: ParamsFile,
    pub params_b: Option<ParamsFile>,
    pub tail_bound: Option<f64>,
    #[serde(default)]
    pub propagator: PropagatorConfig,
    #[serde(default)]
    pub entropy_unit: EntropyUnit,
    #[serde(default)]
    pub observables: Vec<ObservableSpec>,
    #[serde(default)]
    pub limits: Limits,
    pub sweep: Option<SweepConfig>,
}

/// Parameter table with per-key defaults.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    omega: Option<f64>,
    omega1: Option<f64>,
    omega2: Option<f64>,
    omega3: Option<f64>,
    mu: Option<f64>,
    tau: Option<f64>,
    nu: Option<f64>,
    epsilon: Option<f64>,
}

impl ParamsFile {
    fn resolve(self, base: ModelParams) -> ModelParams {
        ModelParams {
            omega: self.omega.unwrap_or(base.omega),
            omega1: self.omega1.unwrap_or(base.omega1),
            omega2: self.omega2.unwrap_or(base.omega2),
            omega3: self.omega3.unwrap_or(base.omega3),
            mu: self.mu.unwrap_or(base.mu),
            tau: self.tau.unwrap_or(base.tau),
            nu: self.nu.unwrap_or(base.nu),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
        }
    }
}

/// Observables recorded when a scenario lists none.
pub fn standard_observables(topology: Topology) -> Vec<ObservableSpec> {
    let occ = |n: &str, l: &str| ObservableSpec::new(n, ObservableKind::Occupation(l.into()));
    let mi = |n: &str, a: &str, b: &str| {
        ObservableSpec::new(n, ObservableKind::MutualInformation { a: vec![a.into()], b: vec![b.into()] })
    };
    let bs2 = |n: &str, phase: f64| ObservableSpec::new(n, ObservableKind::Bs2 { phase, port: Port::A });
    match topology {
        Topology::SingleSite => vec![
            occ("N1", "pump"),
            occ("N2", "idler"),
            occ("N3", "signal"),
            occ("Nph", "phonon"),
            mi("IM_signal_idler", "signal", "idler"),
        ],
        Topology::C1 | Topology::C2 => {
            let mut v = vec![occ("N1A", "pump_A"), occ("N1B", "pump_B"), occ("N2A", "idler_A"), occ("N2B", "idler_B")];
            if topology == Topology::C1 {
                v.push(occ("N3", "signal"));
                v.push(mi("IM_signal_idlerA", "signal", "idler_A"));
                v.push(mi("IM_signal_idlerB", "signal", "idler_B"));
            } else {
                v.push(occ("N3A", "signal_A"));
                v.push(occ("N3B", "signal_B"));
                v.push(mi("IM_signalA_idlerA", "signal_A", "idler_A"));
                v.push(mi("IM_signalA_idlerB", "signal_A", "idler_B"));
                v.push(mi("IM_signalB_idlerB", "signal_B", "idler_B"));
            }
            v.push(mi("IM_idlerA_idlerB", "idler_A", "idler_B"));
            v.push(bs2("N_BS2", 0.0));
            for k in 1..8 {
                v.push(bs2(&format!("N_BS2_phi{k}"), k as f64 * PI / 4.0));
            }
            if topology == Topology::C1 {
                for p in Preset::ALL {
                    v.push(ObservableSpec::new(p.name(), ObservableKind::Preset(p)));
                }
            }
            v
        }
    }
}

impl ScenarioFile {
    pub fn resolve(self) -> Scenario {
        let params = self.params.resolve(ModelParams::default());
        let params_b = self.params_b.map(|p| p.resolve(params));
        let observables =
            if self.observables.is_empty() { standard_observables(self.topology) } else { self.observables };
        Scenario {
            name: self.name,
            topology: self.topology,
            alpha_sq: self.alpha_sq,
            cutoffs: self.cutoffs,
            params,
            params_b,
            tail_bound: self.tail_bound.unwrap_or(DEFAULT_TAIL_BOUND),
            propagator: self.propagator,
            entropy_unit: self.entropy_unit,
            observables,
            limits: self.limits,
            sweep: self.sweep,
        }
    }
}

/// Parses scenario text; errors carry the line and column.
pub fn parse_scenario(text: &str) -> Result<Scenario, RunError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| {
        let place = e.span().map(|s| line_col(text, s.start)).map(|(l, c)| format!("line {l}, column {c}: "));
        RunError::Config(format!("{}{}", place.unwrap_or_default(), e.message()))
    })?;
    let scenario = file.resolve();
    scenario.check_fields()?;
    Ok(scenario)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_scenario(&text)
}

impl Scenario {
    /// Scenario with the default parameters and observables.
    pub fn new(name: &str, topology: Topology, alpha_sq: f64, cutoffs: Cutoffs) -> Self {
        Self {
            name: name.into(),
            topology,
            alpha_sq,
            cutoffs,
            params: ModelParams::default(),
            params_b: None,
            tail_bound: DEFAULT_TAIL_BOUND,
            propagator: PropagatorConfig::default(),
            entropy_unit: EntropyUnit::Nats,
            observables: standard_observables(topology),
            limits: Limits::default(),
            sweep: None,
        }
    }

    fn check_fields(&self) -> Result<(), RunError> {
        let cfg = |m: String| Err(RunError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return cfg("`name` must be nonempty and contain no path separators".into());
        }
        if !(self.alpha_sq >= 0.0 && self.alpha_sq.is_finite()) {
            return cfg(format!("`alpha_sq` must be finite and >= 0, got {}", self.alpha_sq));
        }
        if !(self.tail_bound > 0.0) {
            return cfg("`tail_bound` must be positive".into());
        }
        if !(self.limits.mem_budget_gib > 0.0) {
            return cfg("`limits.mem_budget_gib` must be positive".into());
        }
        self.params.validate()?;
        if let Some(b) = &self.params_b {
            b.validate()?;
        }
        self.propagator.validate()?;
        let mut names = BTreeSet::new();
        for o in &self.observables {
            if !names.insert(o.name.as_str()) {
                return cfg(format!("duplicate observable name `{}`", o.name));
            }
            if o.name == "t" {
                return cfg("observable name `t` is reserved".into());
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return cfg("sweep needs at least one value".into());
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> SiteLayout {
        SiteLayout::new(self.topology)
    }

    pub fn space(&self) -> Result<SpaceSpec, RunError> {
        Ok(self.layout().space(&self.cutoffs)?)
    }

    pub fn params_b(&self) -> ModelParams {
        self.params_b.unwrap_or(self.params)
    }

    pub fn hamiltonian(&self, space: &SpaceSpec) -> Result<Hamiltonian, RunError> {
        Ok(Hamiltonian::for_topology(self.topology, space, &self.params, &self.params_b())?)
    }

    /// `(state vectors, sparse operator)` bytes for this scenario.
    pub fn memory_estimate(&self, space: &SpaceSpec, nnz: usize) -> (usize, usize) {
        let n = space.total_dim();
        let vectors = n.saturating_mul(16).saturating_mul(self.propagator.krylov_dim + 4);
        let sparse = nnz.saturating_mul(24).saturating_add(n.saturating_mul(8));
        (vectors, sparse)
    }

    /// Full check short of running: labels, observables and memory.
    pub fn validate(&self) -> Result<SpaceSpec, RunError> {
        self.check_fields()?;
        let space = self.space()?;
        self.layout().check_space(&space)?;
        let (vectors, _) = self.memory_estimate(&space, 0);
        let budget = self.limits.mem_budget_gib * GIB;
        if vectors as f64 > budget {
            return Err(RunError::MemoryBudget { estimate_gib: vectors as f64 / GIB, budget_gib: self.limits.mem_budget_gib });
        }
        let table = self.layout().symbol_table(&space);
        for o in &self.observables {
            if let ObservableKind::MutualInformation { .. } = o.kind {
                // resolves labels without building operators
                CompiledObservable::compile(&space, &table, o)?;
            } else if space.total_dim() <= 1 << 16 {
                CompiledObservable::compile(&space, &table, o)?;
            } else {
                check_symbols(&space, &table, o)?;
            }
        }
        Ok(space)
    }

    /// Copy with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self, RunError> {
        let mut s = self.clone();
        let as_cutoff = || -> Result<usize, RunError> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(RunError::Config(format!("cutoff sweep value {value} is not a positive integer")))
            }
        };
        match axis {
            SweepAxis::Pump => s.cutoffs.pump = as_cutoff()?,
            SweepAxis::Idler => s.cutoffs.idler = as_cutoff()?,
            SweepAxis::Signal => s.cutoffs.signal = as_cutoff()?,
            SweepAxis::Phonon => s.cutoffs.phonon = as_cutoff()?,
            SweepAxis::Nu => {
                s.params.nu = value;
                if let Some(b) = &mut s.params_b {
                    b.nu = value;
                }
            }
            SweepAxis::Alpha => s.alpha_sq = value,
            SweepAxis::Phi => {
                for o in &mut s.observables {
                    if let ObservableKind::Bs2 { phase, .. } = &mut o.kind {
                        *phase = value.rem_euclid(2.0 * PI);
                    }
                }
            }
        }
        s.name = format!("{}_{}_{}", self.name, axis.name(), value);
        s.sweep = None;
        s.check_fields()?;
        Ok(s)
    }

    /// SHA-256 of the canonical serialisation.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("serialisable");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serialisable")
    }
}

fn check_symbols(space: &SpaceSpec, table: &crate::opdsl::SymbolTable, o: &ObservableSpec) -> Result<(), RunError> {
    let expr = match &o.kind {
        ObservableKind::Operator(e) => e.as_str(),
        ObservableKind::Preset(p) => p.expression(),
        ObservableKind::Occupation(l) => {
            let label = table.get(l).map(|s| s.label.clone()).unwrap_or_else(|| l.clone());
            if !space.subsystem(&label)?.kind.is_boson() {
                return Err(RunError::Config(format!("observable `{}`: `{label}` is not a boson mode", o.name)));
            }
            return Ok(());
        }
        ObservableKind::Bs2 { .. } => {
            space.position("idler_A")?;
            space.position("idler_B")?;
            return Ok(());
        }
        ObservableKind::MutualInformation { .. } => return Ok(()),
    };
    let parsed = crate::opdsl::parse(expr).map_err(|e| RunError::Config(format!("observable `{}`: {e}", o.name)))?;
    if !parsed.plus_hc {
        return Err(ObservableError::NotHermitian(expr.to_string()).into());
    }
    for ident in idents(expr) {
        if ident == "i" || ident == "h" || ident == "c" {
            continue;
        }
        if table.get(&ident).is_none() {
            return Err(RunError::Config(format!("observable `{}`: unresolved symbol `{ident}`", o.name)));
        }
    }
    Ok(())
}

fn idents(expr: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev_digit_start = false;
    for ch in expr.chars() {
        if ch.is_ascii_alphanumeric() || ch == '_' {
            if cur.is_empty() {
                prev_digit_start = ch.is_ascii_digit();
            }
            cur.push(ch);
        } else {
            if !cur.is_empty() && !prev_digit_start {
                out.push(std::mem::take(&mut cur));
            }
            cur.clear();
        }
    }
    if !cur.is_empty() && !prev_digit_start {
        out.push(cur);
    }
    out
}

/// Per-run facts written to the JSON sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub scenario: Scenario,
    pub content_hash: String,
    pub version: &'static str,
    pub threads: usize,
    pub total_dim: usize,
    pub operator: &'static str,
    pub coherent_tails: Vec<(String, f64)>,
    pub max_norm_drift: f64,
    pub max_energy_drift: f64,
    pub initial_energy: f64,
    pub stats: StepStats,
    pub wall_seconds: f64,
}

/// Observable records; `values[s][k]` is column `k` at sample `s`, `None`
/// off its stride.
#[derive(Debug, Clone, Serialize)]
pub struct TimeSeries {
    pub columns: Vec<String>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
    pub norms: Vec<f64>,
    pub energies: Vec<f64>,
    pub meta: RunMeta,
}

impl TimeSeries {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Recorded `(t, value)` pairs of one column.
    pub fn series(&self, name: &str) -> Option<Vec<(f64, f64)>> {
        let k = self.column_index(name)?;
        Some(self.times.iter().zip(&self.values).filter_map(|(&t, row)| row[k].map(|v| (t, v))).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.values) {
            let _ = write!(out, "{t:e}");
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v:e}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<dir>/<name>.csv` and `<dir>/<name>.meta.json`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), RunError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = dir.join(format!("{}.csv", self.meta.scenario.name));
        let meta = dir.join(format!("{}.meta.json", self.meta.scenario.name));
        fs::write(&csv, self.to_csv()).map_err(io_err(&csv))?;
        let json = serde_json::to_string_pretty(&self.meta).expect("serialisable");
        fs::write(&meta, json).map_err(io_err(&meta))?;
        Ok((csv, meta))
    }
}

enum Operator {
    Sparse(SparseOperator),
    MatrixFree(Hamiltonian),
}

impl Operator {
    fn as_dyn(&self) -> &dyn LinearOperator {
        match self {
            Operator::Sparse(s) => s,
            Operator::MatrixFree(h) => h,
        }
    }
}

/// Runs a scenario and returns its records; nothing is written.
pub fn run(scenario: &Scenario) -> Result<TimeSeries, RunError> {
    let started = Instant::now();
    let space = scenario.validate()?;
    let layout = scenario.layout();
    let table = layout.symbol_table(&space);
    let ham = scenario.hamiltonian(&space)?;
    let (vectors, sparse_bytes) = scenario.memory_estimate(&space, ham.nnz_estimate());
    let budget = scenario.limits.mem_budget_gib * GIB;
    let use_sparse = match scenario.limits.operator {
        OperatorMode::Sparse => true,
        OperatorMode::MatrixFree => false,
        OperatorMode::Auto => !ham.is_factored() && (vectors + sparse_bytes) as f64 <= budget,
    };
    if use_sparse && (vectors + sparse_bytes) as f64 > budget {
        return Err(RunError::MemoryBudget {
            estimate_gib: (vectors + sparse_bytes) as f64 / GIB,
            budget_gib: scenario.limits.mem_budget_gib,
        });
    }
    info!(
        "{}: dim {}, {} Hamiltonian, estimated {:.3} GiB",
        scenario.name,
        space.total_dim(),
        if use_sparse { "sparse" } else { "matrix-free" },
        (vectors + if use_sparse { sparse_bytes } else { 0 }) as f64 / GIB
    );
    let op = if use_sparse { Operator::Sparse(ham.to_sparse()) } else { Operator::MatrixFree(ham) };
    let compiled: Vec<CompiledObservable> = scenario
        .observables
        .iter()
        .map(|o| CompiledObservable::compile(&space, &table, o))
        .collect::<Result<_, _>>()?;
    let init = initial_state(&space, &layout, scenario.alpha_sq.sqrt(), scenario.tail_bound)?;
    let unit_scale = match scenario.entropy_unit {
        EntropyUnit::Nats => 1.0,
        EntropyUnit::Bits => 1.0 / std::f64::consts::LN_2,
    };
    let guard = scenario.limits.kept_dim_guard;
    let mut values: Vec<Vec<Option<f64>>> = Vec::new();
    let traj = evolve_with(op.as_dyn(), &init.state, &scenario.propagator, |s, t, psi| {
        let row: Vec<Option<f64>> = scenario
            .observables
            .par_iter()
            .zip(compiled.par_iter())
            .map(|(spec, c)| -> Result<Option<f64>, String> {
                if s % spec.stride != 0 {
                    return Ok(None);
                }
                let v = match c {
                    CompiledObservable::Operator(o) => o.expectation(psi).map_err(|e| e.to_string())?.re,
                    CompiledObservable::MutualInformation { a, b } => {
                        let a: Vec<&str> = a.iter().map(String::as_str).collect();
                        let b: Vec<&str> = b.iter().map(String::as_str).collect();
                        mutual_information_parts(&space, psi, &a, &b, guard).map_err(|e| e.to_string())?.value()
                            * unit_scale
                    }
                };
                if !v.is_finite() {
                    return Err(format!("observable `{}` is not finite at t = {t}", spec.name));
                }
                Ok(Some(v))
            })
            .collect::<Result<_, _>>()?;
        values.push(row);
        Ok(())
    })?;
    let norm_drift = traj.max_norm_drift();
    let energy_drift = traj.max_energy_drift();
    if norm_drift > NORM_DRIFT_TOL {
        return Err(RunError::Conservation { quantity: "norm", achieved: norm_drift, tolerance: NORM_DRIFT_TOL });
    }
    if energy_drift > ENERGY_DRIFT_TOL {
        return Err(RunError::Conservation { quantity: "energy", achieved: energy_drift, tolerance: ENERGY_DRIFT_TOL });
    }
    for (tail_label, tail) in &init.tails {
        if *tail > 0.0 {
            warn!("{}: coherent tail {:.3e} discarded on {}", scenario.name, tail, tail_label);
        }
    }
    let meta = RunMeta {
        scenario: scenario.clone(),
        content_hash: scenario.content_hash(),
        version: env!("CARGO_PKG_VERSION"),
        threads: rayon::current_num_threads(),
        total_dim: space.total_dim(),
        operator: if use_sparse { "sparse" } else { "matrix_free" },
        coherent_tails: init.tails,
        max_norm_drift: norm_drift,
        max_energy_drift: energy_drift,
        initial_energy: traj.energies[0],
        stats: traj.stats,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TimeSeries {
        columns: scenario.observables.iter().map(|o| o.name.clone()).collect(),
        times: traj.times,
        values,
        norms: traj.norms,
        energies: traj.energies,
        meta,
    })
}

/// Largest relative change of one observable between two sweep points.
#[derive(Debug, Clone, Serialize)]
pub struct Deviation {
    pub observable: String,
    pub from: f64,
    pub to: f64,
    /// `max_t |a - b|`
    pub absolute: f64,
    /// `absolute / max_t |b|`
    pub relative: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub scenario: String,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub threshold: f64,
    pub deviations: Vec<Deviation>,
    /// Per step between successive values, whether every observable
    /// changed by less than the threshold.
    pub converged: Vec<bool>,
    pub outputs: Vec<String>,
}

/// Relative max-over-time deviation between two runs of the same
/// observable set.
pub fn compare(a: &TimeSeries, b: &TimeSeries, from: f64, to: f64) -> Vec<Deviation> {
    let mut out = Vec::new();
    for name in &a.columns {
        let (Some(sa), Some(sb)) = (a.series(name), b.series(name)) else { continue };
        let mut absolute = 0.0f64;
        let mut scale = 0.0f64;
        for ((ta, va), (tb, vb)) in sa.iter().zip(&sb) {
            if (ta - tb).abs() > 1e-12 {
                continue;
            }
            absolute = absolute.max((va - vb).abs());
            scale = scale.max(vb.abs());
        }
        let relative = if scale > 0.0 { absolute / scale } else if absolute == 0.0 { 0.0 } else { f64::INFINITY };
        out.push(Deviation { observable: name.clone(), from, to, absolute, relative });
    }
    out
}

/// Runs every sweep point with at most `jobs` concurrent evolutions.
pub fn sweep(
    scenario: &Scenario,
    axis: SweepAxis,
    values: &[f64],
    threshold: f64,
    jobs: usize,
) -> Result<(Vec<TimeSeries>, SweepReport), RunError> {
    let points: Vec<Scenario> = values.iter().map(|&v| scenario.with_axis(axis, v)).collect::<Result<_, _>>()?;
    let runs: Vec<TimeSeries> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.min(points.len()))
            .build()
            .map_err(|e| RunError::Config(e.to_string()))?;
        pool.install(|| points.par_iter().map(run).collect::<Result<_, _>>())?
    } else {
        points.iter().map(run).collect::<Result<_, _>>()?
    };
    let mut deviations = Vec::new();
    let mut converged = Vec::new();
    for (k, pair) in runs.windows(2).enumerate() {
        let d = compare(&pair[0], &pair[1], values[k], values[k + 1]);
        converged.push(d.iter().all(|x| x.relative < threshold));
        deviations.extend(d);
    }
    let report = SweepReport {
        scenario: scenario.name.clone(),
        axis,
        values: values.to_vec(),
        threshold,
        deviations,
        converged,
        outputs: points.iter().map(|p| p.name.clone()).collect(),
    };
    Ok((runs, report))
}

pub fn write_sweep_report(report: &SweepReport, dir: &Path) -> Result<PathBuf, RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("sweep_report.json");
    fs::write(&path, serde_json::to_string_pretty(report).expect("serialisable")).map_err(io_err(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(topology: Topology) -> Scenario {
        let mut s = Scenario::new("tiny", topology, 1.0, Cutoffs { pump: 4, idler: 1, signal: 1, phonon: 1 });
        s.tail_bound = 1e-2;
        s.propagator = PropagatorConfig { t_end: 1.0, dt_sample: 0.1, ..Default::default() };
        s
    }

    #[test]
    fn parse_minimal_and_resolve_defaults() {
        let text = "name = \"x\"\ntopology = \"C1\"\nalpha_sq = 8.0\n[cutoffs]\npump = 12\nidler = 4\nsignal = 4\nphonon = 6\n[params]\nnu = 0.5\n";
        let s = parse_scenario(text).unwrap();
        assert_eq!(s.params.nu, 0.5);
        assert_eq!(s.params.mu, 0.5);
        assert_eq!(s.propagator, PropagatorConfig::default());
        assert_eq!(s.observables, standard_observables(Topology::C1));
        let again: Scenario = toml::from_str(&s.to_toml()).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.content_hash(), s.content_hash());
    }

    #[test]
    fn config_errors_are_line_anchored() {
        let text = "name = \"x\"\ntopology = \"C3\"\nalpha_sq = 8.0\n";
        let e = parse_scenario(text).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let text = "name = \"x\"\ntopology = \"C1\"\nalpha_sq = 8.0\nbogus = 1\n[cutoffs]\npump = 1\nidler = 1\nsignal = 1\nphonon = 1\n";
        let e = parse_scenario(text).unwrap_err().to_string();
        assert!(e.contains("line 4"), "{e}");
        let text = "name = \"x\"\ntopology = \"C1\"\nalpha_sq = -1.0\n[cutoffs]\npump = 1\nidler = 1\nsignal = 1\nphonon = 1\n";
        assert!(parse_scenario(text).is_err());
    }

    #[test]
    fn memory_budget_is_enforced() {
        let mut s = Scenario::new("big", Topology::C1, 8.0, Cutoffs { pump: 12, idler: 4, signal: 4, phonon: 6 });
        s.limits.mem_budget_gib = 0.5;
        assert!(matches!(s.validate(), Err(RunError::MemoryBudget { .. })));
    }

    #[test]
    fn validate_rejects_unknown_symbols() {
        let mut s = tiny(Topology::C2);
        s.observables.push(ObservableSpec::new("bad", ObservableKind::Preset(Preset::Fig8a)));
        assert!(s.validate().is_err());
        let mut s = tiny(Topology::C1);
        s.observables.push(ObservableSpec::new("bad", ObservableKind::Operator("c9 + h.c.".into())));
        assert!(s.validate().is_err());
        let mut s = tiny(Topology::C1);
        s.observables.push(ObservableSpec::new("n", ObservableKind::Occupation("idler_A".into())));
        s.observables.push(ObservableSpec::new("n", ObservableKind::Occupation("idler_B".into())));
        assert!(matches!(s.validate(), Err(RunError::Config(_))));
    }

    #[test]
    fn run_is_deterministic_and_complete() {
        let s = tiny(Topology::C1);
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.times.len(), 11);
        let csv = a.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("t,N1A,N1B,N2A"));
        // entanglement on its stride only
        let k = a.column_index("IM_signal_idlerA").unwrap();
        assert!(a.values[0][k].is_some() && a.values[1][k].is_none() && a.values[10][k].is_some());
        for row in &a.values {
            assert!(row.iter().flatten().all(|v| v.is_finite()));
        }
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, meta_path) = a.write(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(csv_path).unwrap(), csv);
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(meta_path).unwrap()).unwrap();
        let back: Scenario = serde_json::from_value(meta["scenario"].clone()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn sparse_and_matrix_free_agree() {
        let mut s = tiny(Topology::C1);
        s.limits.operator = OperatorMode::Sparse;
        let a = run(&s).unwrap();
        s.limits.operator = OperatorMode::MatrixFree;
        let b = run(&s).unwrap();
        for d in compare(&a, &b, 0.0, 1.0) {
            assert!(d.absolute < 1e-10, "{} {:e}", d.observable, d.absolute);
        }
    }

    #[test]
    fn decoupled_occupations_are_constant() {
        let mut s = tiny(Topology::SingleSite);
        s.params = ModelParams { mu: 0.0, tau: 0.0, nu: 0.0, ..ModelParams::default() };
        s.alpha_sq = 2.0;
        s.cutoffs.pump = 9;
        let r = run(&s).unwrap();
        for name in ["N1", "N2", "N3", "Nph"] {
            let series = r.series(name).unwrap();
            let v0 = series[0].1;
            assert!(series.iter().all(|(_, v)| (v - v0).abs() < 1e-12), "{name}");
        }
    }

    #[test]
    fn sweep_reports_every_step() {
        let s = tiny(Topology::SingleSite);
        let (runs, report) = sweep(&s, SweepAxis::Phonon, &[1.0, 2.0], 1e-3, 1).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(report.converged.len(), 1);
        assert_eq!(report.deviations.len(), s.observables.len());
        assert_eq!(report.outputs[1], "tiny_phonon_2");
        assert!(s.with_axis(SweepAxis::Pump, 2.5).is_err());
        let phi = tiny(Topology::C1).with_axis(SweepAxis::Phi, PI).unwrap();
        let k = phi.observables.iter().position(|o| o.name == "N_BS2").unwrap();
        assert_eq!(phi.observables[k].kind, ObservableKind::Bs2 { phase: PI, port: Port::A });
    }

    #[test]
    fn identifier_scan() {
        assert_eq!(idents("sz_A * c3 * c2A' + 2.5i * x + h.c."), vec!["sz_A", "c3", "c2A", "x", "h", "c"]);
    }
}
