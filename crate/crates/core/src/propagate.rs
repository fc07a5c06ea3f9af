//! Time evolution `psi(t) = exp(-iHt) psi(0)` for a time-independent
//! Hermitian `H`.
//!
//! Each substep builds a Lanczos basis of the current state, exponentiates
//! the small tridiagonal matrix exactly and picks the longest substep whose
//! residual estimate stays under `step_tolerance`. The basis is
//! reorthogonalised once per vector, so norm and energy are conserved to
//! roundoff independently of the truncation error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opalg::{norm, vdot, LinearOperator, OpError, SparseOperator, StateVector, C64, HERMITIAN_TOL, ZERO};

const AXPY_CHUNK: usize = 8192;
const MIN_KRYLOV: usize = 4;
pub const DENSE_ORACLE_MAX_DIM: usize = 4096;

#[derive(Debug, Error)]
pub enum PropagateError {
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("invalid propagator setting `{0}`: {1}")]
    Config(&'static str, String),
    #[error("Hamiltonian is not Hermitian (defect {0:e})")]
    NotHermitian(f64),
    #[error("step tolerance {tolerance:e} unattainable at t = {t}: best local error {achieved:e} after {substeps} substeps")]
    Unattainable { t: f64, tolerance: f64, achieved: f64, substeps: usize },
    #[error("dense oracle limited to dimension {max}, got {dim}")]
    TooLarge { dim: usize, max: usize },
    #[error("observer failed: {0}")]
    Observer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagatorConfig {
    /// Sampling interval in units of `1/omega`.
    pub dt_sample: f64,
    pub t_end: f64,
    pub krylov_dim: usize,
    /// Bound on the residual estimate of every substep.
    pub step_tolerance: f64,
    /// Substeps allowed per sampling interval.
    pub max_substeps: usize,
    /// Optional cap on the substep length.
    pub max_step: Option<f64>,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self { dt_sample: 0.05, t_end: 32.0, krylov_dim: 30, step_tolerance: 1e-10, max_substeps: 10_000, max_step: None }
    }
}

impl PropagatorConfig {
    pub fn validate(&self) -> Result<(), PropagateError> {
        let bad = |name, msg: &str| Err(PropagateError::Config(name, msg.to_string()));
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad("t_end", "must be positive");
        }
        if !(self.dt_sample > 0.0 && self.dt_sample.is_finite()) {
            return bad("dt_sample", "must be positive");
        }
        if self.krylov_dim < 2 {
            return bad("krylov_dim", "must be at least 2");
        }
        if !(self.step_tolerance > 0.0) {
            return bad("step_tolerance", "must be positive");
        }
        if self.max_substeps == 0 {
            return bad("max_substeps", "must be at least 1");
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0) {
                return bad("max_step", "must be positive");
            }
        }
        Ok(())
    }

    /// Sample times `0, dt, 2dt, ...`, ending exactly at `t_end`.
    pub fn sample_times(&self) -> Vec<f64> {
        let n = (self.t_end / self.dt_sample - 1e-9).ceil() as usize;
        (0..=n).map(|k| (k as f64 * self.dt_sample).min(self.t_end)).collect()
    }
}

/// Counters accumulated over an evolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub substeps: usize,
    pub matvecs: usize,
    pub max_step_error: f64,
}

impl StepStats {
    fn absorb(&mut self, o: StepStats) {
        self.substeps += o.substeps;
        self.matvecs += o.matvecs;
        self.max_step_error = self.max_step_error.max(o.max_step_error);
    }
}

/// Sampled evolution record.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub energies: Vec<f64>,
    /// `observables[k][s]`: observer `k` at sample `s`.
    pub observables: Vec<Vec<C64>>,
    pub snapshots: Vec<StateVector>,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn max_norm_drift(&self) -> f64 {
        self.norms.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max)
    }

    /// `max_t |E(t) - E(0)| / (1 + |E(0)|)`
    pub fn max_energy_drift(&self) -> f64 {
        let Some(&e0) = self.energies.first() else { return 0.0 };
        self.energies.iter().map(|e| (e - e0).abs() / (1.0 + e0.abs())).fold(0.0, f64::max)
    }
}

/// Lanczos exponential integrator with reusable work buffers.
pub struct Propagator {
    cfg: PropagatorConfig,
    basis: Vec<Vec<C64>>,
    work: Vec<C64>,
}

struct Krylov {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// Coupling out of the basis; zero on breakdown.
    residual: f64,
}

impl Propagator {
    pub fn new(cfg: PropagatorConfig) -> Result<Self, PropagateError> {
        cfg.validate()?;
        Ok(Self { cfg, basis: Vec::new(), work: Vec::new() })
    }

    pub fn config(&self) -> &PropagatorConfig {
        &self.cfg
    }

    /// Builds the Krylov basis of `psi`, stopping as soon as the residual
    /// estimate for a step of `tau` meets the tolerance.
    fn lanczos(&mut self, h: &dyn LinearOperator, psi: &[C64], beta0: f64, tau: f64) -> Krylov {
        let n = psi.len();
        let m = self.cfg.krylov_dim.min(n);
        if self.basis.len() < m || self.basis.first().is_some_and(|v| v.len() != n) {
            self.basis = (0..m).map(|_| vec![ZERO; n]).collect();
        }
        if self.work.len() != n {
            self.work = vec![ZERO; n];
        }
        let inv = 1.0 / beta0;
        self.basis[0].par_iter_mut().zip(psi.par_iter()).for_each(|(v, x)| *v = x * inv);
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        let mut residual = 0.0;
        for j in 0..m {
            let (done, rest) = self.basis.split_at_mut(j + 1);
            let vj = &done[j];
            let w = &mut self.work;
            h.apply_into(vj, w);
            let a = vdot(vj, w).re;
            let prev = if j > 0 { Some((&done[j - 1], beta[j - 1])) } else { None };
            w.par_chunks_mut(AXPY_CHUNK).enumerate().for_each(|(c, wc)| {
                let off = c * AXPY_CHUNK;
                for (i, x) in wc.iter_mut().enumerate() {
                    *x -= vj[off + i] * a;
                    if let Some((vp, b)) = prev {
                        *x -= vp[off + i] * b;
                    }
                }
            });
            project_out(w, done);
            alpha.push(a);
            let b = norm(w);
            let scale = alpha.iter().chain(beta.iter()).fold(1.0f64, |s, x| s.max(x.abs()));
            if b <= 1e-13 * scale {
                residual = 0.0;
                break;
            }
            if j + 1 == m {
                residual = b;
                break;
            }
            if j + 1 >= MIN_KRYLOV {
                let t = Tridiagonal::new(&alpha, &beta);
                if t.error(beta0, b, tau) <= self.cfg.step_tolerance {
                    residual = b;
                    break;
                }
            }
            beta.push(b);
            let inv = 1.0 / b;
            rest[0].par_iter_mut().zip(w.par_iter()).for_each(|(v, x)| *v = x * inv);
        }
        beta.truncate(alpha.len().saturating_sub(1));
        Krylov { alpha, beta, residual }
    }

    /// Advances `psi` by `t` (either sign) under `h`.
    pub fn advance(&mut self, h: &dyn LinearOperator, psi: &mut StateVector, t: f64) -> Result<StepStats, PropagateError> {
        if psi.fingerprint() != h.fingerprint() {
            return Err(OpError::FingerprintMismatch(psi.fingerprint(), h.fingerprint()).into());
        }
        let mut stats = StepStats::default();
        let mut done = 0.0f64;
        let target = t.abs();
        let sign = t.signum();
        while done < target {
            if stats.substeps >= self.cfg.max_substeps {
                return Err(PropagateError::Unattainable {
                    t: done,
                    tolerance: self.cfg.step_tolerance,
                    achieved: stats.max_step_error,
                    substeps: stats.substeps,
                });
            }
            let amps = psi.amplitudes();
            let beta0 = norm(amps);
            if beta0 == 0.0 {
                break;
            }
            let mut tau = target - done;
            if let Some(cap) = self.cfg.max_step {
                tau = tau.min(cap);
            }
            let kry = self.lanczos(h, amps, beta0, tau);
            stats.matvecs += kry.alpha.len();
            let k = kry.alpha.len();
            let tri = Tridiagonal::new(&kry.alpha, &kry.beta);
            let err = |tau: f64| tri.error(beta0, kry.residual, tau);
            let tol = self.cfg.step_tolerance;
            if err(tau) > tol {
                let mut lo = 0.0;
                let mut hi = tau;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if err(mid) <= tol {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-3 * hi {
                        break;
                    }
                }
                if lo <= f64::EPSILON * (1.0 + done) {
                    return Err(PropagateError::Unattainable {
                        t: done,
                        tolerance: tol,
                        achieved: err(hi),
                        substeps: stats.substeps,
                    });
                }
                tau = lo;
            }
            let step_err = err(tau);
            let c = tri.coefficients(sign * tau);
            let out = psi.amplitudes_mut();
            let basis = &self.basis;
            out.par_chunks_mut(AXPY_CHUNK).enumerate().for_each(|(chunk, oc)| {
                let off = chunk * AXPY_CHUNK;
                for (i, x) in oc.iter_mut().enumerate() {
                    let mut acc = ZERO;
                    for (l, v) in basis.iter().take(k).enumerate() {
                        acc += v[off + i] * c[l];
                    }
                    *x = acc * beta0;
                }
            });
            stats.substeps += 1;
            stats.max_step_error = stats.max_step_error.max(step_err);
            if target - done - tau <= 1e-15 * target.max(1.0) {
                done = target;
            } else {
                done += tau;
            }
        }
        Ok(stats)
    }
}

/// Eigendecomposition of the Lanczos tridiagonal matrix.
struct Tridiagonal {
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    k: usize,
}

impl Tridiagonal {
    fn new(alpha: &[f64], beta: &[f64]) -> Self {
        let k = alpha.len();
        let tmat = DMatrix::from_fn(k, k, |r, c| {
            if r == c {
                alpha[r]
            } else if r.abs_diff(c) == 1 {
                beta[r.min(c)]
            } else {
                0.0
            }
        });
        Self { eig: SymmetricEigen::new(tmat), k }
    }

    /// `exp(-i T tau) e1`
    fn coefficients(&self, tau: f64) -> DVector<C64> {
        let q = &self.eig.eigenvectors;
        let k = self.k;
        let phase: Vec<C64> = (0..k).map(|l| C64::from_polar(q[(0, l)], -self.eig.eigenvalues[l] * tau)).collect();
        DVector::from_fn(k, |r, _| (0..k).map(|l| phase[l] * q[(r, l)]).sum())
    }

    fn error(&self, beta0: f64, residual: f64, tau: f64) -> f64 {
        let q = &self.eig.eigenvectors;
        let last: C64 = (0..self.k)
            .map(|l| C64::from_polar(q[(0, l)] * q[(self.k - 1, l)], -self.eig.eigenvalues[l] * tau))
            .sum();
        beta0 * residual * last.norm()
    }
}

/// Removes the components of `w` along the orthonormal `basis` in one
/// classical Gram-Schmidt pass.
fn project_out(w: &mut [C64], basis: &[Vec<C64>]) {
    let k = basis.len();
    let partial: Vec<Vec<C64>> = w
        .par_chunks(AXPY_CHUNK)
        .enumerate()
        .map(|(c, wc)| {
            let off = c * AXPY_CHUNK;
            basis
                .iter()
                .map(|v| v[off..off + wc.len()].iter().zip(wc).fold(ZERO, |acc, (x, y)| acc + x.conj() * y))
                .collect()
        })
        .collect();
    let mut coeffs = vec![ZERO; k];
    for p in &partial {
        for (c, x) in coeffs.iter_mut().zip(p) {
            *c += x;
        }
    }
    w.par_chunks_mut(AXPY_CHUNK).enumerate().for_each(|(c, wc)| {
        let off = c * AXPY_CHUNK;
        for (l, v) in basis.iter().enumerate() {
            let a = coeffs[l];
            let len = wc.len();
            for (x, y) in wc.iter_mut().zip(&v[off..off + len]) {
                *x -= y * a;
            }
        }
    });
}

fn check_hermitian(h: &dyn LinearOperator) -> Result<(), PropagateError> {
    let d = h.hermiticity_defect();
    if d > HERMITIAN_TOL {
        return Err(PropagateError::NotHermitian(d));
    }
    Ok(())
}

/// `<psi|H|psi>` real part.
pub fn energy(h: &dyn LinearOperator, psi: &StateVector) -> f64 {
    let mut y = vec![ZERO; psi.dim()];
    h.apply_into(psi.amplitudes(), &mut y);
    vdot(psi.amplitudes(), &y).re
}

/// Evolves `psi0` and calls `on_sample(index, t, psi)` at every sample
/// time. Norms and energies are recorded; `observables` stays empty.
pub fn evolve_with<F>(
    h: &dyn LinearOperator,
    psi0: &StateVector,
    cfg: &PropagatorConfig,
    mut on_sample: F,
) -> Result<Trajectory, PropagateError>
where
    F: FnMut(usize, f64, &StateVector) -> Result<(), String>,
{
    check_hermitian(h)?;
    if psi0.fingerprint() != h.fingerprint() {
        return Err(OpError::FingerprintMismatch(psi0.fingerprint(), h.fingerprint()).into());
    }
    let mut prop = Propagator::new(*cfg)?;
    let mut psi = psi0.clone();
    let mut traj = Trajectory::default();
    let mut t_prev = 0.0;
    for (s, t) in cfg.sample_times().into_iter().enumerate() {
        if s > 0 {
            let stats = prop.advance(h, &mut psi, t - t_prev).map_err(|e| match e {
                PropagateError::Unattainable { tolerance, achieved, substeps, .. } => {
                    PropagateError::Unattainable { t: t_prev, tolerance, achieved, substeps }
                }
                e => e,
            })?;
            traj.stats.absorb(stats);
        }
        traj.times.push(t);
        traj.norms.push(psi.norm());
        traj.energies.push(energy(h, &psi));
        on_sample(s, t, &psi).map_err(PropagateError::Observer)?;
        t_prev = t;
    }
    Ok(traj)
}

/// Evolves `psi0`, recording the expectation of each observer at every
/// sample.
pub fn evolve(
    h: &dyn LinearOperator,
    psi0: &StateVector,
    cfg: &PropagatorConfig,
    observers: &[&SparseOperator],
) -> Result<Trajectory, PropagateError> {
    let mut values: Vec<Vec<C64>> = vec![Vec::new(); observers.len()];
    let mut traj = evolve_with(h, psi0, cfg, |_, _, psi| {
        for (k, op) in observers.iter().enumerate() {
            values[k].push(op.expectation(psi).map_err(|e| e.to_string())?);
        }
        Ok(())
    })?;
    traj.observables = values;
    Ok(traj)
}

/// Exact evolution through a dense Hermitian eigendecomposition.
pub struct DenseEvolver {
    fingerprint: u64,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<C64>,
}

impl DenseEvolver {
    pub fn new(h: &SparseOperator) -> Result<Self, PropagateError> {
        let n = h.dim();
        if n > DENSE_ORACLE_MAX_DIM {
            return Err(PropagateError::TooLarge { dim: n, max: DENSE_ORACLE_MAX_DIM });
        }
        check_hermitian(h)?;
        let eig = SymmetricEigen::new(h.to_dense());
        Ok(Self { fingerprint: h.fingerprint(), eigenvalues: eig.eigenvalues, eigenvectors: eig.eigenvectors })
    }

    pub fn evolve(&self, psi: &StateVector, t: f64) -> Result<StateVector, PropagateError> {
        if psi.fingerprint() != self.fingerprint {
            return Err(OpError::FingerprintMismatch(psi.fingerprint(), self.fingerprint).into());
        }
        let v = DVector::from_column_slice(psi.amplitudes());
        let mut c = self.eigenvectors.adjoint() * v;
        for (z, e) in c.iter_mut().zip(self.eigenvalues.iter()) {
            *z *= C64::from_polar(1.0, -e * t);
        }
        let out = &self.eigenvectors * c;
        Ok(StateVector::from_raw(self.fingerprint, out.iter().copied().collect()))
    }
}

pub fn evolve_dense_oracle(h: &SparseOperator, psi0: &StateVector, t: f64) -> Result<StateVector, PropagateError> {
    DenseEvolver::new(h)?.evolve(psi0, t)
}
