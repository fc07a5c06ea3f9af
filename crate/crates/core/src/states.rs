//! Initial states: truncated coherent states, the electron-phonon ground
//! state and the full interferometer input.
//!
//! The first beam splitter acts on `|alpha> x |0>` analytically, giving
//! `|alpha/sqrt2>` on pump A and `|i alpha/sqrt2>` on pump B. All other
//! modes start in vacuum and every electron in `|g>`.

use log::info;
use nalgebra::DMatrix;
use thiserror::Error;

use crate::hspace::{SpaceError, SpaceSpec, SubsystemKind};
use crate::model::{matter_hamiltonian, ModelError, ModelParams, SiteLabels, SiteLayout};
use crate::opalg::{OpError, StateVector, C64, I, ONE, ZERO};

pub const DEFAULT_TAIL_BOUND: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum StateError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("`{0}` is not a boson mode")]
    NotBoson(String),
    #[error("coherent state on `{label}` loses {tail:e} of its weight above the cutoff (bound {bound:e})")]
    TailExceeded { label: String, tail: f64, bound: f64 },
    #[error("local vector for `{label}` has length {found}, expected {expected}")]
    LocalDim { label: String, expected: usize, found: usize },
}

/// A coherent amplitude on one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherentSpec {
    pub label: String,
    pub alpha: C64,
}

/// Truncated coherent state of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedCoherent {
    /// Renormalised amplitudes on `|0>..|N>`.
    pub amplitudes: Vec<C64>,
    /// Poisson weight above the cutoff.
    pub tail: f64,
    /// Factor the truncated amplitudes were multiplied by.
    pub renormalization: f64,
}

/// Poisson weight `sum_{n > cutoff} e^{-m} m^n / n!` for mean `m`,
/// summed directly so tiny tails keep full relative precision.
pub fn poisson_tail(mean: f64, cutoff: usize) -> f64 {
    if mean == 0.0 {
        return 0.0;
    }
    let mut log_p = -mean;
    for n in 1..=cutoff + 1 {
        log_p += mean.ln() - (n as f64).ln();
    }
    let mut tail = 0.0;
    let mut n = cutoff + 1;
    loop {
        let p = log_p.exp();
        tail += p;
        n += 1;
        log_p += mean.ln() - (n as f64).ln();
        if (n as f64) > mean && log_p.exp() < tail * 1e-17 || n > cutoff + 100_000 {
            break;
        }
    }
    tail
}

pub fn truncated_coherent(alpha: C64, cutoff: usize) -> TruncatedCoherent {
    let mut amplitudes = Vec::with_capacity(cutoff + 1);
    let mut a = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    amplitudes.push(a);
    for n in 1..=cutoff {
        a = a * alpha / (n as f64).sqrt();
        amplitudes.push(a);
    }
    let kept: f64 = amplitudes.iter().map(|z| z.norm_sqr()).sum();
    let renormalization = 1.0 / kept.sqrt();
    for z in &mut amplitudes {
        *z *= renormalization;
    }
    TruncatedCoherent { amplitudes, tail: poisson_tail(alpha.norm_sqr(), cutoff), renormalization }
}

/// Kronecker product of per-subsystem vectors; subsystems not listed sit
/// in their local state 0.
pub fn product_state(space: &SpaceSpec, factors: &[(&str, Vec<C64>)]) -> Result<StateVector, StateError> {
    let mut locals: Vec<Option<&Vec<C64>>> = vec![None; space.len()];
    for (label, v) in factors {
        let k = space.position(label)?;
        if v.len() != space.dims()[k] {
            return Err(StateError::LocalDim { label: label.to_string(), expected: space.dims()[k], found: v.len() });
        }
        locals[k] = Some(v);
    }
    let mut amps = vec![ONE];
    for (k, local) in locals.iter().enumerate() {
        let d = space.dims()[k];
        let mut next = Vec::with_capacity(amps.len() * d);
        for &x in &amps {
            match local {
                Some(v) => next.extend(v.iter().map(|&y| x * y)),
                None => {
                    next.push(x);
                    next.extend(std::iter::repeat_n(ZERO, d - 1));
                }
            }
        }
        amps = next;
    }
    Ok(StateVector::from_amplitudes(space, amps)?)
}

fn boson_cutoff(space: &SpaceSpec, label: &str) -> Result<usize, StateError> {
    match space.subsystem(label)?.kind {
        SubsystemKind::Boson { cutoff } => Ok(cutoff),
        SubsystemKind::TwoLevel => Err(StateError::NotBoson(label.to_string())),
    }
}

fn checked_coherent(space: &SpaceSpec, spec: &CoherentSpec, tail_bound: f64) -> Result<TruncatedCoherent, StateError> {
    let cutoff = boson_cutoff(space, &spec.label)?;
    let c = truncated_coherent(spec.alpha, cutoff);
    if c.tail > tail_bound {
        return Err(StateError::TailExceeded { label: spec.label.clone(), tail: c.tail, bound: tail_bound });
    }
    if c.tail > 0.0 {
        info!("coherent state on {}: tail {:.3e} discarded, renormalised by {:.15}", spec.label, c.tail, c.renormalization);
    }
    Ok(c)
}

/// Coherent state on one mode; everything else in local state 0.
pub fn coherent(space: &SpaceSpec, label: &str, alpha: C64, tail_bound: f64) -> Result<(StateVector, f64), StateError> {
    let c = checked_coherent(space, &CoherentSpec { label: label.into(), alpha }, tail_bound)?;
    Ok((product_state(space, &[(label, c.amplitudes)])?, c.tail))
}

/// `|g> x |0_phonon>` on the site, every other subsystem in local state 0.
pub fn matter_ground(space: &SpaceSpec, site: &SiteLabels) -> Result<StateVector, StateError> {
    boson_cutoff(space, &site.phonon)?;
    if space.subsystem(&site.electron)?.kind != SubsystemKind::TwoLevel {
        return Err(StateError::Space(SpaceError::UnknownLabel(site.electron.clone())));
    }
    Ok(StateVector::basis(space, &vec![0; space.len()])?)
}

/// Lowest eigenpair of the electron-phonon Hamiltonian of one site,
/// amplitudes ordered phonon-major, electron-minor.
pub fn matter_ground_numerical(params: &ModelParams, phonon_cutoff: usize) -> Result<(f64, Vec<C64>), StateError> {
    let (_, h) = matter_hamiltonian(params, phonon_cutoff)?;
    let dense: DMatrix<f64> = h.to_dense().map(|z| z.re);
    let eig = dense.symmetric_eigen();
    let (k, e) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, e)| (k, *e))
        .expect("nonempty");
    let v = eig.eigenvectors.column(k).iter().map(|&x| C64::new(x, 0.0)).collect();
    Ok((e, v))
}

/// Prepared interferometer input and the discarded coherent tails.
#[derive(Debug, Clone)]
pub struct InitialState {
    pub state: StateVector,
    pub tails: Vec<(String, f64)>,
}

/// Input state for a layout: total pump amplitude `alpha` (real) split by
/// the first beam splitter. A single-site layout receives `|alpha>` on its
/// pump unsplit.
pub fn initial_state(
    space: &SpaceSpec,
    layout: &SiteLayout,
    alpha: f64,
    tail_bound: f64,
) -> Result<InitialState, StateError> {
    layout.check_space(space)?;
    let specs: Vec<CoherentSpec> = if layout.sites.len() == 1 {
        vec![CoherentSpec { label: layout.sites[0].pump.clone(), alpha: C64::new(alpha, 0.0) }]
    } else {
        let half = alpha / 2f64.sqrt();
        vec![
            CoherentSpec { label: layout.sites[0].pump.clone(), alpha: C64::new(half, 0.0) },
            CoherentSpec { label: layout.sites[1].pump.clone(), alpha: I * half },
        ]
    };
    let mut factors = Vec::new();
    let mut tails = Vec::new();
    for spec in &specs {
        let c = checked_coherent(space, spec, tail_bound)?;
        tails.push((spec.label.clone(), c.tail));
        factors.push((spec.label.as_str(), c.amplitudes));
    }
    let state = product_state(space, &factors)?;
    Ok(InitialState { state, tails })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hspace::SubsystemSpec;
    use crate::model::{Cutoffs, Topology};
    use crate::opalg::{self, PauliAxis};
    use proptest::prelude::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    #[test]
    fn tail_matches_direct_sum() {
        for (m, n) in [(4.0f64, 12usize), (16.0, 36), (0.5, 3), (2.0, 20)] {
            let head: f64 = (0..=n as u32).map(|k| (-m).exp() * m.powi(k as i32) / factorial(k)).sum();
            let t = poisson_tail(m, n);
            assert!((t - (1.0 - head)).abs() < 1e-14, "{m} {n}: {t} vs {}", 1.0 - head);
        }
        assert_eq!(poisson_tail(0.0, 3), 0.0);
        // tiny tails keep relative precision
        let t = poisson_tail(1.0, 30);
        let direct: f64 = (31..80).map(|k| (-1.0f64).exp() / factorial(k)).sum();
        assert!((t - direct).abs() / direct < 1e-12);
    }

    #[test]
    fn coherent_basics() {
        let space = SpaceSpec::new(vec![SubsystemSpec::boson("m", 50)]).unwrap();
        let (vac, tail) = coherent(&space, "m", ZERO, DEFAULT_TAIL_BOUND).unwrap();
        assert_eq!(tail, 0.0);
        assert_eq!(vac.amplitudes()[0], ONE);
        let alpha = I * 4.0;
        let (psi, tail) = coherent(&space, "m", alpha, DEFAULT_TAIL_BOUND).unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-12);
        let n = opalg::number(&space, "m").unwrap().expectation(&psi).unwrap().re;
        assert!((n - 16.0).abs() < 50.0 * tail + 1e-12);
        // phase i: <a> = i |alpha|
        let a = opalg::lower(&space, "m").unwrap();
        let ev = vdot_expect(&a, &psi);
        assert!((ev - alpha).norm() < 1e-8);
        assert!(matches!(
            coherent(&space, "m", C64::new(6.0, 0.0), DEFAULT_TAIL_BOUND),
            Err(StateError::TailExceeded { .. })
        ));
    }

    fn vdot_expect(op: &opalg::SparseOperator, psi: &StateVector) -> C64 {
        psi.inner(&op.apply(psi).unwrap()).unwrap()
    }

    #[test]
    fn matter_ground_is_bare_ground() {
        let p = ModelParams::default();
        let (e, v) = matter_ground_numerical(&p, 20).unwrap();
        assert!(e.abs() < 1e-12);
        // |g, 0> is index 0 in phonon-major, electron-minor order
        assert!(v[0].norm_sqr() > 1.0 - 1e-10);
        let layout = SiteLayout::new(Topology::SingleSite);
        let space = layout.space(&Cutoffs::uniform(2)).unwrap();
        let g = matter_ground(&space, &layout.sites[0]).unwrap();
        let ne = opalg::excited_projector(&space, "electron").unwrap();
        assert_eq!(ne.expectation(&g).unwrap(), ZERO);
        assert_eq!(opalg::number(&space, "phonon").unwrap().expectation(&g).unwrap(), ZERO);
        let sz = opalg::pauli(&space, "electron", PauliAxis::Z).unwrap();
        assert_eq!(sz.expectation(&g).unwrap().re, -1.0);
        // with a small gap the displaced excited branch wins
        let low_gap = ModelParams { epsilon: 0.5, nu: 1.0, ..p };
        let (e, _) = matter_ground_numerical(&low_gap, 30).unwrap();
        assert!((e - (0.5 - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn interferometer_input() {
        let layout = SiteLayout::new(Topology::C1);
        let cut = Cutoffs { pump: 14, idler: 1, signal: 1, phonon: 1 };
        let space = layout.space(&cut).unwrap();
        let alpha = 8f64.sqrt();
        let init = initial_state(&space, &layout, alpha, 1e-3).unwrap();
        let psi = &init.state;
        assert!((psi.norm() - 1.0).abs() < 1e-12);
        let tail: f64 = init.tails.iter().map(|t| t.1).sum();
        let na = opalg::number(&space, "pump_A").unwrap().expectation(psi).unwrap().re;
        let nb = opalg::number(&space, "pump_B").unwrap().expectation(psi).unwrap().re;
        assert!((na - 4.0).abs() < 20.0 * tail + 1e-12);
        assert!((na + nb - 8.0).abs() < 40.0 * tail + 1e-12);
        let ca = vdot_expect(&opalg::lower(&space, "pump_A").unwrap(), psi);
        let cb = vdot_expect(&opalg::lower(&space, "pump_B").unwrap(), psi);
        assert!((cb - I * ca).norm() < 1e-12);
        for label in ["idler_A", "idler_B", "signal", "phonon_A", "phonon_B"] {
            assert_eq!(opalg::number(&space, label).unwrap().expectation(psi).unwrap(), ZERO);
        }
        // desk-scale input exceeds the default bound
        assert!(matches!(
            initial_state(&space, &layout, 6.0, DEFAULT_TAIL_BOUND),
            Err(StateError::TailExceeded { .. })
        ));
    }

    #[test]
    fn product_state_layout() {
        let space = SpaceSpec::new(vec![SubsystemSpec::boson("x", 1), SubsystemSpec::two_level("e")]).unwrap();
        let h = C64::new(0.5f64.sqrt(), 0.0);
        let psi = product_state(&space, &[("e", vec![h, h])]).unwrap();
        assert_eq!(psi.amplitudes(), &[h, h, ZERO, ZERO]);
        assert!(matches!(product_state(&space, &[("e", vec![ONE])]), Err(StateError::LocalDim { .. })));
    }

    proptest! {
        #[test]
        fn truncated_coherent_is_normalised(re in -3.0f64..3.0, im in -3.0f64..3.0, cutoff in 1usize..40) {
            let c = truncated_coherent(C64::new(re, im), cutoff);
            let n: f64 = c.amplitudes.iter().map(|z| z.norm_sqr()).sum();
            prop_assert!((n - 1.0).abs() < 1e-12);
            prop_assert!(c.tail >= 0.0 && c.tail <= 1.0);
            let kept = 1.0 / (c.renormalization * c.renormalization);
            prop_assert!((kept + c.tail - 1.0).abs() < 1e-12);
        }
    }
}
