//! Reduced density matrices, von Neumann entropy and quantum mutual
//! information `I(A:B) = S(A) + S(B) - S(AB)` of pure global states.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hspace::{Partition, SpaceError, SpaceSpec};
use crate::opalg::{OpError, StateVector, C64, ZERO};

pub const DEFAULT_KEPT_DIM_GUARD: usize = 4096;
const EIGEN_FLOOR: f64 = 1e-14;
const NEGATIVITY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EntangleError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("kept dimension {dim} exceeds the dense guard {guard}")]
    GuardExceeded { dim: usize, guard: usize },
    #[error("subsystem `{0}` appears in both groups")]
    Overlap(String),
    #[error("density matrix has eigenvalue {0:e} below the clipping tolerance")]
    Negative(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyUnit {
    #[default]
    Nats,
    Bits,
}

impl EntropyUnit {
    fn scale(self) -> f64 {
        match self {
            EntropyUnit::Nats => 1.0,
            EntropyUnit::Bits => 1.0 / std::f64::consts::LN_2,
        }
    }
}

/// Density matrix of a group of subsystems, basis ordered as in the space.
#[derive(Debug, Clone)]
pub struct ReducedDensity {
    pub labels: Vec<String>,
    pub dims: Vec<usize>,
    pub matrix: DMatrix<C64>,
}

impl ReducedDensity {
    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let m = &self.matrix;
        (m - m.adjoint()).iter().fold(0.0, |a, z| a.max(z.norm()))
    }

    /// Eigenvalues with values in `[-1e-12, 0)` clipped to zero.
    pub fn eigenvalues(&self) -> Result<Vec<f64>, EntangleError> {
        let eig = SymmetricEigen::new(self.matrix.clone());
        let mut out = Vec::with_capacity(eig.eigenvalues.len());
        for &l in eig.eigenvalues.iter() {
            if l < -NEGATIVITY_TOL {
                return Err(EntangleError::Negative(l));
            }
            out.push(l.max(0.0));
        }
        Ok(out)
    }

    /// Traces out every local factor whose position is not in `keep`
    /// (positions into `self.dims`, ascending).
    pub fn reduce(&self, keep: &[usize]) -> ReducedDensity {
        let n = self.dims.len();
        let strides = strides_of(&self.dims);
        let kdims: Vec<usize> = keep.iter().map(|&k| self.dims[k]).collect();
        let kstrides = strides_of(&kdims);
        let kdim: usize = kdims.iter().product();
        let split = |i: usize| -> (usize, usize) {
            let mut kept = 0;
            let mut rest = 0;
            let mut ki = 0;
            for k in 0..n {
                let o = (i / strides[k]) % self.dims[k];
                if ki < keep.len() && keep[ki] == k {
                    kept += o * kstrides[ki];
                    ki += 1;
                } else {
                    rest = rest * self.dims[k] + o;
                }
            }
            (kept, rest)
        };
        let total = self.matrix.nrows();
        let parts: Vec<(usize, usize)> = (0..total).map(split).collect();
        let mut out = DMatrix::<C64>::zeros(kdim, kdim);
        for r in 0..total {
            for c in 0..total {
                if parts[r].1 == parts[c].1 {
                    out[(parts[r].0, parts[c].0)] += self.matrix[(r, c)];
                }
            }
        }
        ReducedDensity { labels: keep.iter().map(|&k| self.labels[k].clone()).collect(), dims: kdims, matrix: out }
    }
}

fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

/// `rho = Tr_traced |psi><psi|` with the default dimension guard.
pub fn partial_trace(space: &SpaceSpec, psi: &StateVector, part: &Partition) -> Result<ReducedDensity, EntangleError> {
    partial_trace_guarded(space, psi, part, DEFAULT_KEPT_DIM_GUARD)
}

pub fn partial_trace_guarded(
    space: &SpaceSpec,
    psi: &StateVector,
    part: &Partition,
    guard: usize,
) -> Result<ReducedDensity, EntangleError> {
    if psi.fingerprint() != space.fingerprint() {
        return Err(OpError::FingerprintMismatch(psi.fingerprint(), space.fingerprint()).into());
    }
    if part.fingerprint() != space.fingerprint() {
        return Err(OpError::FingerprintMismatch(part.fingerprint(), space.fingerprint()).into());
    }
    let kept_dim = part.kept_dim(space);
    if kept_dim > guard {
        return Err(EntangleError::GuardExceeded { dim: kept_dim, guard });
    }
    let total = space.total_dim();
    let traced_dim = total / kept_dim;
    let dims = space.dims();
    let strides = space.strides();
    let kdims: Vec<usize> = part.kept().iter().map(|&k| dims[k]).collect();
    let kstrides = strides_of(&kdims);
    let tdims: Vec<usize> = part.traced().iter().map(|&k| dims[k]).collect();
    let tstrides = strides_of(&tdims);
    // M[kept, traced] = psi[index], so rho = M M^dagger
    let amps = psi.amplitudes();
    let mut m = DMatrix::<C64>::zeros(kept_dim, traced_dim);
    for t in 0..traced_dim {
        let mut base = 0;
        for (j, &k) in part.traced().iter().enumerate() {
            base += ((t / tstrides[j]) % tdims[j]) * strides[k];
        }
        for kk in 0..kept_dim {
            let mut idx = base;
            for (j, &k) in part.kept().iter().enumerate() {
                idx += ((kk / kstrides[j]) % kdims[j]) * strides[k];
            }
            m[(kk, t)] = amps[idx];
        }
    }
    let matrix = gram(&m);
    Ok(ReducedDensity {
        labels: part.kept_labels(space).into_iter().map(String::from).collect(),
        dims: kdims,
        matrix,
    })
}

/// `M M^dagger`, one row pair per task, summed in a fixed order.
fn gram(m: &DMatrix<C64>) -> DMatrix<C64> {
    let k = m.nrows();
    let rows: Vec<Vec<C64>> = (0..k).map(|r| m.row(r).iter().copied().collect()).collect();
    let upper: Vec<Vec<C64>> = (0..k)
        .into_par_iter()
        .map(|r| {
            (r..k)
                .map(|c| rows[r].iter().zip(&rows[c]).fold(ZERO, |acc, (x, y)| acc + x * y.conj()))
                .collect()
        })
        .collect();
    let mut out = DMatrix::<C64>::zeros(k, k);
    for r in 0..k {
        for (off, &v) in upper[r].iter().enumerate() {
            let c = r + off;
            out[(r, c)] = v;
            out[(c, r)] = v.conj();
        }
        out[(r, r)] = C64::new(out[(r, r)].re, 0.0);
    }
    out
}

/// `-sum l ln l` over eigenvalues above `1e-14`, in nats.
pub fn von_neumann_entropy(rho: &ReducedDensity) -> Result<f64, EntangleError> {
    Ok(entropy_of(&rho.eigenvalues()?))
}

pub fn entropy_in(rho: &ReducedDensity, unit: EntropyUnit) -> Result<f64, EntangleError> {
    Ok(von_neumann_entropy(rho)? * unit.scale())
}

fn entropy_of(eigenvalues: &[f64]) -> f64 {
    let s: f64 = eigenvalues.iter().filter(|&&l| l > EIGEN_FLOOR).map(|&l| -l * l.ln()).sum();
    s.max(0.0)
}

/// Entropies of both groups and of their union.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualInformation {
    pub s_a: f64,
    pub s_b: f64,
    pub s_ab: f64,
}

impl MutualInformation {
    pub fn value(&self) -> f64 {
        self.s_a + self.s_b - self.s_ab
    }
}

pub fn mutual_information_parts(
    space: &SpaceSpec,
    psi: &StateVector,
    group_a: &[&str],
    group_b: &[&str],
    guard: usize,
) -> Result<MutualInformation, EntangleError> {
    for l in group_a {
        if group_b.contains(l) {
            return Err(EntangleError::Overlap(l.to_string()));
        }
    }
    let joint: Vec<&str> = group_a.iter().chain(group_b).copied().collect();
    let part = space.partition(&joint)?;
    let rho_ab = partial_trace_guarded(space, psi, &part, guard)?;
    let pos_a: Vec<usize> = part.kept().iter().enumerate()
        .filter(|(_, &k)| group_a.contains(&space.subsystems()[k].label.as_str()))
        .map(|(j, _)| j)
        .collect();
    let pos_b: Vec<usize> = (0..part.kept().len()).filter(|j| !pos_a.contains(j)).collect();
    let s_ab = von_neumann_entropy(&rho_ab)?;
    let s_a = von_neumann_entropy(&rho_ab.reduce(&pos_a))?;
    let s_b = von_neumann_entropy(&rho_ab.reduce(&pos_b))?;
    Ok(MutualInformation { s_a, s_b, s_ab })
}

/// `I(A:B)` in nats.
pub fn mutual_information(
    space: &SpaceSpec,
    psi: &StateVector,
    group_a: &[&str],
    group_b: &[&str],
) -> Result<f64, EntangleError> {
    Ok(mutual_information_parts(space, psi, group_a, group_b, DEFAULT_KEPT_DIM_GUARD)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hspace::SubsystemSpec;
    use crate::opalg::ONE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn qubits(n: usize) -> SpaceSpec {
        SpaceSpec::new((0..n).map(|k| SubsystemSpec::two_level(format!("q{k}"))).collect()).unwrap()
    }

    fn bell() -> (SpaceSpec, StateVector) {
        let s = qubits(2);
        let h = C64::new(0.5f64.sqrt(), 0.0);
        let psi = StateVector::from_amplitudes(&s, vec![h, ZERO, ZERO, h]).unwrap();
        (s, psi)
    }

    fn random_state(space: &SpaceSpec, seed: u64) -> StateVector {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let amps: Vec<C64> =
            (0..space.total_dim()).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let mut psi = StateVector::from_amplitudes(space, amps).unwrap();
        psi.normalize();
        psi
    }

    /// Brute force: rho[k1,k2] = sum over all index pairs that agree on
    /// the traced subsystems.
    fn naive(space: &SpaceSpec, psi: &StateVector, part: &Partition) -> DMatrix<C64> {
        let kd = part.kept_dim(space);
        let mut out = DMatrix::<C64>::zeros(kd, kd);
        let n = space.total_dim();
        let kept_index = |occ: &[usize]| part.kept().iter().fold(0, |acc, &k| acc * space.dims()[k] + occ[k]);
        for i in 0..n {
            let oi = space.basis_unindex(i).unwrap();
            for j in 0..n {
                let oj = space.basis_unindex(j).unwrap();
                if part.traced().iter().all(|&k| oi[k] == oj[k]) {
                    out[(kept_index(&oi), kept_index(&oj))] += psi.amplitudes()[i] * psi.amplitudes()[j].conj();
                }
            }
        }
        out
    }

    #[test]
    fn bell_state() {
        let (s, psi) = bell();
        let rho = partial_trace(&s, &psi, &s.partition(&["q0"]).unwrap()).unwrap();
        let half = DMatrix::<C64>::identity(2, 2) * C64::new(0.5, 0.0);
        assert!((&rho.matrix - half).iter().all(|z| z.norm() < 1e-15));
        assert!((von_neumann_entropy(&rho).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((entropy_in(&rho, EntropyUnit::Bits).unwrap() - 1.0).abs() < 1e-12);
        let i = mutual_information(&s, &psi, &["q0"], &["q1"]).unwrap();
        assert!((i - 2.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn diagonal_entropy() {
        let rho = ReducedDensity {
            labels: vec!["x".into()],
            dims: vec![3],
            matrix: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
                C64::new(0.7, 0.0),
                C64::new(0.2, 0.0),
                C64::new(0.1, 0.0),
            ])),
        };
        let expect = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        let s = von_neumann_entropy(&rho).unwrap();
        assert!((s - expect).abs() < 1e-14);
        assert!((s - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn matches_naive_oracle() {
        let space = SpaceSpec::new(vec![
            SubsystemSpec::boson("a", 2),
            SubsystemSpec::two_level("e"),
            SubsystemSpec::boson("b", 1),
            SubsystemSpec::boson("c", 3),
        ])
        .unwrap();
        let psi = random_state(&space, 7);
        for kept in [vec!["a"], vec!["e", "c"], vec!["a", "b"], vec!["c"], vec!["a", "e", "b", "c"], vec!["b", "e"]] {
            let part = space.partition(&kept).unwrap();
            let rho = partial_trace(&space, &psi, &part).unwrap();
            let d = (&rho.matrix - naive(&space, &psi, &part)).iter().fold(0.0f64, |m, z| m.max(z.norm()));
            assert!(d <= 1e-12, "{kept:?}: {d:e}");
            assert!((rho.trace() - ONE).norm() < 1e-10);
            assert!(rho.hermiticity_defect() < 1e-12);
        }
    }

    #[test]
    fn reduce_matches_direct_trace() {
        let space = SpaceSpec::new(vec![
            SubsystemSpec::boson("a", 2),
            SubsystemSpec::two_level("e"),
            SubsystemSpec::boson("c", 2),
        ])
        .unwrap();
        let psi = random_state(&space, 3);
        let full = partial_trace(&space, &psi, &space.partition(&["a", "e", "c"]).unwrap()).unwrap();
        for (keep, labels) in [(vec![0], vec!["a"]), (vec![1, 2], vec!["e", "c"]), (vec![0, 2], vec!["a", "c"])] {
            let direct = partial_trace(&space, &psi, &space.partition(&labels).unwrap()).unwrap();
            let r = full.reduce(&keep);
            assert!((&r.matrix - &direct.matrix).iter().all(|z| z.norm() < 1e-13));
            assert_eq!(r.dims, direct.dims);
        }
    }

    #[test]
    fn product_state_has_no_information() {
        let s = qubits(3);
        let h = C64::new(0.5f64.sqrt(), 0.0);
        // |+> |0> |+>
        let mut amps = vec![ZERO; 8];
        for a in 0..2 {
            for c in 0..2 {
                amps[a * 4 + c] = h * h;
            }
        }
        let psi = StateVector::from_amplitudes(&s, amps).unwrap();
        let rho = partial_trace(&s, &psi, &s.partition(&["q0"]).unwrap()).unwrap();
        let ev = rho.eigenvalues().unwrap();
        assert!(ev.iter().filter(|&&l| l > 1e-12).count() == 1);
        assert!(mutual_information(&s, &psi, &["q0"], &["q2"]).unwrap().abs() < 1e-12);
        assert!(mutual_information(&s, &psi, &["q0", "q1"], &["q2"]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let (s, psi) = bell();
        assert!(matches!(mutual_information(&s, &psi, &["q0"], &["q0"]), Err(EntangleError::Overlap(_))));
        let part = s.partition(&["q0", "q1"]).unwrap();
        assert!(matches!(partial_trace_guarded(&s, &psi, &part, 2), Err(EntangleError::GuardExceeded { .. })));
        let other = qubits(3);
        let wrong = StateVector::basis(&other, &[0, 0, 0]).unwrap();
        assert!(partial_trace(&s, &wrong, &part).is_err());
        let bad = ReducedDensity {
            labels: vec!["x".into()],
            dims: vec![2],
            matrix: DMatrix::from_row_slice(2, 2, &[C64::new(1.1, 0.0), ZERO, ZERO, C64::new(-0.1, 0.0)]),
        };
        assert!(matches!(von_neumann_entropy(&bad), Err(EntangleError::Negative(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn complementarity_and_bounds(seed in 0u64..10_000, split in 1usize..4) {
            let space = SpaceSpec::new(vec![
                SubsystemSpec::boson("a", 2),
                SubsystemSpec::two_level("e"),
                SubsystemSpec::boson("b", 1),
                SubsystemSpec::boson("c", 2),
            ]).unwrap();
            let labels = ["a", "e", "b", "c"];
            let psi = random_state(&space, seed);
            let kept = &labels[..split];
            let traced = &labels[split..];
            let sk = von_neumann_entropy(&partial_trace(&space, &psi, &space.partition(kept).unwrap()).unwrap()).unwrap();
            let st = von_neumann_entropy(&partial_trace(&space, &psi, &space.partition(traced).unwrap()).unwrap()).unwrap();
            prop_assert!((sk - st).abs() <= 1e-9);
            let i_ab = mutual_information(&space, &psi, kept, traced).unwrap();
            let i_ba = mutual_information(&space, &psi, traced, kept).unwrap();
            prop_assert_eq!(i_ab, i_ba);
            prop_assert!((i_ab - 2.0 * sk).abs() <= 1e-9);
            let i = mutual_information(&space, &psi, &["a"], &["c"]).unwrap();
            prop_assert!(i >= -1e-9);
        }
    }
}
