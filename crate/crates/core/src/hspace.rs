//! Composite Hilbert spaces built as ordered tensor products of bosonic
//! modes and two-level systems.
//!
//! Basis indices are row-major: the last listed subsystem varies fastest,
//! so `index = sum_k occupation_k * stride_k` with `stride_last = 1`.
//! Two-level systems use `|g> = 0`, `|e> = 1`.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpaceError {
    #[error("duplicate subsystem label `{0}`")]
    DuplicateLabel(String),
    #[error("boson mode `{0}` must have cutoff >= 1")]
    ZeroCutoff(String),
    #[error("total dimension overflows usize")]
    DimensionOverflow,
    #[error("space has no subsystems")]
    Empty,
    #[error("expected {expected} occupations, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("occupation {value} of `{label}` outside [0, {dim})")]
    OccupationOutOfRange { label: String, value: usize, dim: usize },
    #[error("basis index {index} outside [0, {dim})")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("unknown subsystem label `{0}`")]
    UnknownLabel(String),
    #[error("partition must keep at least one subsystem")]
    EmptyPartition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsystemKind {
    /// Fock states `|0>..|cutoff>`.
    Boson { cutoff: usize },
    TwoLevel,
}

impl SubsystemKind {
    pub fn local_dim(&self) -> usize {
        match *self {
            SubsystemKind::Boson { cutoff } => cutoff + 1,
            SubsystemKind::TwoLevel => 2,
        }
    }

    pub fn is_boson(&self) -> bool {
        matches!(self, SubsystemKind::Boson { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubsystemSpec {
    pub label: String,
    pub kind: SubsystemKind,
}

impl SubsystemSpec {
    pub fn boson(label: impl Into<String>, cutoff: usize) -> Self {
        Self { label: label.into(), kind: SubsystemKind::Boson { cutoff } }
    }

    pub fn two_level(label: impl Into<String>) -> Self {
        Self { label: label.into(), kind: SubsystemKind::TwoLevel }
    }
}

/// Ordered tensor product of subsystems. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceSpec {
    subsystems: Vec<SubsystemSpec>,
    dims: Vec<usize>,
    strides: Vec<usize>,
    total_dim: usize,
    fingerprint: u64,
}

/// Builds a space from an ordered subsystem list.
pub fn build_space(spec: Vec<SubsystemSpec>) -> Result<SpaceSpec, SpaceError> {
    SpaceSpec::new(spec)
}

impl SpaceSpec {
    pub fn new(subsystems: Vec<SubsystemSpec>) -> Result<Self, SpaceError> {
        if subsystems.is_empty() {
            return Err(SpaceError::Empty);
        }
        let mut seen = HashSet::new();
        for s in &subsystems {
            if !seen.insert(s.label.as_str()) {
                return Err(SpaceError::DuplicateLabel(s.label.clone()));
            }
            if let SubsystemKind::Boson { cutoff: 0 } = s.kind {
                return Err(SpaceError::ZeroCutoff(s.label.clone()));
            }
        }
        let dims: Vec<usize> = subsystems.iter().map(|s| s.kind.local_dim()).collect();
        let mut strides = vec![0usize; dims.len()];
        let mut acc: usize = 1;
        for k in (0..dims.len()).rev() {
            strides[k] = acc;
            acc = acc.checked_mul(dims[k]).ok_or(SpaceError::DimensionOverflow)?;
        }
        let mut hasher = DefaultHasher::new();
        subsystems.hash(&mut hasher);
        Ok(Self { subsystems, dims, strides, total_dim: acc, fingerprint: hasher.finish() })
    }

    pub fn subsystems(&self) -> &[SubsystemSpec] {
        &self.subsystems
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Identity of the space for operator/state compatibility checks.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.subsystems.iter().map(|s| s.label.as_str())
    }

    pub fn position(&self, label: &str) -> Result<usize, SpaceError> {
        self.subsystems
            .iter()
            .position(|s| s.label == label)
            .ok_or_else(|| SpaceError::UnknownLabel(label.to_string()))
    }

    pub fn subsystem(&self, label: &str) -> Result<&SubsystemSpec, SpaceError> {
        self.position(label).map(|k| &self.subsystems[k])
    }

    pub fn basis_index(&self, occupations: &[usize]) -> Result<usize, SpaceError> {
        if occupations.len() != self.dims.len() {
            return Err(SpaceError::WrongArity { expected: self.dims.len(), got: occupations.len() });
        }
        let mut index = 0;
        for (k, (&n, &d)) in occupations.iter().zip(&self.dims).enumerate() {
            if n >= d {
                return Err(SpaceError::OccupationOutOfRange {
                    label: self.subsystems[k].label.clone(),
                    value: n,
                    dim: d,
                });
            }
            index += n * self.strides[k];
        }
        Ok(index)
    }

    pub fn basis_unindex(&self, index: usize) -> Result<Vec<usize>, SpaceError> {
        if index >= self.total_dim {
            return Err(SpaceError::IndexOutOfRange { index, dim: self.total_dim });
        }
        Ok(self.dims.iter().zip(&self.strides).map(|(&d, &s)| (index / s) % d).collect())
    }

    /// Occupation of subsystem `k` in basis state `index` (no range check).
    #[inline]
    pub fn occupation_of(&self, index: usize, k: usize) -> usize {
        (index / self.strides[k]) % self.dims[k]
    }

    pub fn partition(&self, kept: &[&str]) -> Result<Partition, SpaceError> {
        if kept.is_empty() {
            return Err(SpaceError::EmptyPartition);
        }
        let mut positions = Vec::with_capacity(kept.len());
        for label in kept {
            let k = self.position(label)?;
            if positions.contains(&k) {
                return Err(SpaceError::DuplicateLabel(label.to_string()));
            }
            positions.push(k);
        }
        positions.sort_unstable();
        let traced = (0..self.len()).filter(|k| !positions.contains(k)).collect();
        Ok(Partition { kept: positions, traced, fingerprint: self.fingerprint })
    }
}

impl fmt::Display for SpaceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .subsystems
            .iter()
            .map(|s| match s.kind {
                SubsystemKind::Boson { cutoff } => format!("{}[<= {}]", s.label, cutoff),
                SubsystemKind::TwoLevel => format!("{}[g,e]", s.label),
            })
            .collect();
        write!(f, "{} (dim {})", parts.join(" x "), self.total_dim)
    }
}

/// Split of a space's subsystems into a kept group and its complement.
/// Positions are stored in space order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    kept: Vec<usize>,
    traced: Vec<usize>,
    fingerprint: u64,
}

impl Partition {
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn traced(&self) -> &[usize] {
        &self.traced
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn kept_labels<'a>(&self, space: &'a SpaceSpec) -> Vec<&'a str> {
        self.kept.iter().map(|&k| space.subsystems[k].label.as_str()).collect()
    }

    pub fn traced_labels<'a>(&self, space: &'a SpaceSpec) -> Vec<&'a str> {
        self.traced.iter().map(|&k| space.subsystems[k].label.as_str()).collect()
    }

    pub fn kept_dim(&self, space: &SpaceSpec) -> usize {
        self.kept.iter().map(|&k| space.dims[k]).product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c1_desk() -> SpaceSpec {
        let mut v = vec![
            SubsystemSpec::boson("pump_A", 12),
            SubsystemSpec::boson("pump_B", 12),
            SubsystemSpec::boson("idler_A", 4),
            SubsystemSpec::boson("idler_B", 4),
            SubsystemSpec::boson("signal", 4),
            SubsystemSpec::boson("phonon_A", 6),
            SubsystemSpec::boson("phonon_B", 6),
        ];
        v.push(SubsystemSpec::two_level("electron_A"));
        v.push(SubsystemSpec::two_level("electron_B"));
        SpaceSpec::new(v).unwrap()
    }

    #[test]
    fn dimensions() {
        assert_eq!(build_space(vec![SubsystemSpec::boson("a", 1)]).unwrap().total_dim(), 2);
        let s = build_space(vec![SubsystemSpec::boson("a", 2), SubsystemSpec::two_level("e")]).unwrap();
        assert_eq!(s.total_dim(), 6);
        assert_eq!(c1_desk().total_dim(), 13 * 13 * 5 * 5 * 5 * 7 * 7 * 2 * 2);
        assert_eq!(c1_desk().total_dim(), 4_140_500);
    }

    #[test]
    fn construction_errors() {
        let dup = build_space(vec![SubsystemSpec::boson("a", 2), SubsystemSpec::two_level("a")]);
        assert_eq!(dup.unwrap_err(), SpaceError::DuplicateLabel("a".into()));
        let zero = build_space(vec![SubsystemSpec::boson("a", 0)]);
        assert_eq!(zero.unwrap_err(), SpaceError::ZeroCutoff("a".into()));
        let huge: Vec<_> = (0..40).map(|k| SubsystemSpec::boson(format!("m{k}"), 9)).collect();
        assert_eq!(build_space(huge).unwrap_err(), SpaceError::DimensionOverflow);
        assert_eq!(build_space(vec![]).unwrap_err(), SpaceError::Empty);
    }

    #[test]
    fn indexing() {
        let s = build_space(vec![SubsystemSpec::boson("a", 2)]).unwrap();
        assert_eq!(s.basis_index(&[0]).unwrap(), 0);
        assert_eq!(s.basis_index(&[2]).unwrap(), 2);
        assert!(matches!(s.basis_index(&[3]), Err(SpaceError::OccupationOutOfRange { .. })));
        assert!(matches!(s.basis_index(&[0, 0]), Err(SpaceError::WrongArity { .. })));
        assert!(s.basis_unindex(3).is_err());
        let c1 = c1_desk();
        assert_eq!(c1.basis_index(&[0; 9]).unwrap(), 0);
        // last subsystem fastest
        assert_eq!(c1.strides()[8], 1);
        assert_eq!(c1.basis_index(&[0, 0, 0, 0, 0, 0, 0, 0, 1]).unwrap(), 1);
    }

    #[test]
    fn exhaustive_bijection_small() {
        let s = build_space(vec![
            SubsystemSpec::boson("a", 3),
            SubsystemSpec::two_level("e"),
            SubsystemSpec::boson("b", 4),
            SubsystemSpec::boson("c", 2),
        ])
        .unwrap();
        for i in 0..s.total_dim() {
            let occ = s.basis_unindex(i).unwrap();
            assert_eq!(s.basis_index(&occ).unwrap(), i);
            for k in 0..s.len() {
                assert_eq!(s.occupation_of(i, k), occ[k]);
                if occ[k] + 1 < s.dims()[k] {
                    let mut up = occ.clone();
                    up[k] += 1;
                    assert_eq!(s.basis_index(&up).unwrap(), i + s.strides()[k]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_c1(occ in (0usize..13, 0usize..13, 0usize..5, 0usize..5, 0usize..5, 0usize..7, 0usize..7, 0usize..2, 0usize..2)) {
            let s = c1_desk();
            let v = vec![occ.0, occ.1, occ.2, occ.3, occ.4, occ.5, occ.6, occ.7, occ.8];
            let i = s.basis_index(&v).unwrap();
            prop_assert!(i < s.total_dim());
            prop_assert_eq!(s.basis_unindex(i).unwrap(), v);
        }
    }

    #[test]
    fn partitions() {
        let s = c1_desk();
        let p = s.partition(&["idler_A"]).unwrap();
        assert_eq!(p.traced().len(), 8);
        assert_eq!(p.kept_dim(&s), 5);
        let p = s.partition(&["idler_B", "idler_A"]).unwrap();
        assert_eq!(p.kept_labels(&s), vec!["idler_A", "idler_B"]);
        assert_eq!(p.kept_dim(&s), 25);
        let all: Vec<&str> = s.labels().collect();
        let p = s.partition(&all).unwrap();
        assert!(p.traced().is_empty());
        assert_eq!(s.partition(&[]).unwrap_err(), SpaceError::EmptyPartition);
        assert_eq!(s.partition(&["nope"]).unwrap_err(), SpaceError::UnknownLabel("nope".into()));
    }
}
