//! Exact unitary dynamics of a Mach-Zehnder-type nonlinear interferometer
//! whose two nonlinear media are electron-phonon systems coupled to pump,
//! idler and signal photon modes.

pub mod hspace;
pub mod opalg;
pub mod opdsl;
pub mod model;
pub mod states;
pub mod propagate;
pub mod entangle;
pub mod observables;
pub mod runner;
