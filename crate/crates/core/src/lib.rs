//! Sub-Riemannian numerics on the Heisenberg group H¹.
//!
//! Modules, bottom-up: [`heis`] (closed-form group, frame, metric and Popp
//! volume), [`grid`] (fields and discrete horizontal derivatives),
//! [`probe`] (approximate Carnot–Carathéodory distances and metric distortion),
//! [`energy`] (Q-energy, pairing, flux and structure checks), [`solver`]
//! (Dirichlet problems for the sublaplacian and the regularized p-Laplacian),
//! [`coords`] (harmonic and Q-harmonic coordinate charts, horizontal lifts) and
//! [`qcdiag`] (quasiconformality diagnostics). [`cli`] drives experiments.

pub mod error;
pub mod cli;
pub mod coords;
pub mod energy;
pub mod grid;
pub mod heis;
pub mod probe;
pub mod qcdiag;
pub mod solver;

pub use error::{QlabError, Result};
