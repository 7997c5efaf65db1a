//! Exact bisimulation metrics on tabular MDPs, and a masked latent
//! reconstruction trainer whose learned distances are checked against them.

pub mod autodiff;
pub mod mdp;
pub mod metric;
pub mod transport;
pub mod dynamics;
pub mod objective;
pub mod perception;
pub mod erank;
pub mod envs;
pub mod certify;
