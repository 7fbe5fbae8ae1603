//! Tabular distributional RL with pessimistic quantile distortion.

pub mod mdp;
pub mod quantile;
pub mod bellman;
pub mod distortion;
pub mod ensemble;
pub mod theory;
pub mod control;
