//! Learns continuous-time dynamics of multivariate biological time series by
//! training a neural ordinary differential equation: a small fully connected
//! vector field integrated by Runge-Kutta solvers, trained end-to-end by
//! backpropagating through the integrator's arithmetic.
//!
//! The pipeline: ingest strain time-series CSVs ([`dataio`]), fit the neural
//! vector field ([`field`], [`odeint`], [`loss`], [`optim`]) and evaluate it
//! on a held-out strain with RMSE/timing reports and SVG artifacts
//! ([`harness`]). The [`cli`] module exposes everything as subcommands.

pub mod adiff;
pub mod cli;
pub mod dataio;
pub mod field;
pub mod harness;
pub mod loss;
pub mod odeint;
pub mod optim;
