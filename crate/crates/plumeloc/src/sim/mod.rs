//! Forward model: explicit finite-difference solver for the 2D
//! advection-diffusion-reaction equation
//!
//! dC/dt + u . grad C = D lap C - lambda C + S
//!
//! with a pulse point source (active while t <= T_inj), first-order
//! degradation, and either absorbing (Dirichlet zero) or closed (zero-flux)
//! boundaries. The scheme is forward-Euler in time with central diffusion
//! and first-order upwind advection in flux form; under the stability bound
//! enforced at construction every stencil coefficient is non-negative, so
//! concentrations stay non-negative up to rounding.

mod config;
mod field;
mod io;
mod solver;

pub use config::{auto_dt, stability_bound, Boundary, SimConfig};
pub use field::ConcentrationField;
pub use io::{format_config, read_config_file, write_field_csv, write_field_pgm, write_pgm};
pub use solver::{
    forward_concentration, forward_readings, run_to_time, run_with_snapshots, step, ForwardRun,
    RunOutput, RunRequest, Simulator,
};
