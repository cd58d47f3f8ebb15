//! Concentration grid with its generating configuration attached.

use super::config::SimConfig;
use serde::{Deserialize, Serialize};

/// A concentration snapshot. Values are stored row-major, index
/// `j * nx + i`, with cell (i, j) centered at ((i+1/2)dx, (j+1/2)dy).
/// Fields are immutable once a run returns them; the solver mutates only
/// its own working buffers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationField {
    values: Vec<f64>,
    config: SimConfig,
    /// Simulation time this snapshot corresponds to.
    time_stamp: f64,
    /// Cells clamped from (tiny) negative values back to zero over the
    /// run that produced this field. Non-zero counts are rounding dust;
    /// large counts would indicate an unstable configuration.
    clamp_count: u64,
}

impl ConcentrationField {
    /// A zero field at t = 0.
    pub fn zeros(config: &SimConfig) -> Self {
        ConcentrationField {
            values: vec![0.0; config.n_cells()],
            config: *config,
            time_stamp: 0.0,
            clamp_count: 0,
        }
    }

    pub(super) fn from_parts(
        values: Vec<f64>,
        config: &SimConfig,
        time_stamp: f64,
        clamp_count: u64,
    ) -> Self {
        debug_assert_eq!(values.len(), config.n_cells());
        ConcentrationField {
            values,
            config: *config,
            time_stamp,
            clamp_count,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn time_stamp(&self) -> f64 {
        self.time_stamp
    }

    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for constructing initial conditions in tests and
    /// examples; runs never hand out mutable views.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.config.grid.0 + i]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Total quantity on the grid: sum of cell values times cell area.
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.config.dx() * self.config.dy()
    }

    /// Bilinear interpolation between the four nearest cell centers.
    /// Outside the center lattice (within half a cell of an edge) the
    /// interpolation clamps to the border cells, so the sample is
    /// piecewise-linear and continuous over the whole closed domain.
    pub fn sample_bilinear(&self, pos: (f64, f64)) -> f64 {
        sample_bilinear_raw(&self.config, &self.values, pos)
    }
}

/// Bilinear sampling on a raw value buffer; lets the solver sample its
/// working buffer without wrapping it in a field first.
pub(super) fn sample_bilinear_raw(cfg: &SimConfig, values: &[f64], pos: (f64, f64)) -> f64 {
    let (nx, ny) = cfg.grid;
    let fx = pos.0 / cfg.dx() - 0.5;
    let fy = pos.1 / cfg.dy() - 0.5;
    let i0 = (fx.floor() as isize).clamp(0, nx as isize - 2) as usize;
    let j0 = (fy.floor() as isize).clamp(0, ny as isize - 2) as usize;
    let tx = (fx - i0 as f64).clamp(0.0, 1.0);
    let ty = (fy - j0 as f64).clamp(0.0, 1.0);
    let v00 = values[j0 * nx + i0];
    let v10 = values[j0 * nx + i0 + 1];
    let v01 = values[(j0 + 1) * nx + i0];
    let v11 = values[(j0 + 1) * nx + i0 + 1];
    (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
}
