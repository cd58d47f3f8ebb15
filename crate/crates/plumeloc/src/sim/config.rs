//! Simulation parameters, validation, and the explicit stability bound.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Boundary condition applied on all four domain edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Boundary {
    /// Absorbing walls: ghost cells hold zero concentration one grid
    /// spacing outside the domain, so mass leaves through every edge.
    #[default]
    #[serde(rename = "dirichlet_zero")]
    DirichletZero,
    /// Closed walls: zero diffusive flux and blocked advective flux, so
    /// interior transport conserves mass exactly (degradation still
    /// removes mass).
    #[serde(rename = "neumann_zero_flux")]
    NeumannZeroFlux,
}

impl Boundary {
    pub fn as_str(&self) -> &'static str {
        match self {
            Boundary::DirichletZero => "dirichlet_zero",
            Boundary::NeumannZeroFlux => "neumann_zero_flux",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "dirichlet_zero" | "dirichlet" => Ok(Boundary::DirichletZero),
            "neumann_zero_flux" | "neumann" => Ok(Boundary::NeumannZeroFlux),
            other => Err(Error::Config(format!(
                "unknown boundary '{other}' (expected dirichlet_zero or neumann_zero_flux)"
            ))),
        }
    }
}

/// Full description of one forward simulation. All quantities are SI:
/// meters, seconds, m^2/s for diffusion, 1/s for degradation and emission.
///
/// Concentration is tracked in units of emitted quantity per m^2 (the
/// model is depth-averaged), so `emission` is quantity per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Physical extent (Lx, Ly) of the rectangular domain.
    pub domain_size: (f64, f64),
    /// Cell counts (Nx, Ny); cell centers sit at ((i+1/2)dx, (j+1/2)dy).
    pub grid: (usize, usize),
    /// Isotropic diffusion coefficient D.
    pub diffusion: f64,
    /// Uniform flow velocity (ux, uy).
    pub flow: (f64, f64),
    /// First-order degradation rate lambda.
    pub degradation: f64,
    /// Source emission rate Q while the pulse is active.
    pub emission: f64,
    /// Source position; deposition goes into the cell containing it.
    pub source_pos: (f64, f64),
    /// Pulse duration T_inj: a step deposits iff its start time t <= T_inj.
    pub injection_duration: f64,
    /// Time step; must satisfy `stability_bound`.
    pub dt: f64,
    /// Simulated duration; the run takes round(total_time/dt) steps.
    pub total_time: f64,
    /// Edge condition, shared by all four edges.
    pub boundary: Boundary,
    /// Sensor noise scale as a fraction of the maximum concentration the
    /// clean field attains anywhere on the grid (not over the trace).
    pub noise_sigma_frac: f64,
}

impl SimConfig {
    pub fn dx(&self) -> f64 {
        self.domain_size.0 / self.grid.0 as f64
    }

    pub fn dy(&self) -> f64 {
        self.domain_size.1 / self.grid.1 as f64
    }

    pub fn n_cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Number of time steps a full run performs.
    pub fn n_steps(&self) -> usize {
        (self.total_time / self.dt).round() as usize
    }

    /// Index of the cell containing (x, y); points on a shared cell edge
    /// go to the higher-index cell, points on the domain edge are clamped
    /// inside.
    pub fn cell_of(&self, pos: (f64, f64)) -> (usize, usize) {
        let i = ((pos.0 / self.dx()).floor() as isize).clamp(0, self.grid.0 as isize - 1);
        let j = ((pos.1 / self.dy()).floor() as isize).clamp(0, self.grid.1 as isize - 1);
        (i as usize, j as usize)
    }

    /// Center coordinates of cell (i, j).
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.dx(), (j as f64 + 0.5) * self.dy())
    }

    pub fn contains(&self, pos: (f64, f64)) -> bool {
        pos.0 >= 0.0 && pos.0 <= self.domain_size.0 && pos.1 >= 0.0 && pos.1 <= self.domain_size.1
    }

    /// Checks geometry, positivity, and the explicit stability bound.
    /// Violations name the offending field and, for `dt`, the bound value.
    pub fn validate(&self) -> Result<()> {
        let fin = |v: f64, name: &str| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite, got {v}")))
            }
        };
        fin(self.domain_size.0, "domain_size.x")?;
        fin(self.domain_size.1, "domain_size.y")?;
        fin(self.diffusion, "diffusion")?;
        fin(self.flow.0, "flow.x")?;
        fin(self.flow.1, "flow.y")?;
        fin(self.degradation, "degradation")?;
        fin(self.emission, "emission")?;
        fin(self.source_pos.0, "source_pos.x")?;
        fin(self.source_pos.1, "source_pos.y")?;
        fin(self.injection_duration, "injection_duration")?;
        fin(self.dt, "dt")?;
        fin(self.total_time, "total_time")?;
        fin(self.noise_sigma_frac, "noise_sigma_frac")?;

        if self.domain_size.0 <= 0.0 || self.domain_size.1 <= 0.0 {
            return Err(Error::Config(format!(
                "domain_size must be positive, got {:?}",
                self.domain_size
            )));
        }
        if self.grid.0 < 3 || self.grid.1 < 3 {
            return Err(Error::Config(format!(
                "grid must be at least 3x3, got {:?}",
                self.grid
            )));
        }
        if self.diffusion <= 0.0 {
            return Err(Error::Config(format!(
                "diffusion must be positive, got {}",
                self.diffusion
            )));
        }
        if self.degradation < 0.0 {
            return Err(Error::Config(format!(
                "degradation must be non-negative, got {}",
                self.degradation
            )));
        }
        if self.emission < 0.0 {
            return Err(Error::Config(format!(
                "emission must be non-negative, got {}",
                self.emission
            )));
        }
        if !self.contains(self.source_pos) {
            return Err(Error::Config(format!(
                "source_pos {:?} lies outside the domain {:?}",
                self.source_pos, self.domain_size
            )));
        }
        if self.injection_duration < 0.0 {
            return Err(Error::Config(format!(
                "injection_duration must be non-negative, got {}",
                self.injection_duration
            )));
        }
        if self.total_time < 0.0 {
            return Err(Error::Config(format!(
                "total_time must be non-negative, got {}",
                self.total_time
            )));
        }
        if self.noise_sigma_frac < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma_frac must be non-negative, got {}",
                self.noise_sigma_frac
            )));
        }
        if self.dt <= 0.0 {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        let bound = stability_bound(self);
        // Tolerate rounding when dt was computed from the bound itself.
        if self.dt > bound * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "dt = {} violates the stability bound {} \
                 (min of dx^2 dy^2 / (2 D (dx^2+dy^2)), dx/|ux|, dy/|uy|)",
                self.dt, bound
            )));
        }
        Ok(())
    }
}

impl Default for SimConfig {
    /// A 10 um x 10 um domain on a 50x50 grid with weak rightward flow.
    /// `dt` defaults to half the stability bound; `total_time` is long
    /// enough for the default field to become effectively steady.
    fn default() -> Self {
        let mut cfg = SimConfig {
            domain_size: (1e-5, 1e-5),
            grid: (50, 50),
            diffusion: 1e-10,
            flow: (5e-7, 0.0),
            degradation: 0.01,
            emission: 1.0,
            source_pos: (5e-6, 5e-6),
            injection_duration: 10.0,
            dt: 0.0,
            total_time: 0.5,
            boundary: Boundary::DirichletZero,
            noise_sigma_frac: 0.1,
        };
        cfg.dt = auto_dt(&cfg);
        cfg
    }
}

/// Largest stable time step: the diffusion limit combined with the CFL
/// advection limit in each direction.
pub fn stability_bound(cfg: &SimConfig) -> f64 {
    let dx = cfg.dx();
    let dy = cfg.dy();
    let diff = dx * dx * dy * dy / (2.0 * cfg.diffusion * (dx * dx + dy * dy));
    let adv_x = dx / cfg.flow.0.abs().max(1e-30);
    let adv_y = dy / cfg.flow.1.abs().max(1e-30);
    diff.min(adv_x).min(adv_y)
}

/// Half the stability bound: the default time step.
pub fn auto_dt(cfg: &SimConfig) -> f64 {
    0.5 * stability_bound(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.domain_size, (1e-5, 1e-5));
        assert_eq!(cfg.grid, (50, 50));
        assert_eq!(cfg.diffusion, 1e-10);
        assert_eq!(cfg.flow, (5e-7, 0.0));
        assert_eq!(cfg.degradation, 0.01);
        assert_eq!(cfg.emission, 1.0);
        assert_eq!(cfg.source_pos, (5e-6, 5e-6));
        assert_eq!(cfg.injection_duration, 10.0);
        assert_eq!(cfg.boundary, Boundary::DirichletZero);
        assert_eq!(cfg.noise_sigma_frac, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn auto_dt_is_half_the_binding_limit() {
        // Default geometry: dx = dy = 2e-7, D = 1e-10, ux = 5e-7.
        // Diffusion limit dx^2/(4D) = 1e-4; CFL limit dx/ux = 0.4.
        // Diffusion binds, so dt = 0.5 * 1e-4 = 5e-5.
        let cfg = SimConfig::default();
        assert_relative_eq!(stability_bound(&cfg), 1e-4, max_relative = 1e-12);
        assert_relative_eq!(cfg.dt, 5e-5, max_relative = 1e-12);

        // Strong flow flips the binding constraint to advection.
        let fast = SimConfig {
            flow: (4e-3, 0.0),
            dt: 1e-6,
            ..SimConfig::default()
        };
        assert_relative_eq!(stability_bound(&fast), 2e-7 / 4e-3, max_relative = 1e-12);
    }

    #[test]
    fn validate_rejects_unstable_dt_and_names_the_bound() {
        let cfg = SimConfig {
            dt: 2e-4,
            ..SimConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stability bound"), "message was: {err}");
        assert!(err.contains("0.0001"), "message was: {err}");
    }

    #[test]
    fn validate_accepts_dt_exactly_at_the_bound() {
        let cfg = SimConfig {
            dt: 1e-4,
            ..SimConfig::default()
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_geometry() {
        let outside = SimConfig {
            source_pos: (2e-5, 5e-6),
            ..SimConfig::default()
        };
        assert!(outside.validate().is_err());

        let negative_d = SimConfig {
            diffusion: -1.0,
            ..SimConfig::default()
        };
        assert!(negative_d.validate().is_err());

        let nan_flow = SimConfig {
            flow: (f64::NAN, 0.0),
            ..SimConfig::default()
        };
        assert!(nan_flow.validate().is_err());
    }

    #[test]
    fn cell_of_matches_cell_center_round_trip() {
        let cfg = SimConfig::default();
        for (i, j) in [(0, 0), (25, 25), (49, 49), (3, 41)] {
            let c = cfg.cell_center(i, j);
            assert_eq!(cfg.cell_of(c), (i, j));
        }
        // Domain corners clamp inside.
        assert_eq!(cfg.cell_of((1e-5, 1e-5)), (49, 49));
        assert_eq!(cfg.cell_of((0.0, 0.0)), (0, 0));
    }

    #[test]
    fn boundary_parse_round_trips() {
        for b in [Boundary::DirichletZero, Boundary::NeumannZeroFlux] {
            assert_eq!(Boundary::parse(b.as_str()).unwrap(), b);
        }
        assert!(Boundary::parse("periodic").is_err());
    }
}
