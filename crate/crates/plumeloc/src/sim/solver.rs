//! Explicit time stepping and the run entry points.
//!
//! One step applies, in order: the five-point transport stencil
//! (central diffusion, upwind advection, degradation folded into the
//! center weight), a clamp of rounding-dust negatives to zero, then the
//! source deposit for steps whose start time falls inside the pulse.

use super::config::{Boundary, SimConfig};
use super::field::{sample_bilinear_raw, ConcentrationField};
use crate::error::{Error, Result};

/// Steps between scans for non-finite values during a run. The stencil
/// propagates information one cell per step, so a blow-up is still on the
/// grid when the next scan looks.
const NAN_SCAN_INTERVAL: usize = 250;

/// Precomputed stencil for one configuration. Coefficients are constant
/// across the grid; boundary cells only add a center correction, so the
/// interior loop stays branch-free.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    nx: usize,
    ny: usize,
    // Interior weights: next = a_c*C + a_w*W + a_e*E + a_s*S + a_n*N.
    a_c: f64,
    a_w: f64,
    a_e: f64,
    a_s: f64,
    a_n: f64,
    // Center corrections on wall columns/rows. Under absorbing walls all
    // four are zero (a missing neighbor is a zero ghost). Under closed
    // walls they restore the diffusive ghost and block wall-crossing
    // advection; rows also compensate for aliasing the missing neighbor
    // row to the center row.
    west_col: f64,
    east_col: f64,
    south_row: f64,
    north_row: f64,
    neumann: bool,
    zeros_row: Vec<f64>,
    src_idx: usize,
    /// Concentration added to the source cell by one active step.
    deposit: f64,
}

impl Simulator {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let (nx, ny) = cfg.grid;
        let (dx, dy) = (cfg.dx(), cfg.dy());
        let rx = cfg.diffusion * cfg.dt / (dx * dx);
        let ry = cfg.diffusion * cfg.dt / (dy * dy);
        let cx = cfg.flow.0 * cfg.dt / dx;
        let cy = cfg.flow.1 * cfg.dt / dy;
        let neumann = cfg.boundary == Boundary::NeumannZeroFlux;
        let (si, sj) = cfg.cell_of(cfg.source_pos);
        Ok(Simulator {
            cfg: *cfg,
            nx,
            ny,
            a_c: 1.0 - 2.0 * rx - 2.0 * ry - cx.abs() - cy.abs() - cfg.degradation * cfg.dt,
            a_w: rx + cx.max(0.0),
            a_e: rx + (-cx).max(0.0),
            a_s: ry + cy.max(0.0),
            a_n: ry + (-cy).max(0.0),
            // Wall columns drop their outside-neighbor term entirely; the
            // correction supplies the diffusive ghost plus the blocked
            // outflow when that wall is downwind.
            west_col: if neumann { rx + (-cx).max(0.0) } else { 0.0 },
            east_col: if neumann { rx + cx.max(0.0) } else { 0.0 },
            // Wall rows alias the missing row to the center row, which
            // already contributes a_s (resp. a_n) times the center value;
            // the correction shifts that to the intended ghost weight.
            south_row: if neumann { -cy } else { 0.0 },
            north_row: if neumann { cy } else { 0.0 },
            neumann,
            zeros_row: vec![0.0; nx],
            src_idx: sj * nx + si,
            deposit: cfg.emission * cfg.dt / (dx * dy),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// One transport sweep from `cur` into `next` (no deposit, no clamp).
    fn sweep(&self, cur: &[f64], next: &mut [f64]) {
        let nx = self.nx;
        for j in 0..self.ny {
            let row = &cur[j * nx..][..nx];
            let south: &[f64] = if j > 0 {
                &cur[(j - 1) * nx..][..nx]
            } else if self.neumann {
                row
            } else {
                &self.zeros_row
            };
            let north: &[f64] = if j + 1 < self.ny {
                &cur[(j + 1) * nx..][..nx]
            } else if self.neumann {
                row
            } else {
                &self.zeros_row
            };
            let mut ac = self.a_c;
            if j == 0 {
                ac += self.south_row;
            }
            if j + 1 == self.ny {
                ac += self.north_row;
            }
            let out = &mut next[j * nx..][..nx];

            out[0] = (ac + self.west_col) * row[0]
                + self.a_e * row[1]
                + self.a_s * south[0]
                + self.a_n * north[0];
            for i in 1..nx - 1 {
                out[i] = ac * row[i]
                    + self.a_w * row[i - 1]
                    + self.a_e * row[i + 1]
                    + self.a_s * south[i]
                    + self.a_n * north[i];
            }
            out[nx - 1] = (ac + self.east_col) * row[nx - 1]
                + self.a_w * row[nx - 2]
                + self.a_s * south[nx - 1]
                + self.a_n * north[nx - 1];
        }
    }

    /// Advance one step from the given snapshot, producing a new one.
    /// The snapshot's time stamp decides whether the pulse is active.
    pub fn step_once(&self, field: &ConcentrationField) -> Result<ConcentrationField> {
        if field.config().grid != self.cfg.grid {
            return Err(Error::Dimension(format!(
                "field grid {:?} does not match configuration grid {:?}",
                field.config().grid,
                self.cfg.grid
            )));
        }
        let t = field.time_stamp();
        let mut next = vec![0.0; self.cfg.n_cells()];
        self.sweep(field.values(), &mut next);
        let mut clamps = field.clamp_count();
        clamps += clamp_negatives(&mut next);
        if t <= self.cfg.injection_duration && self.cfg.emission > 0.0 {
            next[self.src_idx] += self.deposit;
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Instability {
                step: 1,
                detail: "non-finite concentration after one step".into(),
            });
        }
        Ok(ConcentrationField::from_parts(
            next,
            &self.cfg,
            t + self.cfg.dt,
            clamps,
        ))
    }

    /// Run the simulation, optionally recording sensor readings and grid
    /// snapshots at requested times (snapped to the nearest step, which
    /// may be step zero). Starts from `initial` when given, otherwise
    /// from a zero field at t = 0, and integrates up to
    /// `config.total_time`.
    pub fn run(&self, req: &RunRequest) -> Result<RunOutput> {
        let cfg = &self.cfg;
        let t0 = req.initial.map_or(0.0, |f| f.time_stamp());
        let span = cfg.total_time - t0;
        if span < -1e-12 * cfg.dt.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "initial field time {t0} already exceeds total_time {}",
                cfg.total_time
            )));
        }
        let n_steps = (span.max(0.0) / cfg.dt).round() as usize;

        if !req.reading_times.is_empty() {
            let sensor = req.sensor.ok_or_else(|| {
                Error::InvalidArgument("reading times given without a sensor position".into())
            })?;
            if !cfg.contains(sensor) {
                return Err(Error::InvalidArgument(format!(
                    "sensor position {sensor:?} lies outside the domain"
                )));
            }
        }
        let snap_time = |t: f64| -> Result<usize> {
            let k = ((t - t0) / cfg.dt).round();
            if !(0.0..=n_steps as f64).contains(&k) {
                return Err(Error::InvalidArgument(format!(
                    "requested time {t} lies outside the simulated span [{t0}, {}]",
                    cfg.total_time
                )));
            }
            Ok(k as usize)
        };
        // (step, output slot), sorted by step, consumed front to back.
        let mut reading_plan = Vec::with_capacity(req.reading_times.len());
        for (slot, &t) in req.reading_times.iter().enumerate() {
            reading_plan.push((snap_time(t)?, slot));
        }
        reading_plan.sort_unstable();
        let mut snapshot_plan = Vec::with_capacity(req.snapshot_times.len());
        for (slot, &t) in req.snapshot_times.iter().enumerate() {
            snapshot_plan.push((snap_time(t)?, slot));
        }
        snapshot_plan.sort_unstable();

        if let Some(init) = req.initial {
            if init.config().grid != cfg.grid {
                return Err(Error::Dimension(format!(
                    "initial field grid {:?} does not match configuration grid {:?}",
                    init.config().grid,
                    cfg.grid
                )));
            }
        }
        let mut cur = match req.initial {
            Some(init) => init.values().to_vec(),
            None => vec![0.0; cfg.n_cells()],
        };
        let mut next = vec![0.0; cfg.n_cells()];
        let mut clamps = req.initial.map_or(0, |f| f.clamp_count());
        let mut readings = vec![0.0; req.reading_times.len()];
        let mut snapshots: Vec<Option<ConcentrationField>> =
            (0..req.snapshot_times.len()).map(|_| None).collect();
        let mut rp = 0;
        let mut sp = 0;

        let record = |k: usize,
                      cur: &[f64],
                      clamps: u64,
                      readings: &mut [f64],
                      snapshots: &mut [Option<ConcentrationField>],
                      rp: &mut usize,
                      sp: &mut usize| {
            while *rp < reading_plan.len() && reading_plan[*rp].0 == k {
                readings[reading_plan[*rp].1] = sample_bilinear_raw(cfg, cur, req.sensor.unwrap());
                *rp += 1;
            }
            while *sp < snapshot_plan.len() && snapshot_plan[*sp].0 == k {
                snapshots[snapshot_plan[*sp].1] = Some(ConcentrationField::from_parts(
                    cur.to_vec(),
                    cfg,
                    t0 + k as f64 * cfg.dt,
                    clamps,
                ));
                *sp += 1;
            }
        };

        record(
            0,
            &cur,
            clamps,
            &mut readings,
            &mut snapshots,
            &mut rp,
            &mut sp,
        );
        let depositing = cfg.emission > 0.0;
        for k in 1..=n_steps {
            self.sweep(&cur, &mut next);
            clamps += clamp_negatives(&mut next);
            // The step's start time decides pulse activity.
            if depositing && t0 + (k - 1) as f64 * cfg.dt <= cfg.injection_duration {
                next[self.src_idx] += self.deposit;
            }
            std::mem::swap(&mut cur, &mut next);
            if k % NAN_SCAN_INTERVAL == 0 && !cur.iter().all(|v| v.is_finite()) {
                return Err(Error::Instability {
                    step: k,
                    detail: "non-finite concentration during run".into(),
                });
            }
            record(
                k,
                &cur,
                clamps,
                &mut readings,
                &mut snapshots,
                &mut rp,
                &mut sp,
            );
        }
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(Error::Instability {
                step: n_steps,
                detail: "non-finite concentration at end of run".into(),
            });
        }
        let final_field =
            ConcentrationField::from_parts(cur, cfg, t0 + n_steps as f64 * cfg.dt, clamps);
        Ok(RunOutput {
            final_field,
            snapshots: snapshots.into_iter().map(|s| s.unwrap()).collect(),
            readings,
        })
    }
}

/// What a run should record along the way.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunRequest<'a> {
    /// Starting state; a zero field at t = 0 when absent.
    pub initial: Option<&'a ConcentrationField>,
    /// Where readings are sampled (bilinear); required iff
    /// `reading_times` is non-empty.
    pub sensor: Option<(f64, f64)>,
    /// Times (within the simulated span) to record sensor readings.
    pub reading_times: &'a [f64],
    /// Times (within the simulated span) to snapshot the whole grid.
    pub snapshot_times: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_field: ConcentrationField,
    /// One snapshot per requested time, in request order.
    pub snapshots: Vec<ConcentrationField>,
    /// One reading per requested time, in request order.
    pub readings: Vec<f64>,
}

/// Result of a forward run queried at one sensor.
#[derive(Debug, Clone)]
pub struct ForwardRun {
    /// Clean sensor readings, one per requested time.
    pub readings: Vec<f64>,
    /// Maximum concentration over the final field; the reference scale
    /// for sensor noise.
    pub final_max: f64,
    pub final_field: ConcentrationField,
}

fn clamp_negatives(buf: &mut [f64]) -> u64 {
    let mut n = 0;
    for v in buf.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            n += 1;
        }
    }
    n
}

/// One explicit step as a pure function on snapshots.
pub fn step(field: &ConcentrationField, cfg: &SimConfig) -> Result<ConcentrationField> {
    Simulator::new(cfg)?.step_once(field)
}

/// Run from a zero field to `total_time` and return the final state.
pub fn run_to_time(cfg: &SimConfig) -> Result<ConcentrationField> {
    let sim = Simulator::new(cfg)?;
    Ok(sim.run(&RunRequest::default())?.final_field)
}

/// Run once, returning the final state plus a snapshot per requested
/// time (in request order). Times outside [0, total_time] are an error;
/// callers that tolerate missing times filter first.
pub fn run_with_snapshots(
    cfg: &SimConfig,
    times: &[f64],
) -> Result<(ConcentrationField, Vec<ConcentrationField>)> {
    let sim = Simulator::new(cfg)?;
    let out = sim.run(&RunRequest {
        snapshot_times: times,
        ..RunRequest::default()
    })?;
    Ok((out.final_field, out.snapshots))
}

/// Simulate a source at `candidate` (all other parameters from `cfg`)
/// and sample the sensor at the requested times. This is the shared
/// forward map behind dataset generation and every likelihood-based
/// estimator.
pub fn forward_readings(
    cfg: &SimConfig,
    candidate: (f64, f64),
    sensor: (f64, f64),
    times: &[f64],
) -> Result<ForwardRun> {
    let mut moved = *cfg;
    moved.source_pos = candidate;
    let sim = Simulator::new(&moved)?;
    let out = sim.run(&RunRequest {
        sensor: Some(sensor),
        reading_times: times,
        ..RunRequest::default()
    })?;
    Ok(ForwardRun {
        readings: out.readings,
        final_max: out.final_field.max(),
        final_field: out.final_field,
    })
}

/// Final-time clean concentration at each sensor for a source placed at
/// `candidate`.
pub fn forward_concentration(
    cfg: &SimConfig,
    candidate: (f64, f64),
    sensors: &[(f64, f64)],
) -> Result<Vec<f64>> {
    for &s in sensors {
        if !cfg.contains(s) {
            return Err(Error::InvalidArgument(format!(
                "sensor position {s:?} lies outside the domain"
            )));
        }
    }
    let mut moved = *cfg;
    moved.source_pos = candidate;
    let field = run_to_time(&moved)?;
    Ok(sensors.iter().map(|&s| field.sample_bilinear(s)).collect())
}
