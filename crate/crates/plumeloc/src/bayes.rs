//! Likelihood-based source localization: a grid-search posterior with
//! MAP readout, and an extended Kalman filter over a static source
//! state.
//!
//! Both estimators compare a measured trace against the forward model
//! run with the source moved to a candidate position, at the trace's
//! own sample times. Deposition targets the cell containing the source,
//! so model readings are piecewise constant in the candidate position:
//! one forward solve per grid cell answers every query into that cell.
//! [`SolveCache`] holds those solves and can be shared across
//! candidates, filter steps, seeds, and estimators.

use crate::datagen::SensorTrace;
use crate::error::{Error, Result};
use crate::estimate::SourceEstimate;
use crate::sim::{forward_readings, SimConfig};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

/// Covariance eigenvalues are floored here to keep the filter state
/// strictly positive definite.
const MIN_COV_EIGENVALUE: f64 = 1e-18;

/// Memoized forward solves, keyed by the grid cell containing the
/// candidate source. All queries share the template configuration (its
/// own `source_pos` is ignored), one sensor, and one set of sample
/// times.
pub struct SolveCache {
    template: SimConfig,
    sensor: (f64, f64),
    times: Vec<f64>,
    entries: Mutex<HashMap<(usize, usize), Arc<Vec<f64>>>>,
    solves: AtomicUsize,
}

impl SolveCache {
    pub fn new(template: &SimConfig, sensor: (f64, f64), times: &[f64]) -> Result<Self> {
        template.validate()?;
        if !template.contains(sensor) {
            return Err(Error::InvalidArgument(format!(
                "sensor position {sensor:?} lies outside the domain"
            )));
        }
        Ok(SolveCache {
            template: *template,
            sensor,
            times: times.to_vec(),
            entries: Mutex::new(HashMap::new()),
            solves: AtomicUsize::new(0),
        })
    }

    /// A cache matching a trace's generating setup: same model
    /// parameters, sensor, and sample times.
    pub fn for_trace(trace: &SensorTrace) -> Result<Self> {
        SolveCache::new(&trace.config, trace.sensor_pos, &trace.times)
    }

    pub fn template(&self) -> &SimConfig {
        &self.template
    }

    pub fn sensor(&self) -> (f64, f64) {
        self.sensor
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Model readings for a source in the given cell, solving on first
    /// use.
    pub fn readings_for_cell(&self, cell: (usize, usize)) -> Result<Arc<Vec<f64>>> {
        let mut entries = self.entries.lock().expect("cache poisoned");
        if let Some(hit) = entries.get(&cell) {
            return Ok(Arc::clone(hit));
        }
        let candidate = self.template.cell_center(cell.0, cell.1);
        let run = forward_readings(&self.template, candidate, self.sensor, &self.times)?;
        self.solves.fetch_add(1, Ordering::Relaxed);
        let arc = Arc::new(run.readings);
        entries.insert(cell, Arc::clone(&arc));
        Ok(arc)
    }

    /// Model readings for a source at an arbitrary position; positions
    /// outside the domain clamp to the nearest cell (finite-difference
    /// probes at the walls rely on this).
    pub fn readings_for(&self, pos: (f64, f64)) -> Result<Arc<Vec<f64>>> {
        self.readings_for_cell(self.template.cell_of(pos))
    }

    /// Number of forward solves actually run (cache misses).
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    /// Solve every cell up front; makes later queries allocation-cheap
    /// and puts the full cost in one measurable place.
    pub fn prefill_all(&self) -> Result<()> {
        let (nx, ny) = self.template.grid;
        for j in 0..ny {
            for i in 0..nx {
                self.readings_for_cell((i, j))?;
            }
        }
        Ok(())
    }
}

fn check_sigma(trace: &SensorTrace) -> Result<f64> {
    if trace.noise_sigma > 0.0 {
        Ok(trace.noise_sigma)
    } else {
        Err(Error::InvalidArgument(format!(
            "likelihood needs a positive noise sigma, trace has {}",
            trace.noise_sigma
        )))
    }
}

fn ll_from_model(model: &[f64], trace: &SensorTrace) -> Result<f64> {
    let sigma = check_sigma(trace)?;
    if model.len() != trace.readings.len() {
        return Err(Error::Dimension(format!(
            "model series has {} readings, trace has {}",
            model.len(),
            trace.readings.len()
        )));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    Ok(-trace
        .readings
        .iter()
        .zip(model)
        .map(|(z, c)| (z - c) * (z - c))
        .sum::<f64>()
        * inv)
}

/// Gaussian log-likelihood of the trace under a source at `candidate`,
/// up to the candidate-independent constant: -sum_t (z_t - c_t)^2 /
/// (2 sigma^2), where c_t are model readings at the trace's times and
/// sigma is the trace's noise scale. Model parameters other than the
/// source come from `config`.
pub fn log_likelihood(
    candidate: (f64, f64),
    trace: &SensorTrace,
    config: &SimConfig,
) -> Result<f64> {
    check_sigma(trace)?;
    let run = forward_readings(config, candidate, trace.sensor_pos, &trace.times)?;
    ll_from_model(&run.readings, trace)
}

/// Cached-variant of [`log_likelihood`]; the model comes from the cache
/// (same sample times required).
pub fn log_likelihood_cached(
    candidate: (f64, f64),
    trace: &SensorTrace,
    cache: &SolveCache,
) -> Result<f64> {
    let model = cache.readings_for(candidate)?;
    ll_from_model(&model, trace)
}

/// A normalized posterior over an Nc x Nc candidate grid spanning the
/// domain (uniform prior). `probabilities` sum to 1; `log_posterior`
/// equals their logarithms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Posterior {
    pub nc: usize,
    pub domain_size: (f64, f64),
    /// Row-major (index j * nc + i), like concentration fields.
    pub log_posterior: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Log of the evidence term the normalization divided out:
    /// log sum_k exp(log_likelihood_k).
    pub log_normalizer: f64,
    pub map_cell: (usize, usize),
    pub map_pos: (f64, f64),
    /// More than one candidate attained the maximum; the lowest linear
    /// index was reported.
    pub tie_broken: bool,
    /// All candidates scored (numerically) identically; the MAP readout
    /// carries no information.
    pub uninformative: bool,
}

impl Posterior {
    pub fn candidate_pos(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.domain_size.0 / self.nc as f64,
            (j as f64 + 0.5) * self.domain_size.1 / self.nc as f64,
        )
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probabilities[j * self.nc + i]
    }
}

/// Normalize a grid of log-likelihoods (row-major, length nc * nc) into
/// a posterior under a uniform prior. Adding any constant to the inputs
/// leaves the result unchanged up to rounding.
pub fn posterior_from_log_likelihood(
    log_lik: Vec<f64>,
    nc: usize,
    domain_size: (f64, f64),
) -> Result<Posterior> {
    if log_lik.len() != nc * nc {
        return Err(Error::Dimension(format!(
            "{} log-likelihood entries for an {nc}x{nc} grid",
            log_lik.len()
        )));
    }
    let mut best = 0usize;
    let mut ties = 0usize;
    for (k, &v) in log_lik.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite log-likelihood at candidate {k}"
            )));
        }
        if v > log_lik[best] {
            best = k;
            ties = 0;
        } else if k != best && v == log_lik[best] {
            ties += 1;
        }
    }
    let max_ll = log_lik[best];
    let min_ll = log_lik.iter().copied().fold(f64::INFINITY, f64::min);
    let z: f64 = log_lik.iter().map(|&v| (v - max_ll).exp()).sum();
    let log_z = z.ln();
    let probabilities: Vec<f64> = log_lik.iter().map(|&v| (v - max_ll).exp() / z).collect();
    let log_posterior: Vec<f64> = log_lik.iter().map(|&v| v - max_ll - log_z).collect();
    let map_cell = (best % nc, best / nc);
    let mut posterior = Posterior {
        nc,
        domain_size,
        log_posterior,
        probabilities,
        log_normalizer: max_ll + log_z,
        map_cell,
        map_pos: (0.0, 0.0),
        tie_broken: ties > 0,
        uninformative: (max_ll - min_ll) <= 1e-12 * max_ll.abs().max(1.0),
    };
    posterior.map_pos = posterior.candidate_pos(map_cell.0, map_cell.1);
    Ok(posterior)
}

/// Exhaustive grid-search MAP estimate: evaluate the likelihood on an
/// `nc` x `nc` candidate grid and report the argmax (ties resolved
/// toward the lowest linear index) together with the full posterior.
pub fn map_estimate(
    trace: &SensorTrace,
    nc: usize,
    cache: &SolveCache,
) -> Result<(SourceEstimate, Posterior)> {
    if nc < 2 {
        return Err(Error::InvalidArgument(format!(
            "candidate resolution must be at least 2, got {nc}"
        )));
    }
    check_sigma(trace)?;
    let start = Instant::now();
    let domain = cache.template().domain_size;
    let mut log_lik = Vec::with_capacity(nc * nc);
    for j in 0..nc {
        for i in 0..nc {
            let pos = (
                (i as f64 + 0.5) * domain.0 / nc as f64,
                (j as f64 + 0.5) * domain.1 / nc as f64,
            );
            log_lik.push(log_likelihood_cached(pos, trace, cache)?);
        }
    }
    let posterior = posterior_from_log_likelihood(log_lik, nc, domain)?;
    let mut estimate = SourceEstimate::new("MAP grid search", posterior.map_pos)
        .with_truth(trace.config.source_pos);
    estimate.inference_seconds = start.elapsed().as_secs_f64();
    if posterior.tie_broken {
        estimate
            .notes
            .push("argmax tie broken toward lowest linear index".into());
    }
    if posterior.uninformative {
        estimate
            .notes
            .push("uninformative data: all candidates scored identically".into());
    }
    Ok((estimate, posterior))
}

/// Convenience entry: candidate grid matching the solver grid, fresh
/// cache.
pub fn map_estimate_default(trace: &SensorTrace) -> Result<(SourceEstimate, Posterior)> {
    let cache = SolveCache::for_trace(trace)?;
    map_estimate(trace, trace.config.grid.0, &cache)
}

/// Gaussian belief over the static source position.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterState {
    pub mean: (f64, f64),
    /// Symmetric covariance [[pxx, pxy], [pxy, pyy]] in m^2.
    pub cov: [[f64; 2]; 2],
    /// Number of measurement updates folded in so far.
    pub step: usize,
}

impl FilterState {
    /// Default prior: domain center with a standard deviation of a
    /// quarter of the domain diagonal scale (2.5 um on the default
    /// 10 um domain).
    pub fn init_for(cfg: &SimConfig) -> Self {
        let sd = 0.25 * cfg.domain_size.0.max(cfg.domain_size.1);
        FilterState {
            mean: (0.5 * cfg.domain_size.0, 0.5 * cfg.domain_size.1),
            cov: [[sd * sd, 0.0], [0.0, sd * sd]],
            step: 0,
        }
    }

    /// Eigenvalues of the covariance, (min, max).
    pub fn eigenvalues(&self) -> (f64, f64) {
        sym_eigenvalues(&self.cov)
    }

    pub fn is_symmetric_pd(&self, tol: f64) -> bool {
        let scale = self.cov[0][0].abs().max(self.cov[1][1].abs()).max(1e-300);
        let sym = (self.cov[0][1] - self.cov[1][0]).abs() <= tol * scale;
        sym && self.eigenvalues().0 > 0.0
    }
}

fn sym_eigenvalues(p: &[[f64; 2]; 2]) -> (f64, f64) {
    let b = 0.5 * (p[0][1] + p[1][0]);
    let m = 0.5 * (p[0][0] + p[1][1]);
    let d = (0.25 * (p[0][0] - p[1][1]).powi(2) + b * b).sqrt();
    (m - d, m + d)
}

/// Tunables for the measurement update; defaults follow the documented
/// filter configuration.
#[derive(Debug, Clone, Copy)]
pub struct FilterOptions {
    /// Measurement variance; `None` takes the trace's noise sigma
    /// squared.
    pub r_override: Option<f64>,
    /// Standard deviation of the per-step random-walk process noise
    /// that keeps the static-state covariance from collapsing.
    pub process_noise_std: f64,
    /// Central-difference step for the measurement Jacobian; `None`
    /// takes half a grid cell in each direction, which places the two
    /// probes in adjacent cells of the piecewise-constant model.
    pub fd_step: Option<(f64, f64)>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            r_override: None,
            process_noise_std: 1e-8,
            fd_step: None,
        }
    }
}

/// One EKF update with a scalar measurement `z` under an arbitrary
/// measurement function `h`: identity state transition plus process
/// noise, central finite-difference Jacobian, Joseph-form covariance
/// update, symmetrization, and an eigenvalue floor at 1e-18 (the
/// returned flag reports whether the floor engaged). When `clamp` gives
/// the domain extent, probe points and the updated mean stay inside it.
///
/// On a linear `h` the finite-difference Jacobian is exact, so this
/// reduces to the standard Kalman update.
pub fn ekf_scalar_update(
    state: &FilterState,
    z: f64,
    mut h: impl FnMut((f64, f64)) -> Result<f64>,
    fd_step: (f64, f64),
    r: f64,
    process_noise_std: f64,
    clamp: Option<(f64, f64)>,
) -> Result<(FilterState, bool)> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "measurement variance must be positive and finite, got {r}"
        )));
    }
    let mut p = state.cov;
    let qp2 = process_noise_std * process_noise_std;
    p[0][0] += qp2;
    p[1][1] += qp2;

    let (mx, my) = state.mean;
    let cl = |v: f64, hi: f64| v.clamp(0.0, hi);
    let (xm, xp) = match clamp {
        Some((lx, _)) => (cl(mx - fd_step.0, lx), cl(mx + fd_step.0, lx)),
        None => (mx - fd_step.0, mx + fd_step.0),
    };
    let (ym, yp) = match clamp {
        Some((_, ly)) => (cl(my - fd_step.1, ly), cl(my + fd_step.1, ly)),
        None => (my - fd_step.1, my + fd_step.1),
    };
    let h0 = h((mx, my))?;
    let jx = if xp > xm {
        (h((xp, my))? - h((xm, my))?) / (xp - xm)
    } else {
        0.0
    };
    let jy = if yp > ym {
        (h((mx, yp))? - h((mx, ym))?) / (yp - ym)
    } else {
        0.0
    };
    let pxy = 0.5 * (p[0][1] + p[1][0]);
    let s = jx * jx * p[0][0] + 2.0 * jx * jy * pxy + jy * jy * p[1][1] + r;
    if !(h0.is_finite() && jx.is_finite() && jy.is_finite() && s.is_finite() && s > 0.0) {
        return Err(Error::FilterDivergence { step: state.step });
    }
    let k1 = (p[0][0] * jx + p[0][1] * jy) / s;
    let k2 = (p[1][0] * jx + p[1][1] * jy) / s;
    let innovation = z - h0;
    let mut mean = (mx + k1 * innovation, my + k2 * innovation);
    if let Some((lx, ly)) = clamp {
        mean = (mean.0.clamp(0.0, lx), mean.1.clamp(0.0, ly));
    }
    if !(mean.0.is_finite() && mean.1.is_finite()) {
        return Err(Error::FilterDivergence { step: state.step });
    }
    // Joseph form: (I - K J) P (I - K J)^T + R K K^T.
    let a = [[1.0 - k1 * jx, -k1 * jy], [-k2 * jx, 1.0 - k2 * jy]];
    let ap = mat2_mul(&a, &p);
    let mut pn = mat2_mul_bt(&ap, &a);
    pn[0][0] += r * k1 * k1;
    pn[0][1] += r * k1 * k2;
    pn[1][0] += r * k2 * k1;
    pn[1][1] += r * k2 * k2;
    let off = 0.5 * (pn[0][1] + pn[1][0]);
    pn[0][1] = off;
    pn[1][0] = off;
    let mut repaired = false;
    let (lmin, _) = sym_eigenvalues(&pn);
    if !lmin.is_finite() {
        return Err(Error::FilterDivergence { step: state.step });
    }
    if lmin < MIN_COV_EIGENVALUE {
        let bump = MIN_COV_EIGENVALUE - lmin;
        pn[0][0] += bump;
        pn[1][1] += bump;
        repaired = true;
    }
    Ok((
        FilterState {
            mean,
            cov: pn,
            step: state.step + 1,
        },
        repaired,
    ))
}

fn mat2_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// a * b^T.
fn mat2_mul_bt(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[0][1],
            a[0][0] * b[1][0] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[0][1],
            a[1][0] * b[1][0] + a[1][1] * b[1][1],
        ],
    ]
}

/// One EKF update against the forward model: the measurement function
/// for reading `k` is the model's sensor reading at the trace's k-th
/// sample time with the source at the queried position (each reading is
/// compared to the model at its own time, matching the likelihood the
/// grid search uses).
pub fn kalman_update(
    state: &FilterState,
    z: f64,
    reading_index: usize,
    cache: &SolveCache,
    r: f64,
    process_noise_std: f64,
) -> Result<(FilterState, bool)> {
    let cfg = cache.template();
    let fd = (0.5 * cfg.dx(), 0.5 * cfg.dy());
    let h = |pos: (f64, f64)| -> Result<f64> { Ok(cache.readings_for(pos)?[reading_index]) };
    ekf_scalar_update(state, z, h, fd, r, process_noise_std, Some(cfg.domain_size))
}

/// A completed filter pass: the estimate, the per-step state trajectory
/// (initial state first), and how often the covariance floor engaged.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub estimate: SourceEstimate,
    pub trajectory: Vec<FilterState>,
    pub repairs: u64,
}

/// Fold the trace through the EKF in time order, starting from `init`.
pub fn run_filter(
    trace: &SensorTrace,
    cache: &SolveCache,
    init: &FilterState,
    opts: &FilterOptions,
) -> Result<FilterRun> {
    if trace.readings.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    if cache.times().len() != trace.readings.len() {
        return Err(Error::Dimension(format!(
            "cache holds {} sample times, trace has {} readings",
            cache.times().len(),
            trace.readings.len()
        )));
    }
    let r = match opts.r_override {
        Some(r) => r,
        None => {
            let sigma = check_sigma(trace)?;
            sigma * sigma
        }
    };
    let cfg = cache.template();
    let fd = opts.fd_step.unwrap_or((0.5 * cfg.dx(), 0.5 * cfg.dy()));
    let start = Instant::now();
    let mut trajectory = Vec::with_capacity(trace.readings.len() + 1);
    trajectory.push(*init);
    let mut state = *init;
    let mut repairs = 0u64;
    for (k, &z) in trace.readings.iter().enumerate() {
        let h = |pos: (f64, f64)| -> Result<f64> { Ok(cache.readings_for(pos)?[k]) };
        let (next, repaired) = ekf_scalar_update(
            &state,
            z,
            h,
            fd,
            r,
            opts.process_noise_std,
            Some(cfg.domain_size),
        )?;
        repairs += repaired as u64;
        state = next;
        trajectory.push(state);
    }
    let mut estimate =
        SourceEstimate::new("Kalman filter", state.mean).with_truth(trace.config.source_pos);
    estimate.inference_seconds = start.elapsed().as_secs_f64();
    if repairs > 0 {
        estimate
            .notes
            .push(format!("covariance floor engaged {repairs} times"));
    }
    Ok(FilterRun {
        estimate,
        trajectory,
        repairs,
    })
}

/// Convenience entry: fresh cache, default prior and options.
pub fn run_filter_default(trace: &SensorTrace) -> Result<FilterRun> {
    let cache = SolveCache::for_trace(trace)?;
    let init = FilterState::init_for(&trace.config);
    run_filter(trace, &cache, &init, &FilterOptions::default())
}

/// Posterior probabilities as CSV: a metadata header, then nc rows of
/// nc values (row j = 0 first).
pub fn write_posterior_csv(posterior: &Posterior, path: &Path) -> Result<()> {
    let nc = posterior.nc;
    let mut out = String::new();
    out.push_str("nc,lx,ly\n");
    out.push_str(&format!(
        "{},{},{}\n",
        nc, posterior.domain_size.0, posterior.domain_size.1
    ));
    for j in 0..nc {
        let row: Vec<String> = (0..nc)
            .map(|i| format!("{}", posterior.prob(i, j)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Posterior probabilities as a binary 8-bit PGM heatmap, peak
/// probability at white; image row 0 is the top of the domain.
pub fn write_posterior_pgm(posterior: &Posterior, path: &Path) -> Result<()> {
    let nc = posterior.nc;
    let max = posterior.probabilities.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut bytes = Vec::with_capacity(32 + nc * nc);
    bytes.extend_from_slice(format!("P5\n{nc} {nc}\n255\n").as_bytes());
    for j in (0..nc).rev() {
        for i in 0..nc {
            bytes.push((posterior.prob(i, j) * scale).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Filter trajectory as CSV: step, mean, and the three independent
/// covariance entries per row.
pub fn write_trajectory_csv(trajectory: &[FilterState], path: &Path) -> Result<()> {
    let mut out = String::from("step,x,y,pxx,pxy,pyy\n");
    for s in trajectory {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.step, s.mean.0, s.mean.1, s.cov[0][0], s.cov[0][1], s.cov[1][1]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
