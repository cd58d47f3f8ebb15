//! Experiment orchestration: named scenarios run every requested estimator on
//! shared sensor data, aggregate errors and timings into a comparison report,
//! and emit heatmap/overlay figures.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bayes::{
    log_likelihood_cached, map_estimate, posterior_from_log_likelihood, run_filter,
    write_posterior_csv, write_posterior_pgm, FilterOptions, FilterState, Posterior, SolveCache,
};
use crate::datagen::{build_dataset, observe, split, uniform_sample_times, SensorTrace};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::estimate::{median_of, SourceEstimate};
use crate::estimators::{train_mlp, train_pinn, MlpEstimator, MlpTrainConfig, PinnConfig};
use crate::rl::{rollout, train_dqn, DqnConfig, GridEnv};
use crate::sim::{run_with_snapshots, write_field_csv, write_field_pgm, SimConfig};

/// Estimator families the harness can dispatch. The grid search (`Map`)
/// and the learned regressor (`Mlp`) both invert the same forward model
/// and are easy to conflate under a generic "ML inversion" label, so
/// reports always carry them as separate rows under distinct names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Map,
    Kf,
    Mlp,
    Pinn,
    Rl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Map,
        Method::Kf,
        Method::Mlp,
        Method::Pinn,
        Method::Rl,
    ];

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(Method::Map),
            "kf" => Ok(Method::Kf),
            "mlp" => Ok(Method::Mlp),
            "pinn" => Ok(Method::Pinn),
            "rl" => Ok(Method::Rl),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected map, kf, mlp, pinn, or rl)"
            ))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::Map => "map",
            Method::Kf => "kf",
            Method::Mlp => "mlp",
            Method::Pinn => "pinn",
            Method::Rl => "rl",
        }
    }

    /// Row label; matches the method string each estimator stamps on its
    /// own estimates.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Map => "MAP grid search",
            Method::Kf => "Kalman filter",
            Method::Mlp => "MLP inversion",
            Method::Pinn => "PINN",
            Method::Rl => "RL search",
        }
    }

    /// Methods whose outcome depends on a training seed.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::Mlp | Method::Pinn | Method::Rl)
    }
}

/// Hyperparameter override keys a scenario may set. Anything else is a
/// validation error, which catches typos early.
const KNOWN_KNOBS: &[&str] = &[
    "stochastic_seeds",
    "map_resolution",
    "kf_process_noise",
    "mlp_samples",
    "mlp_epochs",
    "mlp_batch",
    "mlp_lr",
    "pinn_epochs",
    "pinn_collocation",
    "pinn_boundary",
    "pinn_lr",
    "pinn_hidden_width",
    "pinn_hidden_layers",
    "pinn_lambda_mse",
    "pinn_lambda_phy",
    "pinn_source_width",
    "pinn_multi_start",
    "rl_episodes",
    "rl_grid",
    "rl_max_steps",
    "rl_lr",
    "rl_gamma",
];

/// A named, fully seeded experiment: geometry, sensing plan, truth, and the
/// estimators to compare.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Simulation template; its `source_pos` is replaced by `true_source`
    /// when data is generated.
    pub sim: SimConfig,
    pub sensors: Vec<(f64, f64)>,
    pub sample_times: Vec<f64>,
    pub true_source: (f64, f64),
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Numeric hyperparameter overrides; see `KNOWN_KNOBS` for the accepted
    /// keys. Unset keys fall back to built-in defaults.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    /// Run the methods of each repetition concurrently. Timings then share
    /// cores and a caveat is noted on every row.
    #[serde(default)]
    pub parallel: bool,
}

impl Scenario {
    /// Single-sensor comparison scenario: source at the domain center,
    /// sensor offset downwind, 600 samples over 0.5 s.
    pub fn comparison(seed: u64) -> Scenario {
        let sim = SimConfig {
            total_time: 0.5,
            ..SimConfig::default()
        };
        Scenario {
            name: "single-sensor-comparison".into(),
            sensors: vec![(6.5e-6, 5.5e-6)],
            sample_times: uniform_sample_times(sim.total_time, 600),
            sim,
            true_source: (5e-6, 5e-6),
            seed,
            methods: vec![Method::Map, Method::Kf, Method::Mlp, Method::Pinn],
            overrides: BTreeMap::new(),
            parallel: false,
        }
    }

    /// Active-search scenario: the agent hunts a source at (3, 7) um on a
    /// 10 x 10 grid. Sensor data plays no role.
    pub fn search(seed: u64) -> Scenario {
        let sim = SimConfig {
            total_time: 0.5,
            ..SimConfig::default()
        };
        Scenario {
            name: "grid-search-agent".into(),
            sensors: vec![(6.5e-6, 5.5e-6)],
            sample_times: uniform_sample_times(sim.total_time, 600),
            sim,
            true_source: (3e-6, 7e-6),
            seed,
            methods: vec![Method::Rl],
            overrides: BTreeMap::new(),
            parallel: false,
        }
    }

    fn knob(&self, key: &str, default: f64) -> f64 {
        self.overrides.get(key).copied().unwrap_or(default)
    }

    fn knob_usize(&self, key: &str, default: usize) -> usize {
        self.knob(key, default as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.sensors.is_empty() {
            return Err(Error::Config("scenario needs at least one sensor".into()));
        }
        for &s in &self.sensors {
            if !self.sim.contains(s) {
                return Err(Error::Config(format!(
                    "sensor ({}, {}) lies outside the domain",
                    s.0, s.1
                )));
            }
        }
        if !self.sim.contains(self.true_source) {
            return Err(Error::Config("true source lies outside the domain".into()));
        }
        if self.sample_times.is_empty() {
            return Err(Error::Config("scenario needs sample times".into()));
        }
        for pair in self.sample_times.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(
                    "sample times must be strictly increasing".into(),
                ));
            }
        }
        let last = *self.sample_times.last().unwrap();
        if self.sample_times[0] <= 0.0 || last > self.sim.total_time {
            return Err(Error::Config(format!(
                "sample times must lie in (0, {}], got [{}, {last}]",
                self.sim.total_time, self.sample_times[0]
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("scenario lists no methods".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(m) {
                return Err(Error::Config(format!("method '{}' listed twice", m.key())));
            }
        }
        for (key, value) in &self.overrides {
            if !KNOWN_KNOBS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown override '{key}'")));
            }
            if !value.is_finite() {
                return Err(Error::Config(format!("override '{key}' is not finite")));
            }
        }
        if self.knob_usize("stochastic_seeds", 5) == 0 {
            return Err(Error::Config("stochastic_seeds must be at least 1".into()));
        }
        if self.methods.contains(&Method::Mlp)
            && self.sample_times.len() < crate::estimators::MLP_READINGS
        {
            return Err(Error::Config(format!(
                "the MLP consumes {} readings but the scenario samples only {}",
                crate::estimators::MLP_READINGS,
                self.sample_times.len()
            )));
        }
        Ok(())
    }
}

/// Where and how a report was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub profile: String,
}

impl EnvFingerprint {
    pub fn current() -> EnvFingerprint {
        EnvFingerprint {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            profile: if cfg!(debug_assertions) {
                "debug"
            } else {
                "release"
            }
            .into(),
        }
    }
}

/// One method's aggregate over all repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    /// One estimate per successful repetition (for stochastic methods, the
    /// median-error run among that repetition's seeds).
    pub estimates: Vec<SourceEstimate>,
    pub median_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub mean_inference_seconds: Option<f64>,
    pub mean_training_seconds: Option<f64>,
    /// One entry per failed repetition (or per failed preparation step).
    pub failures: Vec<String>,
    pub notes: Vec<String>,
}

impl MethodRow {
    /// The estimate whose error sits at the median of the collected
    /// repetitions; the table row shows this one.
    pub fn representative(&self) -> Option<&SourceEstimate> {
        if self.estimates.is_empty() {
            return None;
        }
        let mut idx: Vec<usize> = (0..self.estimates.len()).collect();
        idx.sort_by(|&a, &b| {
            let ea = self.estimates[a].error.unwrap_or(f64::INFINITY);
            let eb = self.estimates[b].error.unwrap_or(f64::INFINITY);
            ea.partial_cmp(&eb).unwrap()
        });
        Some(&self.estimates[idx[(idx.len() - 1) / 2]])
    }
}

/// Comparison outcome across methods, rows sorted by method name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario: String,
    pub true_source: (f64, f64),
    pub repetitions: usize,
    pub stochastic_seeds: usize,
    pub environment: EnvFingerprint,
    pub rows: Vec<MethodRow>,
}

impl BenchmarkReport {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method.display_name())
    }
}

struct Outcome {
    estimate: SourceEstimate,
    /// Training wall-clock seconds incurred for this repetition.
    training_seconds: Vec<f64>,
    notes: Vec<String>,
}

#[derive(Default)]
struct Accum {
    estimates: Vec<SourceEstimate>,
    training_seconds: Vec<f64>,
    inference_seconds: Vec<f64>,
    failures: Vec<String>,
    notes: BTreeSet<String>,
}

/// Models trained once per scenario and reused across repetitions.
struct Prepared {
    mlp: Vec<(MlpEstimator, f64)>,
    rl: Vec<(crate::nn::DenseNet, f64)>,
    rl_env: Option<GridEnv>,
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Nearest lattice point of the n x n search grid to a physical position.
fn search_cell(pos: (f64, f64), domain: (f64, f64), n: usize) -> (usize, usize) {
    let i = ((pos.0 / domain.0) * n as f64).round() as isize;
    let j = ((pos.1 / domain.1) * n as f64).round() as isize;
    (
        i.clamp(0, n as isize - 1) as usize,
        j.clamp(0, n as isize - 1) as usize,
    )
}

/// Candidate-grid MAP estimate pooled over every sensor: log-likelihoods add
/// across independent traces.
fn run_map_method(
    traces: &[SensorTrace],
    caches: &[SolveCache],
    nc: usize,
) -> Result<(SourceEstimate, Posterior)> {
    if traces.len() == 1 {
        return map_estimate(&traces[0], nc, &caches[0]);
    }
    let start = Instant::now();
    let domain = caches[0].template().domain_size;
    let mut log_lik = vec![0.0; nc * nc];
    for (trace, cache) in traces.iter().zip(caches) {
        for j in 0..nc {
            for i in 0..nc {
                let pos = (
                    (i as f64 + 0.5) * domain.0 / nc as f64,
                    (j as f64 + 0.5) * domain.1 / nc as f64,
                );
                log_lik[j * nc + i] += log_likelihood_cached(pos, trace, cache)?;
            }
        }
    }
    let posterior = posterior_from_log_likelihood(log_lik, nc, domain)?;
    let mut estimate = SourceEstimate::new("MAP grid search", posterior.map_pos);
    estimate.inference_seconds = start.elapsed().as_secs_f64();
    if posterior.tie_broken {
        estimate
            .notes
            .push("argmax tie broken toward lowest linear index".into());
    }
    Ok((estimate, posterior))
}

/// Folds every trace through the filter in sensor order: each sensor's run
/// starts from the previous sensor's final belief.
fn run_kf_method(
    traces: &[SensorTrace],
    caches: &[SolveCache],
    opts: &FilterOptions,
) -> Result<SourceEstimate> {
    let start = Instant::now();
    let mut state = FilterState::init_for(&traces[0].config);
    let mut repairs = 0;
    for (trace, cache) in traces.iter().zip(caches) {
        let run = run_filter(trace, cache, &state, opts)?;
        state = *run.trajectory.last().unwrap();
        repairs += run.repairs;
    }
    let mut estimate = SourceEstimate::new("Kalman filter", state.mean);
    estimate.inference_seconds = start.elapsed().as_secs_f64();
    if repairs > 0 {
        estimate
            .notes
            .push(format!("covariance floor engaged {repairs} times"));
    }
    Ok(estimate)
}

/// Picks the run whose error is the sample median (lower middle for even
/// counts).
fn pick_median_run(mut runs: Vec<SourceEstimate>) -> SourceEstimate {
    runs.sort_by(|a, b| {
        a.error
            .unwrap_or(f64::INFINITY)
            .partial_cmp(&b.error.unwrap_or(f64::INFINITY))
            .unwrap()
    });
    let mid = (runs.len() - 1) / 2;
    runs.swap_remove(mid)
}

fn prepare_models(
    scenario: &Scenario,
    sim: &SimConfig,
    acc: &mut BTreeMap<String, Accum>,
) -> Prepared {
    let seeds = scenario.knob_usize("stochastic_seeds", 5);
    let mut prepared = Prepared {
        mlp: Vec::new(),
        rl: Vec::new(),
        rl_env: None,
    };
    if scenario.methods.contains(&Method::Mlp) {
        match prepare_mlp(scenario, sim, seeds) {
            Ok(models) => prepared.mlp = models,
            Err(e) => acc
                .entry(Method::Mlp.display_name().to_string())
                .or_default()
                .failures
                .push(format!("training preparation failed: {e}")),
        }
    }
    if scenario.methods.contains(&Method::Rl) {
        match prepare_rl(scenario, sim, seeds) {
            Ok((env, agents)) => {
                prepared.rl_env = Some(env);
                prepared.rl = agents;
            }
            Err(e) => acc
                .entry(Method::Rl.display_name().to_string())
                .or_default()
                .failures
                .push(format!("training preparation failed: {e}")),
        }
    }
    prepared
}

fn prepare_mlp(
    scenario: &Scenario,
    sim: &SimConfig,
    seeds: usize,
) -> Result<Vec<(MlpEstimator, f64)>> {
    let samples = scenario.knob_usize("mlp_samples", 4000);
    let dataset = build_dataset(
        samples,
        sim,
        scenario.sensors[0],
        derive_seed(scenario.seed, 7001),
    )?;
    let (train_val, _held_out) = split(&dataset, 0.8, derive_seed(scenario.seed, 7002));
    let (train, val) = split(&train_val, 0.9, derive_seed(scenario.seed, 7003));
    let mut models = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let cfg = MlpTrainConfig {
            epochs: scenario.knob_usize("mlp_epochs", 150),
            lr: scenario.knob("mlp_lr", 1e-3),
            batch_size: scenario.knob_usize("mlp_batch", 256),
            seed: derive_seed(scenario.seed, 7100 + s as u64),
        };
        let t = Instant::now();
        let out = train_mlp(&train, &val, &cfg)?;
        models.push((out.estimator, t.elapsed().as_secs_f64()));
    }
    Ok(models)
}

fn prepare_rl(
    scenario: &Scenario,
    sim: &SimConfig,
    seeds: usize,
) -> Result<(GridEnv, Vec<(crate::nn::DenseNet, f64)>)> {
    let n = scenario.knob_usize("rl_grid", 10);
    let max_steps = scenario.knob_usize("rl_max_steps", 200);
    let cell = search_cell(scenario.true_source, sim.domain_size, n);
    let env = GridEnv::new(n, cell, (0, 0), max_steps)?;
    let mut agents = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let cfg = DqnConfig {
            episodes: scenario.knob_usize("rl_episodes", 500),
            lr: scenario.knob("rl_lr", 1e-3),
            gamma: scenario.knob("rl_gamma", 0.99),
            max_steps,
            seed: derive_seed(scenario.seed, 7200 + s as u64),
            ..DqnConfig::default()
        };
        let t = Instant::now();
        let out = train_dqn(&env, &cfg)?;
        if out.diverged {
            return Err(Error::Instability {
                step: out.log.len(),
                detail: "Q-values diverged during training".into(),
            });
        }
        agents.push((out.net, t.elapsed().as_secs_f64()));
    }
    Ok((env, agents))
}

fn pinn_config(scenario: &Scenario, seed: u64) -> PinnConfig {
    PinnConfig {
        lambda_mse: scenario.knob("pinn_lambda_mse", 1.0),
        lambda_phy: scenario.knob("pinn_lambda_phy", 1e-2),
        collocation: scenario.knob_usize("pinn_collocation", 1024),
        boundary_samples: scenario.knob_usize("pinn_boundary", 128),
        epochs: scenario.knob_usize("pinn_epochs", 500),
        lr: scenario.knob("pinn_lr", 1e-3),
        hidden_width: scenario.knob_usize("pinn_hidden_width", 64),
        hidden_layers: scenario.knob_usize("pinn_hidden_layers", 3),
        source_width: scenario.overrides.get("pinn_source_width").copied(),
        multi_start: scenario.knob("pinn_multi_start", 0.0) != 0.0,
        seed,
    }
}

fn run_method(
    method: Method,
    scenario: &Scenario,
    sim: &SimConfig,
    caches: &[SolveCache],
    traces: &[SensorTrace],
    prepared: &Prepared,
    rep: usize,
    rep_seed: u64,
) -> Result<Outcome> {
    let truth = scenario.true_source;
    let seeds = scenario.knob_usize("stochastic_seeds", 5);
    let seeds_note =
        (seeds > 1 && method.is_stochastic()).then(|| format!("median-error run of {seeds} seeds"));
    match method {
        Method::Map => {
            let nc = scenario.knob_usize("map_resolution", sim.grid.0);
            let (estimate, _) = run_map_method(traces, caches, nc)?;
            Ok(Outcome {
                estimate: estimate.with_truth(truth),
                training_seconds: Vec::new(),
                notes: Vec::new(),
            })
        }
        Method::Kf => {
            let opts = FilterOptions {
                process_noise_std: scenario.knob("kf_process_noise", 1e-8),
                ..FilterOptions::default()
            };
            let estimate = run_kf_method(traces, caches, &opts)?;
            Ok(Outcome {
                estimate: estimate.with_truth(truth),
                training_seconds: Vec::new(),
                notes: Vec::new(),
            })
        }
        Method::Mlp => {
            if prepared.mlp.is_empty() {
                return Err(Error::Config("no trained regressor available".into()));
            }
            let mut runs = Vec::with_capacity(prepared.mlp.len());
            for (model, _) in &prepared.mlp {
                runs.push(model.predict_trace(&traces[0])?.with_truth(truth));
            }
            Ok(Outcome {
                estimate: pick_median_run(runs),
                // Count the one-off training cost in the first repetition.
                training_seconds: if rep == 0 {
                    prepared.mlp.iter().map(|(_, t)| *t).collect()
                } else {
                    Vec::new()
                },
                notes: seeds_note.into_iter().collect(),
            })
        }
        Method::Pinn => {
            let mut runs = Vec::with_capacity(seeds);
            let mut training = Vec::with_capacity(seeds);
            for s in 0..seeds {
                let cfg = pinn_config(scenario, derive_seed(rep_seed, 7300 + s as u64));
                let t = Instant::now();
                let out = train_pinn(traces, &cfg)?;
                training.push(t.elapsed().as_secs_f64());
                runs.push(out.estimate.with_truth(truth));
            }
            Ok(Outcome {
                estimate: pick_median_run(runs),
                training_seconds: training,
                notes: seeds_note.into_iter().collect(),
            })
        }
        Method::Rl => {
            let env = prepared
                .rl_env
                .as_ref()
                .ok_or_else(|| Error::Config("no trained search agent available".into()))?;
            let max_steps = scenario.knob_usize("rl_max_steps", 200);
            let mut runs = Vec::with_capacity(prepared.rl.len());
            for (net, _) in &prepared.rl {
                let mut fresh = env.clone();
                fresh.reset((0, 0))?;
                let r = rollout(net, &mut fresh, sim.domain_size, max_steps)?;
                runs.push(r.estimate.with_truth(truth));
            }
            if runs.is_empty() {
                return Err(Error::Config("no trained search agent available".into()));
            }
            Ok(Outcome {
                estimate: pick_median_run(runs),
                training_seconds: if rep == 0 {
                    prepared.rl.iter().map(|(_, t)| *t).collect()
                } else {
                    Vec::new()
                },
                notes: seeds_note.into_iter().collect(),
            })
        }
    }
}

/// Runs every requested method on shared per-repetition data. Each
/// repetition draws a fresh noise seed; a method failure is recorded on its
/// row without stopping the others. Rows come back sorted by method name.
pub fn run_scenario(scenario: &Scenario, repetitions: usize) -> Result<BenchmarkReport> {
    scenario.validate()?;
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    let mut sim = scenario.sim;
    sim.source_pos = scenario.true_source;
    let caches: Vec<SolveCache> = scenario
        .sensors
        .iter()
        .map(|&s| SolveCache::new(&sim, s, &scenario.sample_times))
        .collect::<Result<_>>()?;
    let mut acc: BTreeMap<String, Accum> = BTreeMap::new();
    let prepared = prepare_models(scenario, &sim, &mut acc);
    let prepared_failed: BTreeSet<String> = acc.keys().cloned().collect();
    let runnable: Vec<Method> = scenario
        .methods
        .iter()
        .copied()
        .filter(|m| !prepared_failed.contains(m.display_name()))
        .collect();
    for rep in 0..repetitions {
        let rep_seed = derive_seed(scenario.seed, rep as u64);
        let traces: Vec<SensorTrace> = scenario
            .sensors
            .iter()
            .enumerate()
            .map(|(m, &s)| {
                observe(
                    &sim,
                    s,
                    &scenario.sample_times,
                    derive_seed(rep_seed, 100 + m as u64),
                )
            })
            .collect::<Result<_>>()?;
        let outcomes: Vec<(Method, Result<Outcome>)> = if scenario.parallel {
            std::thread::scope(|scope| {
                let handles: Vec<_> = runnable
                    .iter()
                    .map(|&m| {
                        let (sim, caches, traces, prepared) = (&sim, &caches, &traces, &prepared);
                        scope.spawn(move || {
                            (
                                m,
                                run_method(
                                    m, scenario, sim, caches, traces, prepared, rep, rep_seed,
                                ),
                            )
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("method thread"))
                    .collect()
            })
        } else {
            runnable
                .iter()
                .map(|&m| {
                    (
                        m,
                        run_method(
                            m, scenario, &sim, &caches, &traces, &prepared, rep, rep_seed,
                        ),
                    )
                })
                .collect()
        };
        for (m, result) in outcomes {
            let entry = acc.entry(m.display_name().to_string()).or_default();
            match result {
                Ok(outcome) => {
                    entry
                        .inference_seconds
                        .push(outcome.estimate.inference_seconds);
                    entry.estimates.push(outcome.estimate);
                    entry.training_seconds.extend(outcome.training_seconds);
                    entry.notes.extend(outcome.notes);
                    if scenario.parallel {
                        entry
                            .notes
                            .insert("methods ran concurrently; timings share cores".into());
                    }
                }
                Err(e) => entry.failures.push(format!("repetition {rep}: {e}")),
            }
        }
    }
    let rows = acc
        .into_iter()
        .map(|(method, a)| {
            let errors: Vec<f64> = a.estimates.iter().filter_map(|e| e.error).collect();
            MethodRow {
                method,
                median_error: (!errors.is_empty()).then(|| median_of(&errors)),
                mean_error: mean_of(&errors),
                mean_inference_seconds: mean_of(&a.inference_seconds),
                mean_training_seconds: mean_of(&a.training_seconds),
                estimates: a.estimates,
                failures: a.failures,
                notes: a.notes.into_iter().collect(),
            }
        })
        .collect();
    Ok(BenchmarkReport {
        scenario: scenario.name.clone(),
        true_source: scenario.true_source,
        repetitions,
        stochastic_seeds: scenario.knob_usize("stochastic_seeds", 5),
        environment: EnvFingerprint::current(),
        rows,
    })
}

/// Report serialization target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<ReportFormat> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" | "markdown-table" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!(
                "unknown report format '{other}' (expected csv, json, or md)"
            ))),
        }
    }
}

fn fmt_pos(pos: (f64, f64)) -> String {
    format!("({:.3e}, {:.3e})", pos.0, pos.1)
}

/// Writes the report as CSV, JSON, or a markdown table whose columns are
/// Method, Estimated Source, True Source, and Error.
pub fn export_report(report: &BenchmarkReport, format: ReportFormat, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report)?;
            writeln!(out)?;
        }
        ReportFormat::Markdown => {
            writeln!(out, "Method | Estimated Source | True Source | Error (m)")?;
            writeln!(out, "--- | --- | --- | ---")?;
            for row in &report.rows {
                match row.representative() {
                    Some(est) => writeln!(
                        out,
                        "{} | {} | {} | {:.3e}",
                        row.method,
                        fmt_pos(est.position),
                        fmt_pos(report.true_source),
                        est.error.unwrap_or(f64::NAN)
                    )?,
                    None => writeln!(
                        out,
                        "{} | failed | {} | n/a",
                        row.method,
                        fmt_pos(report.true_source)
                    )?,
                }
            }
        }
        ReportFormat::Csv => {
            writeln!(
                out,
                "method,estimate_x_m,estimate_y_m,true_x_m,true_y_m,median_error_m,\
                 mean_error_m,mean_inference_s,mean_training_s,successes,failures"
            )?;
            for row in &report.rows {
                let (ex, ey) = row
                    .representative()
                    .map(|e| (e.position.0.to_string(), e.position.1.to_string()))
                    .unwrap_or_default();
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    row.method,
                    ex,
                    ey,
                    report.true_source.0,
                    report.true_source.1,
                    opt(row.median_error),
                    opt(row.mean_error),
                    opt(row.mean_inference_seconds),
                    opt(row.mean_training_seconds),
                    row.estimates.len(),
                    row.failures.len()
                )?;
            }
        }
    }
    Ok(())
}

/// Reads back a JSON report.
pub fn load_report(path: &Path) -> Result<BenchmarkReport> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Concentration snapshot times used for the standard field figures, in
/// seconds.
pub const SNAPSHOT_TIMES: [f64; 4] = [5.0, 10.0, 15.0, 27.5];

/// Emits figure files into `out_dir`:
/// - concentration heatmaps (PGM + CSV) at the `SNAPSHOT_TIMES` that fit
///   inside the scenario horizon (others are skipped with a warning),
/// - the candidate-grid posterior (PGM + CSV) with the argmax cell in a
///   marker CSV, when the scenario includes the MAP method,
/// - an estimate-vs-truth overlay CSV, when a report is supplied.
///
/// Returns the written paths.
pub fn emit_figures(
    scenario: &Scenario,
    report: Option<&BenchmarkReport>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    scenario.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut sim = scenario.sim;
    sim.source_pos = scenario.true_source;
    let times: Vec<f64> = SNAPSHOT_TIMES
        .iter()
        .copied()
        .filter(|&t| {
            if t <= sim.total_time {
                true
            } else {
                eprintln!(
                    "warning: snapshot time {t} s exceeds the {} s horizon; skipped",
                    sim.total_time
                );
                false
            }
        })
        .collect();
    if !times.is_empty() {
        let (_, snapshots) = run_with_snapshots(&sim, &times)?;
        for (&t, snap) in times.iter().zip(&snapshots) {
            let pgm = out_dir.join(format!("field_t{t}s.pgm"));
            let csv = out_dir.join(format!("field_t{t}s.csv"));
            write_field_pgm(snap, &pgm)?;
            write_field_csv(snap, &csv)?;
            written.push(pgm);
            written.push(csv);
        }
    }
    if scenario.methods.contains(&Method::Map) {
        let rep_seed = derive_seed(scenario.seed, 0);
        let trace = observe(
            &sim,
            scenario.sensors[0],
            &scenario.sample_times,
            derive_seed(rep_seed, 100),
        )?;
        let cache = SolveCache::new(&sim, scenario.sensors[0], &scenario.sample_times)?;
        let nc = scenario.knob_usize("map_resolution", sim.grid.0);
        let (_, posterior) = map_estimate(&trace, nc, &cache)?;
        let pgm = out_dir.join("posterior.pgm");
        let csv = out_dir.join("posterior.csv");
        write_posterior_pgm(&posterior, &pgm)?;
        write_posterior_csv(&posterior, &csv)?;
        let marker = out_dir.join("posterior_argmax.csv");
        let mut out = BufWriter::new(File::create(&marker)?);
        writeln!(out, "i,j,x_m,y_m")?;
        writeln!(
            out,
            "{},{},{},{}",
            posterior.map_cell.0, posterior.map_cell.1, posterior.map_pos.0, posterior.map_pos.1
        )?;
        written.push(pgm);
        written.push(csv);
        written.push(marker);
    }
    if let Some(report) = report {
        let overlay = out_dir.join("estimate_overlay.csv");
        let mut out = BufWriter::new(File::create(&overlay)?);
        writeln!(
            out,
            "method,estimate_x_m,estimate_y_m,true_x_m,true_y_m,error_m"
        )?;
        for row in &report.rows {
            if let Some(est) = row.representative() {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    row.method,
                    est.position.0,
                    est.position.1,
                    report.true_source.0,
                    report.true_source.1,
                    est.error.unwrap_or(f64::NAN)
                )?;
            }
        }
        written.push(overlay);
    }
    Ok(written)
}
