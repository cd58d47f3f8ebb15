//! Learning-based source estimators: an MLP that regresses the source offset
//! directly from a sensor trace, and a physics-regularized concentration
//! surrogate whose source position is itself a trainable parameter.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{Dataset, SensorTrace};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::estimate::{median_of, SourceEstimate};
use crate::nn::{init_net, Activation, AdamState, Checkpoint, DenseNet};
use crate::sim::SimConfig;

/// Readings per trace consumed by the offset-regression network.
pub const MLP_READINGS: usize = 600;
/// Wind components enter the feature vector in micrometers per second.
const WIND_FEATURE_SCALE: f64 = 1e6;
/// Offsets are regressed in micrometers.
const OFFSET_SCALE: f64 = 1e6;

/// Configuration for offset-regression training.
#[derive(Debug, Clone)]
pub struct MlpTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        MlpTrainConfig {
            epochs: 150,
            lr: 1e-3,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Trained trace-to-offset regressor. The prediction is an offset added to
/// the sensor position, so shifting the sensor shifts the estimate with it.
#[derive(Debug, Clone)]
pub struct MlpEstimator {
    pub net: DenseNet,
    pub sensor_pos: (f64, f64),
    /// Divisor bringing raw readings to order one: the largest absolute
    /// reading seen during training.
    pub feature_scale: f64,
}

/// Training output: the fitted estimator plus per-epoch curves.
#[derive(Debug, Clone)]
pub struct MlpTraining {
    pub estimator: MlpEstimator,
    /// Mean of the minibatch losses within each epoch.
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Median validation localization error per epoch, micrometers.
    pub val_median_um: Vec<f64>,
    /// Epoch whose weights were kept (lowest median validation error).
    pub best_epoch: usize,
}

/// Evenly spaced, tail-aligned selection of `n` readings; the identity when
/// the trace already holds exactly `n`.
fn downsample(readings: &[f64], n: usize) -> Result<Vec<f64>> {
    if readings.len() < n {
        return Err(Error::Dimension(format!(
            "trace holds {} readings but the estimator needs {n}",
            readings.len()
        )));
    }
    Ok((0..n)
        .map(|k| readings[(k + 1) * readings.len() / n - 1])
        .collect())
}

fn mlp_features(readings: &[f64], wind: (f64, f64), feature_scale: f64) -> Result<Vec<f64>> {
    let picked = downsample(readings, MLP_READINGS)?;
    let mut f = Vec::with_capacity(MLP_READINGS + 2);
    f.extend(picked.iter().map(|r| r / feature_scale));
    f.push(wind.0 * WIND_FEATURE_SCALE);
    f.push(wind.1 * WIND_FEATURE_SCALE);
    Ok(f)
}

fn dataset_matrices(ds: &Dataset, feature_scale: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = ds.samples.len();
    let mut x = Array2::zeros((n, MLP_READINGS + 2));
    let mut y = Array2::zeros((n, 2));
    for (k, s) in ds.samples.iter().enumerate() {
        let f = mlp_features(&s.readings, s.wind, feature_scale)?;
        x.row_mut(k).assign(&Array1::from(f));
        y[[k, 0]] = (s.source.0 - ds.sensor_pos.0) * OFFSET_SCALE;
        y[[k, 1]] = (s.source.1 - ds.sensor_pos.1) * OFFSET_SCALE;
    }
    Ok((x, y))
}

fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Trains the 602-256-128-64-2 ReLU regressor on normalized features
/// (readings over the training maximum, wind in um/s) against offsets in
/// micrometers. Keeps the epoch with the lowest median validation error.
pub fn train_mlp(train: &Dataset, val: &Dataset, cfg: &MlpTrainConfig) -> Result<MlpTraining> {
    if train.samples.is_empty() || val.samples.is_empty() {
        return Err(Error::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    let feature_scale = train
        .samples
        .iter()
        .flat_map(|s| s.readings.iter())
        .fold(0.0_f64, |m, &r| m.max(r.abs()));
    if feature_scale <= 0.0 {
        return Err(Error::Config("training readings are all zero".into()));
    }
    let (x_tr, y_tr) = dataset_matrices(train, feature_scale)?;
    let (x_va, y_va) = dataset_matrices(val, feature_scale)?;
    let mut net = init_net(
        &[MLP_READINGS + 2, 256, 128, 64, 2],
        &[
            Activation::Relu,
            Activation::Relu,
            Activation::Relu,
            Activation::Identity,
        ],
        cfg.seed,
    )?;
    let mut opt = AdamState::new(net.param_count(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    let mut train_mse = Vec::with_capacity(cfg.epochs);
    let mut val_mse = Vec::with_capacity(cfg.epochs);
    let mut val_median_um = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, net.params_flat(), 0usize);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = gather_rows(&x_tr, chunk);
            let yb = gather_rows(&y_tr, chunk);
            let tape = net.forward_tape(xb.view())?;
            let resid = tape.output() - &yb;
            let denom = resid.len() as f64;
            let loss = (&resid * &resid).sum() / denom;
            if !loss.is_finite() {
                return Err(Error::Instability {
                    step: epoch,
                    detail: format!("non-finite training loss {loss} at epoch {epoch}"),
                });
            }
            epoch_loss += loss;
            batches += 1;
            let upstream = resid.mapv(|r| 2.0 * r / denom);
            let (grads, _) = net.backward_tape(&tape, &upstream)?;
            let mut p = net.params_flat();
            opt.apply(&mut p, &grads.flat())?;
            net.set_params_flat(&p)?;
        }
        train_mse.push(epoch_loss / batches as f64);
        let pv = net.forward_batch(x_va.view())?;
        let dv = &pv - &y_va;
        val_mse.push((&dv * &dv).sum() / dv.len() as f64);
        let errors: Vec<f64> = dv.rows().into_iter().map(|r| r[0].hypot(r[1])).collect();
        let med = median_of(&errors);
        val_median_um.push(med);
        if med < best.0 {
            best = (med, net.params_flat(), epoch);
        }
    }
    net.set_params_flat(&best.1)?;
    Ok(MlpTraining {
        estimator: MlpEstimator {
            net,
            sensor_pos: train.sensor_pos,
            feature_scale,
        },
        train_mse,
        val_mse,
        val_median_um,
        best_epoch: best.2,
    })
}

impl MlpEstimator {
    /// Predicted source = sensor position + regressed offset.
    pub fn predict(&self, readings: &[f64], wind: (f64, f64)) -> Result<SourceEstimate> {
        let start = Instant::now();
        let features = mlp_features(readings, wind, self.feature_scale)?;
        let out = self.net.forward(&features)?;
        let position = (
            self.sensor_pos.0 + out[0] / OFFSET_SCALE,
            self.sensor_pos.1 + out[1] / OFFSET_SCALE,
        );
        let mut est = SourceEstimate::new("MLP inversion", position);
        est.inference_seconds = start.elapsed().as_secs_f64();
        Ok(est)
    }

    pub fn predict_trace(&self, trace: &SensorTrace) -> Result<SourceEstimate> {
        self.predict(&trace.readings, trace.config.flow)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), serde_json::json!("mlp"));
        meta.insert("sensor_x".into(), serde_json::json!(self.sensor_pos.0));
        meta.insert("sensor_y".into(), serde_json::json!(self.sensor_pos.1));
        meta.insert(
            "feature_scale".into(),
            serde_json::json!(self.feature_scale),
        );
        self.net.to_checkpoint(seed, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<MlpEstimator> {
        expect_kind(ck, "mlp")?;
        Ok(MlpEstimator {
            net: DenseNet::from_checkpoint(ck)?,
            sensor_pos: (meta_f64(ck, "sensor_x")?, meta_f64(ck, "sensor_y")?),
            feature_scale: meta_f64(ck, "feature_scale")?,
        })
    }
}

/// Writes per-epoch regression curves: `epoch,train_mse,val_mse,val_median_um`.
pub fn write_mlp_curves(training: &MlpTraining, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,train_mse,val_mse,val_median_um")?;
    for (k, ((tr, va), med)) in training
        .train_mse
        .iter()
        .zip(&training.val_mse)
        .zip(&training.val_median_um)
        .enumerate()
    {
        writeln!(out, "{k},{tr},{va},{med}")?;
    }
    Ok(())
}

/// Configuration for the physics-regularized surrogate fit.
#[derive(Debug, Clone)]
pub struct PinnConfig {
    pub lambda_mse: f64,
    pub lambda_phy: f64,
    /// Interior residual samples per epoch, redrawn every epoch.
    pub collocation: usize,
    /// Boundary penalty samples per epoch.
    pub boundary_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Physical width of the Gaussian source bump in meters; one grid cell
    /// of the scenario when `None`.
    pub source_width: Option<f64>,
    /// Restart from the four corners plus the center and keep the lowest
    /// final loss.
    pub multi_start: bool,
    pub seed: u64,
}

impl Default for PinnConfig {
    fn default() -> Self {
        PinnConfig {
            lambda_mse: 1.0,
            lambda_phy: 1e-2,
            collocation: 1024,
            boundary_samples: 128,
            epochs: 500,
            lr: 1e-3,
            hidden_width: 64,
            hidden_layers: 3,
            source_width: None,
            multi_start: false,
            seed: 0,
        }
    }
}

/// Concentration surrogate over the unit square plus a trainable source
/// position. The network approximates c / c_scale at normalized coordinates.
#[derive(Debug, Clone)]
pub struct PinnModel {
    pub net: DenseNet,
    /// Source position in unit-square coordinates, kept inside [0, 1]^2.
    pub source_param: (f64, f64),
    pub lambda_mse: f64,
    pub lambda_phy: f64,
    pub sim: SimConfig,
    /// Concentration normalizer.
    pub c_scale: f64,
    /// Peak of the normalized source bump: Q / (2 pi w^2 c_scale).
    pub source_amp: f64,
    /// Physical bump width in meters.
    pub source_width: f64,
}

impl PinnModel {
    /// Source estimate in meters.
    pub fn source_position_m(&self) -> (f64, f64) {
        (
            self.source_param.0 * self.sim.domain_size.0,
            self.source_param.1 * self.sim.domain_size.1,
        )
    }

    /// Normalized emission bump at a unit-square point. Isotropic in
    /// physical space.
    fn smooth_source(&self, point: (f64, f64)) -> f64 {
        let dx = (point.0 - self.source_param.0) * self.sim.domain_size.0;
        let dy = (point.1 - self.source_param.1) * self.sim.domain_size.1;
        let w2 = self.source_width * self.source_width;
        self.source_amp * (-(dx * dx + dy * dy) / (2.0 * w2)).exp()
    }
}

/// Steady transport residual of the surrogate at a unit-square point, in
/// normalized concentration units per second:
/// `(D/L^2) lap(c^) - (u/L).grad(c^) - lambda c^ + S^`.
pub fn pinn_residual(model: &PinnModel, point: (f64, f64)) -> Result<f64> {
    if !(0.0..=1.0).contains(&point.0) || !(0.0..=1.0).contains(&point.1) {
        return Err(Error::InvalidArgument(format!(
            "residual point ({}, {}) outside the unit square",
            point.0, point.1
        )));
    }
    let d = model.net.input_derivatives(&[point.0, point.1])?;
    let (lx, ly) = model.sim.domain_size;
    let dnx = model.sim.diffusion / (lx * lx);
    let dny = model.sim.diffusion / (ly * ly);
    let unx = model.sim.flow.0 / lx;
    let uny = model.sim.flow.1 / ly;
    Ok(dnx * d.hessian_diag[[0, 0]] + dny * d.hessian_diag[[0, 1]]
        - unx * d.gradient[[0, 0]]
        - uny * d.gradient[[0, 1]]
        - model.sim.degradation * d.value[0]
        + model.smooth_source(point))
}

/// Derivative of the residual with respect to the normalized source
/// position; only the emission bump depends on it.
pub fn pinn_source_gradient(model: &PinnModel, point: (f64, f64)) -> (f64, f64) {
    let s = model.smooth_source(point);
    let w2 = model.source_width * model.source_width;
    let (lx, ly) = model.sim.domain_size;
    (
        s * (point.0 - model.source_param.0) * lx * lx / w2,
        s * (point.1 - model.source_param.1) * ly * ly / w2,
    )
}

/// Fit output: the surrogate, the source estimate, and per-epoch losses.
#[derive(Debug, Clone)]
pub struct PinnTraining {
    pub model: PinnModel,
    pub estimate: SourceEstimate,
    pub data_loss: Vec<f64>,
    /// Interior residual plus boundary penalty, unweighted.
    pub physics_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
    /// Source position sat on the clamp boundary for more than 20% of the
    /// final quarter of epochs.
    pub boundary_stuck: bool,
}

/// Pinned-at-boundary diagnostic over per-epoch flags: true when the clamp
/// was active for more than 20% of the final quarter of training.
fn boundary_stuck_from_flags(pinned: &[bool]) -> bool {
    if pinned.is_empty() {
        return false;
    }
    let tail = (pinned.len() / 4).max(1);
    let hits = pinned[pinned.len() - tail..].iter().filter(|&&p| p).count();
    hits as f64 > 0.2 * tail as f64
}

fn sample_boundary(rng: &mut ChaCha8Rng, m: usize) -> Array2<f64> {
    let mut pts = Array2::zeros((m, 2));
    for k in 0..m {
        let t: f64 = rng.gen();
        let side: u8 = rng.gen_range(0..4);
        let (x, y) = match side {
            0 => (0.0, t),
            1 => (1.0, t),
            2 => (t, 0.0),
            _ => (t, 1.0),
        };
        pts[[k, 0]] = x;
        pts[[k, 1]] = y;
    }
    pts
}

/// Joint Adam fit of the surrogate parameters and the source position on a
/// data term (surrogate at each sensor vs its readings, treated as steady
/// samples) plus the mean squared transport residual over collocation points
/// and a soft zero-concentration boundary penalty.
pub fn train_pinn(traces: &[SensorTrace], cfg: &PinnConfig) -> Result<PinnTraining> {
    if traces.is_empty() {
        return Err(Error::Config(
            "surrogate fit needs at least one trace".into(),
        ));
    }
    for trace in traces {
        if trace.readings.is_empty() {
            return Err(Error::Config("trace has no readings".into()));
        }
        if trace.config != traces[0].config {
            return Err(Error::Config(
                "all traces must share one simulation configuration".into(),
            ));
        }
    }
    if cfg.lambda_mse <= 0.0 || cfg.lambda_phy < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must satisfy lambda_mse > 0 and lambda_phy >= 0, got {} and {}",
            cfg.lambda_mse, cfg.lambda_phy
        )));
    }
    if cfg.epochs == 0 || cfg.collocation == 0 {
        return Err(Error::Config(
            "epochs and collocation count must be positive".into(),
        ));
    }
    let sim = traces[0].config;
    // Concentration normalizer: the noise convention ties sigma to the clean
    // field maximum, so sigma/frac recovers it; otherwise fall back to the
    // largest observed reading.
    let c_scale = if sim.noise_sigma_frac > 0.0 && traces[0].noise_sigma > 0.0 {
        traces[0].noise_sigma / sim.noise_sigma_frac
    } else {
        traces
            .iter()
            .flat_map(|t| t.readings.iter())
            .fold(0.0_f64, |m, &r| m.max(r.abs()))
    };
    if c_scale <= 0.0 {
        return Err(Error::Config(
            "traces carry no concentration scale (all readings zero)".into(),
        ));
    }
    let start = Instant::now();
    let inits: &[(f64, f64)] = if cfg.multi_start {
        &[(0.5, 0.5), (0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
    } else {
        &[(0.5, 0.5)]
    };
    let mut best: Option<(f64, PinnTraining, (f64, f64))> = None;
    for &init in inits {
        let run = train_pinn_single(traces, cfg, c_scale, init)?;
        let score = *run.total_loss.last().unwrap();
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, run, init));
        }
    }
    let (score, mut run, init) = best.unwrap();
    if cfg.multi_start {
        run.estimate.notes.push(format!(
            "multi-start: init ({:.2}, {:.2}) won with loss {score:.3e}",
            init.0, init.1
        ));
    }
    run.estimate.inference_seconds = start.elapsed().as_secs_f64();
    Ok(run)
}

fn train_pinn_single(
    traces: &[SensorTrace],
    cfg: &PinnConfig,
    c_scale: f64,
    xs_init: (f64, f64),
) -> Result<PinnTraining> {
    let sim = traces[0].config;
    let (lx, ly) = sim.domain_size;
    let w_m = cfg.source_width.unwrap_or_else(|| sim.dx());
    let amp = sim.emission / (2.0 * PI * w_m * w_m) / c_scale;
    let dnx = sim.diffusion / (lx * lx);
    let dny = sim.diffusion / (ly * ly);
    let unx = sim.flow.0 / lx;
    let uny = sim.flow.1 / ly;
    let lam = sim.degradation;
    let w2 = w_m * w_m;

    let mut dims = vec![2usize];
    dims.extend(std::iter::repeat(cfg.hidden_width).take(cfg.hidden_layers));
    dims.push(1);
    let mut acts = vec![Activation::Tanh; cfg.hidden_layers];
    acts.push(Activation::Identity);
    let mut net = init_net(&dims, &acts, cfg.seed)?;
    let n_params = net.param_count();
    let mut xs = xs_init;
    let mut opt = AdamState::new(n_params + 2, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));

    // Per-trace normalized reading statistics; the data term decomposes as
    // (c - mean)^2 + var exactly.
    let sensor_pts = Array2::from_shape_fn((traces.len(), 2), |(m, k)| {
        if k == 0 {
            traces[m].sensor_pos.0 / lx
        } else {
            traces[m].sensor_pos.1 / ly
        }
    });
    let z_stats: Vec<(f64, f64)> = traces
        .iter()
        .map(|t| {
            let zn: Vec<f64> = t.readings.iter().map(|z| z / c_scale).collect();
            let mean = zn.iter().sum::<f64>() / zn.len() as f64;
            let var = zn.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / zn.len() as f64;
            (mean, var)
        })
        .collect();
    let n_traces = traces.len() as f64;

    let n_coll = cfg.collocation;
    let mut data_loss = Vec::with_capacity(cfg.epochs);
    let mut physics_loss = Vec::with_capacity(cfg.epochs);
    let mut total_loss = Vec::with_capacity(cfg.epochs);
    let mut pinned = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pts = Array2::from_shape_fn((n_coll, 2), |_| rng.gen::<f64>());
        let tape = net.forward_with_input_derivs(pts.view())?;
        let mut resid = Array2::zeros((n_coll, 1));
        let mut bump = vec![0.0; n_coll];
        for b in 0..n_coll {
            let px = pts[[b, 0]];
            let py = pts[[b, 1]];
            let ddx = (px - xs.0) * lx;
            let ddy = (py - xs.1) * ly;
            bump[b] = amp * (-(ddx * ddx + ddy * ddy) / (2.0 * w2)).exp();
            resid[[b, 0]] = dnx * tape.hessian_diag()[0][[b, 0]]
                + dny * tape.hessian_diag()[1][[b, 0]]
                - unx * tape.jacobian()[0][[b, 0]]
                - uny * tape.jacobian()[1][[b, 0]]
                - lam * tape.value()[[b, 0]]
                + bump[b];
        }
        let l_phys = (&resid * &resid).sum() / n_coll as f64;
        let factor = resid.mapv(|r| cfg.lambda_phy * 2.0 * r / n_coll as f64);
        let value_bar = factor.mapv(|f| -lam * f);
        let jac_bar = vec![factor.mapv(|f| -unx * f), factor.mapv(|f| -uny * f)];
        let hess_bar = vec![factor.mapv(|f| dnx * f), factor.mapv(|f| dny * f)];
        let mut grads = net.backward_input_derivs(&tape, &value_bar, &jac_bar, &hess_bar)?;
        let mut gxs = (0.0, 0.0);
        for b in 0..n_coll {
            let f = factor[[b, 0]];
            gxs.0 += f * bump[b] * (pts[[b, 0]] - xs.0) * lx * lx / w2;
            gxs.1 += f * bump[b] * (pts[[b, 1]] - xs.1) * ly * ly / w2;
        }

        let bpts = sample_boundary(&mut rng, cfg.boundary_samples);
        let btape = net.forward_tape(bpts.view())?;
        let cb = btape.output();
        let l_bnd = (cb * cb).sum() / cfg.boundary_samples as f64;
        let upstream_b = cb.mapv(|v| cfg.lambda_phy * 2.0 * v / cfg.boundary_samples as f64);
        let (gb, _) = net.backward_tape(&btape, &upstream_b)?;
        grads.add_scaled(&gb, 1.0);

        let stape = net.forward_tape(sensor_pts.view())?;
        let cs = stape.output();
        let mut l_data = 0.0;
        let mut upstream_s = Array2::zeros((traces.len(), 1));
        for (m, &(mean, var)) in z_stats.iter().enumerate() {
            let c = cs[[m, 0]];
            l_data += ((c - mean).powi(2) + var) / n_traces;
            upstream_s[[m, 0]] = cfg.lambda_mse * 2.0 * (c - mean) / n_traces;
        }
        let (gd, _) = net.backward_tape(&stape, &upstream_s)?;
        grads.add_scaled(&gd, 1.0);

        let total = cfg.lambda_mse * l_data + cfg.lambda_phy * (l_phys + l_bnd);
        if !total.is_finite() {
            return Err(Error::Instability {
                step: epoch,
                detail: format!("non-finite surrogate loss {total} at epoch {epoch}"),
            });
        }
        let mut flat = net.params_flat();
        flat.push(xs.0);
        flat.push(xs.1);
        let mut gflat = grads.flat();
        gflat.push(gxs.0);
        gflat.push(gxs.1);
        opt.apply(&mut flat, &gflat)?;
        xs = (
            flat[n_params].clamp(0.0, 1.0),
            flat[n_params + 1].clamp(0.0, 1.0),
        );
        net.set_params_flat(&flat[..n_params])?;
        pinned.push(xs.0 == 0.0 || xs.0 == 1.0 || xs.1 == 0.0 || xs.1 == 1.0);
        data_loss.push(l_data);
        physics_loss.push(l_phys + l_bnd);
        total_loss.push(total);
    }
    let boundary_stuck = boundary_stuck_from_flags(&pinned);
    let model = PinnModel {
        net,
        source_param: xs,
        lambda_mse: cfg.lambda_mse,
        lambda_phy: cfg.lambda_phy,
        sim,
        c_scale,
        source_amp: amp,
        source_width: w_m,
    };
    let mut estimate = SourceEstimate::new("PINN", model.source_position_m());
    if boundary_stuck {
        estimate.notes.push("boundary-stuck".into());
    }
    Ok(PinnTraining {
        model,
        estimate,
        data_loss,
        physics_loss,
        total_loss,
        boundary_stuck,
    })
}

impl PinnModel {
    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), serde_json::json!("pinn"));
        meta.insert(
            "source_x_norm".into(),
            serde_json::json!(self.source_param.0),
        );
        meta.insert(
            "source_y_norm".into(),
            serde_json::json!(self.source_param.1),
        );
        meta.insert("lambda_mse".into(), serde_json::json!(self.lambda_mse));
        meta.insert("lambda_phy".into(), serde_json::json!(self.lambda_phy));
        meta.insert("c_scale".into(), serde_json::json!(self.c_scale));
        meta.insert("source_amp".into(), serde_json::json!(self.source_amp));
        meta.insert(
            "source_width_m".into(),
            serde_json::json!(self.source_width),
        );
        meta.insert("sim".into(), serde_json::to_value(self.sim)?);
        Ok(self.net.to_checkpoint(seed, meta))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<PinnModel> {
        expect_kind(ck, "pinn")?;
        let sim_value = ck
            .metadata
            .get("sim")
            .ok_or_else(|| Error::Config("checkpoint lacks the 'sim' block".into()))?;
        let sim: SimConfig = serde_json::from_value(sim_value.clone())?;
        Ok(PinnModel {
            net: DenseNet::from_checkpoint(ck)?,
            source_param: (
                meta_f64(ck, "source_x_norm")?,
                meta_f64(ck, "source_y_norm")?,
            ),
            lambda_mse: meta_f64(ck, "lambda_mse")?,
            lambda_phy: meta_f64(ck, "lambda_phy")?,
            sim,
            c_scale: meta_f64(ck, "c_scale")?,
            source_amp: meta_f64(ck, "source_amp")?,
            source_width: meta_f64(ck, "source_width_m")?,
        })
    }
}

/// Writes per-epoch fit curves: `epoch,data_loss,physics_loss,total`.
pub fn write_pinn_curves(training: &PinnTraining, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,data_loss,physics_loss,total")?;
    for (k, ((d, p), t)) in training
        .data_loss
        .iter()
        .zip(&training.physics_loss)
        .zip(&training.total_loss)
        .enumerate()
    {
        writeln!(out, "{k},{d},{p},{t}")?;
    }
    Ok(())
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    let got = ck.metadata.get("kind").and_then(|v| v.as_str());
    if got != Some(kind) {
        return Err(Error::Config(format!(
            "checkpoint kind {got:?} does not match expected '{kind}'"
        )));
    }
    Ok(())
}

fn meta_f64(ck: &Checkpoint, key: &str) -> Result<f64> {
    ck.metadata
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks numeric '{key}'")))
}
