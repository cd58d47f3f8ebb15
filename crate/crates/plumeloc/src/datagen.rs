//! Sensor observation (clean forward readings plus Gaussian noise) and
//! labeled dataset generation for the learned estimators.

use crate::error::{Error, Result};
use crate::sim::{forward_readings, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A time series of sensor readings from one simulated release.
///
/// `readings` carry additive iid Gaussian noise with standard deviation
/// `noise_sigma = config.noise_sigma_frac * (max of the clean field over
/// the whole grid at the end of the run)`. The field reference makes the
/// noise floor independent of sensor placement; a sensor in a quiet
/// corner still faces noise scaled to the plume, not to its own weak
/// signal. Noisy readings are not clamped at zero, matching the additive
/// Gaussian model the likelihood-based estimators assume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorTrace {
    pub sensor_pos: (f64, f64),
    /// Sample times, snapped to the nearest solver step when recorded.
    pub times: Vec<f64>,
    /// Noisy readings, one per sample time.
    pub readings: Vec<f64>,
    /// Noise-free readings, kept for diagnostics and oracle tests.
    pub clean: Vec<f64>,
    pub noise_sigma: f64,
    /// The configuration that generated this trace (true source inside).
    pub config: SimConfig,
    pub seed: u64,
}

/// `n` sample times evenly spaced over (0, total_time], ending exactly
/// at total_time.
pub fn uniform_sample_times(total_time: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 * total_time / n as f64).collect()
}

/// Simulate `cfg` and read the sensor at the given times, adding
/// seed-reproducible Gaussian noise.
pub fn observe(
    cfg: &SimConfig,
    sensor_pos: (f64, f64),
    sample_times: &[f64],
    seed: u64,
) -> Result<SensorTrace> {
    let run = forward_readings(cfg, cfg.source_pos, sensor_pos, sample_times)?;
    let noise_sigma = cfg.noise_sigma_frac * run.final_max;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let readings: Vec<f64> = run
        .readings
        .iter()
        .map(|&c| c + noise_sigma * unit.sample(&mut rng))
        .collect();
    Ok(SensorTrace {
        sensor_pos,
        times: sample_times.to_vec(),
        readings,
        clean: run.readings,
        noise_sigma,
        config: *cfg,
        seed,
    })
}

/// One labeled example: a noisy trace from a random source under a
/// random wind, at a fixed sensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSample {
    pub source: (f64, f64),
    /// Wind used for this sample; only the x component is randomized.
    pub wind: (f64, f64),
    pub noise_sigma: f64,
    pub readings: Vec<f64>,
}

/// A generated dataset plus everything needed to regenerate or extend
/// it: the configuration template, the shared sensor, the sample times,
/// and the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub template: SimConfig,
    pub sensor_pos: (f64, f64),
    pub sample_times: Vec<f64>,
    pub seed: u64,
    pub samples: Vec<DatasetSample>,
}

/// Generate `n` samples. Sources are uniform over the central 80% box
/// of the domain (releases hugging a wall are dominated by boundary loss
/// and carry little signal); wind x components are uniform over
/// [0, 1e-6] m/s with zero y component. Each sample runs its own fresh
/// simulation; source and wind are drawn from a master stream and the
/// per-sample noise seed is derived from (seed, index), so sample `i` is
/// reproducible without regenerating the others' noise.
pub fn build_dataset(
    n: usize,
    template: &SimConfig,
    sensor_pos: (f64, f64),
    seed: u64,
) -> Result<Dataset> {
    if !template.contains(sensor_pos) {
        return Err(Error::InvalidArgument(format!(
            "sensor position {sensor_pos:?} lies outside the domain"
        )));
    }
    let sample_times = uniform_sample_times(template.total_time, 600);
    let (lx, ly) = template.domain_size;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let source = (
            master.gen_range(0.1 * lx..=0.9 * lx),
            master.gen_range(0.1 * ly..=0.9 * ly),
        );
        let wind = (master.gen_range(0.0..=1e-6), 0.0);
        let cfg = SimConfig {
            source_pos: source,
            flow: wind,
            ..*template
        };
        let trace = observe(
            &cfg,
            sensor_pos,
            &sample_times,
            crate::derive_seed(seed, i as u64),
        )?;
        samples.push(DatasetSample {
            source,
            wind,
            noise_sigma: trace.noise_sigma,
            readings: trace.readings,
        });
    }
    Ok(Dataset {
        template: *template,
        sensor_pos,
        sample_times,
        seed,
        samples,
    })
}

/// Shuffle with the seed and split. The test partition gets
/// floor(n * (1 - train_frac)) samples and the training partition the
/// rest, so tiny datasets err toward training data; a degenerate empty
/// partition warns on stderr rather than failing.
pub fn split(dataset: &Dataset, train_frac: f64, seed: u64) -> (Dataset, Dataset) {
    let n = dataset.samples.len();
    let raw = (n as f64) * (1.0 - train_frac.clamp(0.0, 1.0));
    // Snap to the nearest integer when rounding noise sits on it (10 *
    // (1 - 0.8) is 1.9999...96 in floats but means exactly 2).
    let n_test = if (raw - raw.round()).abs() < 1e-9 {
        raw.round() as usize
    } else {
        raw.floor() as usize
    };
    let n_train = n - n_test;
    if n > 0 && (n_train == 0 || n_test == 0) {
        eprintln!(
            "warning: split of {n} samples at train_frac {train_frac} leaves an empty \
             partition (train {n_train}, test {n_test})"
        );
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, explicit so the permutation is stable across rand
    // crate versions.
    for k in (1..n).rev() {
        let j = rng.gen_range(0..=k);
        order.swap(k, j);
    }
    let pick = |idx: &[usize]| Dataset {
        template: dataset.template,
        sensor_pos: dataset.sensor_pos,
        sample_times: dataset.sample_times.clone(),
        seed: dataset.seed,
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

/// Write the samples as CSV (one row per sample: source, wind, noise
/// sigma, then every reading) and the generating metadata as a JSON
/// sidecar next to it (same stem, `.json` extension).
pub fn save_dataset(dataset: &Dataset, csv_path: &Path) -> Result<()> {
    let t = dataset.sample_times.len();
    let mut out = String::new();
    out.push_str("source_x,source_y,wind_x,wind_y,noise_sigma");
    for k in 0..t {
        out.push_str(&format!(",r{k}"));
    }
    out.push('\n');
    for s in &dataset.samples {
        out.push_str(&format!(
            "{},{},{},{},{}",
            s.source.0, s.source.1, s.wind.0, s.wind.1, s.noise_sigma
        ));
        for r in &s.readings {
            out.push_str(&format!(",{r}"));
        }
        out.push('\n');
    }
    std::fs::write(csv_path, out)?;

    let sidecar = Sidecar {
        template: dataset.template,
        sensor_pos: dataset.sensor_pos,
        sample_times: dataset.sample_times.clone(),
        seed: dataset.seed,
        n_samples: dataset.samples.len(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(csv_path.with_extension("json"), json)?;
    Ok(())
}

/// Read a dataset written by `save_dataset` (expects the JSON sidecar
/// next to the CSV).
pub fn load_dataset(csv_path: &Path) -> Result<Dataset> {
    let sidecar: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(csv_path.with_extension("json"))?)?;
    let text = std::fs::read_to_string(csv_path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty dataset CSV".into()))?;
    let expected_cols = 5 + sidecar.sample_times.len();
    if header.split(',').count() != expected_cols {
        return Err(Error::InvalidArgument(format!(
            "dataset CSV has {} columns, sidecar expects {expected_cols}",
            header.split(',').count()
        )));
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!(
                        "dataset CSV row {}: bad number '{f}'",
                        lineno + 2
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if fields.len() != expected_cols {
            return Err(Error::InvalidArgument(format!(
                "dataset CSV row {}: {} columns, expected {expected_cols}",
                lineno + 2,
                fields.len()
            )));
        }
        samples.push(DatasetSample {
            source: (fields[0], fields[1]),
            wind: (fields[2], fields[3]),
            noise_sigma: fields[4],
            readings: fields[5..].to_vec(),
        });
    }
    if samples.len() != sidecar.n_samples {
        return Err(Error::InvalidArgument(format!(
            "dataset CSV holds {} samples, sidecar expects {}",
            samples.len(),
            sidecar.n_samples
        )));
    }
    Ok(Dataset {
        template: sidecar.template,
        sensor_pos: sidecar.sensor_pos,
        sample_times: sidecar.sample_times,
        seed: sidecar.seed,
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    template: SimConfig,
    sensor_pos: (f64, f64),
    sample_times: Vec<f64>,
    seed: u64,
    n_samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::run_to_time;
    use approx::assert_relative_eq;

    /// A small, fast configuration for dataset tests.
    fn tiny_cfg() -> SimConfig {
        SimConfig {
            grid: (10, 10),
            total_time: 100.0 * 5e-5,
            dt: 5e-5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_noise_trace_is_clean() {
        let cfg = SimConfig {
            noise_sigma_frac: 0.0,
            total_time: 0.01,
            ..SimConfig::default()
        };
        let times = uniform_sample_times(cfg.total_time, 20);
        let trace = observe(&cfg, (6e-6, 5e-6), &times, 7).unwrap();
        assert_eq!(trace.readings, trace.clean);
        assert_eq!(trace.noise_sigma, 0.0);
        assert!(trace.clean.iter().any(|&c| c > 0.0));
    }

    #[test]
    fn noise_statistics_match_declared_sigma() {
        let cfg = SimConfig {
            total_time: 0.01,
            ..SimConfig::default()
        };
        let times = uniform_sample_times(cfg.total_time, 600);
        let trace = observe(&cfg, (6e-6, 5e-6), &times, 42).unwrap();
        let sigma = trace.noise_sigma;
        assert!(sigma > 0.0);
        let noise: Vec<f64> = trace
            .readings
            .iter()
            .zip(&trace.clean)
            .map(|(r, c)| r - c)
            .collect();
        let n = noise.len() as f64;
        let mean = noise.iter().sum::<f64>() / n;
        let var = noise.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // 600 draws: the sample mean sits within ~4 standard errors and
        // the sample sigma within 10% for any healthy stream.
        assert!(
            mean.abs() < 4.0 * sigma / n.sqrt(),
            "mean {mean}, sigma {sigma}"
        );
        assert_relative_eq!(var.sqrt(), sigma, max_relative = 0.10);
    }

    #[test]
    fn noise_sigma_scales_with_field_max_not_trace_max() {
        // Sensor in the upwind corner sees a weak signal, but sigma must
        // still reference the field maximum near the source.
        let cfg = SimConfig {
            total_time: 0.01,
            ..SimConfig::default()
        };
        let times = uniform_sample_times(cfg.total_time, 50);
        let corner = (5e-7, 5e-7);
        let trace = observe(&cfg, corner, &times, 3).unwrap();
        let field_max = run_to_time(&cfg).unwrap().max();
        assert_relative_eq!(trace.noise_sigma, 0.1 * field_max, max_relative = 1e-12);
        let trace_max = trace.clean.iter().cloned().fold(0.0, f64::max);
        assert!(
            trace.noise_sigma > 10.0 * trace_max,
            "corner sensor should be noise-dominated: sigma {} vs trace max {}",
            trace.noise_sigma,
            trace_max
        );
    }

    #[test]
    fn observation_is_deterministic_in_the_seed() {
        let cfg = SimConfig {
            total_time: 0.005,
            ..SimConfig::default()
        };
        let times = uniform_sample_times(cfg.total_time, 30);
        let a = observe(&cfg, (6e-6, 5e-6), &times, 5).unwrap();
        let b = observe(&cfg, (6e-6, 5e-6), &times, 5).unwrap();
        let c = observe(&cfg, (6e-6, 5e-6), &times, 6).unwrap();
        assert_eq!(a.readings, b.readings);
        assert_ne!(a.readings, c.readings);
        assert_eq!(a.clean, c.clean);
    }

    #[test]
    fn dataset_samples_respect_their_declared_ranges() {
        let cfg = tiny_cfg();
        let ds = build_dataset(8, &cfg, (7e-6, 5.5e-6), 11).unwrap();
        assert_eq!(ds.samples.len(), 8);
        for s in &ds.samples {
            assert!(s.source.0 >= 1e-6 && s.source.0 <= 9e-6);
            assert!(s.source.1 >= 1e-6 && s.source.1 <= 9e-6);
            assert!(s.wind.0 >= 0.0 && s.wind.0 <= 1e-6);
            assert_eq!(s.wind.1, 0.0);
            assert_eq!(s.readings.len(), 600);
            assert!(s.noise_sigma > 0.0);
        }
        // Sources differ across samples.
        assert_ne!(ds.samples[0].source, ds.samples[1].source);
    }

    #[test]
    fn dataset_generation_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let a = build_dataset(3, &cfg, (7e-6, 5.5e-6), 11).unwrap();
        let b = build_dataset(3, &cfg, (7e-6, 5.5e-6), 11).unwrap();
        let c = build_dataset(3, &cfg, (7e-6, 5.5e-6), 12).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x, y);
        }
        assert_ne!(a.samples[0].source, c.samples[0].source);
    }

    #[test]
    fn split_sizes_follow_the_floor_rule() {
        let cfg = tiny_cfg();
        let mut ds = build_dataset(2, &cfg, (7e-6, 5.5e-6), 1).unwrap();
        // Pad with clones to 10 samples without running more sims.
        while ds.samples.len() < 10 {
            let mut s = ds.samples[ds.samples.len() % 2].clone();
            s.source.0 += 1e-9 * ds.samples.len() as f64;
            ds.samples.push(s);
        }
        let (train, test) = split(&ds, 0.8, 9);
        assert_eq!(train.samples.len(), 8);
        assert_eq!(test.samples.len(), 2);

        // One sample at 0.8: test size floor(0.2) = 0.
        let one = Dataset {
            samples: vec![ds.samples[0].clone()],
            ..ds.clone()
        };
        let (tr1, te1) = split(&one, 0.8, 9);
        assert_eq!(tr1.samples.len(), 1);
        assert_eq!(te1.samples.len(), 0);
    }

    #[test]
    fn split_is_a_seeded_permutation() {
        let cfg = tiny_cfg();
        let mut ds = build_dataset(2, &cfg, (7e-6, 5.5e-6), 1).unwrap();
        for k in 0..8 {
            let mut s = ds.samples[k % 2].clone();
            s.source.0 = 1e-6 + k as f64 * 1e-7;
            ds.samples.push(s);
        }
        let (tr_a, te_a) = split(&ds, 0.7, 123);
        let (tr_b, te_b) = split(&ds, 0.7, 123);
        assert_eq!(tr_a.samples, tr_b.samples);
        assert_eq!(te_a.samples, te_b.samples);
        // Every original sample appears exactly once across partitions.
        let mut seen: Vec<f64> = tr_a
            .samples
            .iter()
            .chain(&te_a.samples)
            .map(|s| s.source.0)
            .collect();
        seen.sort_by(f64::total_cmp);
        let mut orig: Vec<f64> = ds.samples.iter().map(|s| s.source.0).collect();
        orig.sort_by(f64::total_cmp);
        assert_eq!(seen, orig);
        // A different seed shuffles differently.
        let (tr_c, _) = split(&ds, 0.7, 124);
        assert_ne!(
            tr_a.samples.iter().map(|s| s.source.0).collect::<Vec<_>>(),
            tr_c.samples.iter().map(|s| s.source.0).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dataset_round_trips_through_csv_and_sidecar() {
        let cfg = tiny_cfg();
        let ds = build_dataset(4, &cfg, (7e-6, 5.5e-6), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_dataset(&ds, &path).unwrap();
        assert!(path.with_extension("json").exists());
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.template, ds.template);
        assert_eq!(loaded.sensor_pos, ds.sensor_pos);
        assert_eq!(loaded.seed, ds.seed);
        assert_eq!(loaded.sample_times, ds.sample_times);
        assert_eq!(loaded.samples, ds.samples);
    }
}
