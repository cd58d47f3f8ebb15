//! Command-line front end: simulate fields, generate datasets, run single
//! estimators, benchmark every method, and emit figures.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 partial method failure (the report is still written).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plumeloc::datagen::{build_dataset, save_dataset, uniform_sample_times};
use plumeloc::harness::{
    emit_figures, export_report, load_report, run_scenario, Method, ReportFormat, Scenario,
};
use plumeloc::sim::{read_config_file, run_with_snapshots, write_field_csv, write_field_pgm};
use plumeloc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "plumeloc",
    version,
    about = "Source localization benchmark on a 2D advection-diffusion-reaction model"
)]
struct Cli {
    /// Simulation configuration file (key = value lines); defaults apply
    /// when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for data noise and every stochastic method.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Report format for `bench`: csv, json, or md.
    #[arg(long, global = true, default_value = "json")]
    format: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the forward solver and write concentration snapshots.
    Simulate {
        /// Comma-separated snapshot times in seconds; defaults to the
        /// final time.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
    },
    /// Generate a labeled sensor-trace dataset (CSV plus JSON sidecar).
    GenData {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Sensor position as "x,y" in meters.
        #[arg(long)]
        sensor: Option<String>,
    },
    /// Run one estimator on synthetic data and write the estimate as JSON.
    Localize {
        /// map, kf, mlp, pinn, or rl.
        method: String,
        /// Sensor position as "x,y" in meters.
        #[arg(long)]
        sensor: Option<String>,
        /// Hyperparameter overrides, repeatable: --set key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the full comparison scenario and export the report.
    Bench {
        /// Comma-separated methods; defaults to map,kf,mlp,pinn.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        /// Hyperparameter overrides, repeatable: --set key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Emit field heatmaps, the posterior map, and an estimate overlay.
    Figures {
        /// Previously exported JSON report to overlay estimates from.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Instability { .. }
        | Error::FilterDivergence { .. }
        | Error::UnsupportedActivation(_) => 3,
        _ => 2,
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("expected 'x,y', got '{s}'")))?;
    let a = a
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("expected 'x,y', got '{s}'")))?;
    let b = b
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("expected 'x,y', got '{s}'")))?;
    Ok((a, b))
}

fn parse_overrides(pairs: &[String]) -> Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    for p in pairs {
        let (key, value) = p
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{p}'")))?;
        let value: f64 = value.trim().parse().map_err(|_| {
            Error::Config(format!("override '{key}' needs a number, got '{value}'"))
        })?;
        map.insert(key.trim().to_string(), value);
    }
    Ok(map)
}

/// Builds the scenario the subcommand will run: the stock comparison (or
/// search) scenario, with the simulation template, sensor, seed, and
/// overrides swapped in.
fn scenario_for(
    cli: &Cli,
    methods: Vec<Method>,
    sensor: Option<(f64, f64)>,
    overrides: BTreeMap<String, f64>,
) -> Result<Scenario> {
    let mut scenario = if methods == [Method::Rl] {
        Scenario::search(cli.seed)
    } else {
        Scenario::comparison(cli.seed)
    };
    scenario.methods = methods;
    scenario.seed = cli.seed;
    scenario.overrides = overrides;
    if let Some(path) = &cli.config {
        let sim = read_config_file(path)?;
        scenario.true_source = sim.source_pos;
        scenario.sample_times = uniform_sample_times(sim.total_time, 600);
        scenario.sim = sim;
    }
    if let Some(s) = sensor {
        scenario.sensors = vec![s];
    }
    scenario.validate()?;
    Ok(scenario)
}

fn load_sim(cli: &Cli) -> Result<plumeloc::sim::SimConfig> {
    match &cli.config {
        Some(path) => read_config_file(path),
        None => {
            let cfg = plumeloc::sim::SimConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Simulate { times } => {
            let cfg = load_sim(cli)?;
            let times = if times.is_empty() {
                vec![cfg.total_time]
            } else {
                times.clone()
            };
            for &t in &times {
                if !(0.0..=cfg.total_time).contains(&t) {
                    return Err(Error::Config(format!(
                        "snapshot time {t} s outside [0, {}] s",
                        cfg.total_time
                    )));
                }
            }
            let (_, snapshots) = run_with_snapshots(&cfg, &times)?;
            for (&t, snap) in times.iter().zip(&snapshots) {
                let pgm = cli.out.join(format!("field_t{t}s.pgm"));
                let csv = cli.out.join(format!("field_t{t}s.csv"));
                write_field_pgm(snap, &pgm)?;
                write_field_csv(snap, &csv)?;
                println!("wrote {} and {}", pgm.display(), csv.display());
            }
            Ok(0)
        }
        Command::GenData { samples, sensor } => {
            let cfg = load_sim(cli)?;
            let sensor = match sensor {
                Some(s) => parse_pair(s)?,
                None => (0.65 * cfg.domain_size.0, 0.55 * cfg.domain_size.1),
            };
            let dataset = build_dataset(*samples, &cfg, sensor, cli.seed)?;
            let path = cli.out.join("dataset.csv");
            save_dataset(&dataset, &path)?;
            println!("wrote {} samples to {}", samples, path.display());
            Ok(0)
        }
        Command::Localize {
            method,
            sensor,
            set,
        } => {
            let method = Method::parse(method)?;
            let sensor = sensor.as_deref().map(parse_pair).transpose()?;
            let scenario = scenario_for(cli, vec![method], sensor, parse_overrides(set)?)?;
            let report = run_scenario(&scenario, 1)?;
            let row = report
                .row(method)
                .ok_or_else(|| Error::Config("method produced no row".into()))?;
            if let Some(first) = row.failures.first() {
                return Err(Error::Instability {
                    step: 0,
                    detail: first.clone(),
                });
            }
            let estimate = row
                .representative()
                .expect("non-failed row has an estimate");
            let path = cli.out.join("estimate.json");
            let file = std::fs::File::create(&path)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), estimate)?;
            println!(
                "{}: estimated ({:.4e}, {:.4e}) m, error {} m, wrote {}",
                estimate.method,
                estimate.position.0,
                estimate.position.1,
                estimate
                    .error
                    .map(|e| format!("{e:.4e}"))
                    .unwrap_or_else(|| "n/a".into()),
                path.display()
            );
            Ok(0)
        }
        Command::Bench {
            methods,
            repetitions,
            set,
        } => {
            let methods = if methods.is_empty() {
                vec![Method::Map, Method::Kf, Method::Mlp, Method::Pinn]
            } else {
                methods
                    .iter()
                    .map(|m| Method::parse(m))
                    .collect::<Result<Vec<_>>>()?
            };
            let format = ReportFormat::parse(&cli.format)?;
            let scenario = scenario_for(cli, methods, None, parse_overrides(set)?)?;
            let report = run_scenario(&scenario, *repetitions)?;
            let ext = match format {
                ReportFormat::Csv => "csv",
                ReportFormat::Json => "json",
                ReportFormat::Markdown => "md",
            };
            let path = cli.out.join(format!("report.{ext}"));
            export_report(&report, format, &path)?;
            println!("wrote {}", path.display());
            for row in &report.rows {
                match row.median_error {
                    Some(err) => println!("  {}: median error {err:.4e} m", row.method),
                    None => println!("  {}: failed", row.method),
                }
            }
            let failed = report.rows.iter().any(|r| !r.failures.is_empty());
            Ok(if failed { 4 } else { 0 })
        }
        Command::Figures { report } => {
            let scenario = scenario_for(cli, vec![Method::Map], None, BTreeMap::new())?;
            let loaded = report.as_deref().map(load_report).transpose()?;
            let paths = emit_figures(&scenario, loaded.as_ref(), &cli.out)?;
            for p in &paths {
                println!("wrote {}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
