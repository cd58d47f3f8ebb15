//! Measures raw stepping throughput on the default 50x50 grid: the
//! grid-search estimator solves thousands of 10k-step forward problems,
//! so per-step cost decides its wall-clock budget.

use plumeloc::sim::{forward_readings, SimConfig};
use std::time::Instant;

fn main() {
    let cfg = SimConfig {
        total_time: 0.5, // 10 000 steps at dt = 5e-5
        ..SimConfig::default()
    };
    let sensor = cfg.cell_center(32, 27);
    let times: Vec<f64> = (1..=600)
        .map(|k| k as f64 * cfg.total_time / 600.0)
        .collect();

    // Warm up once, then time a batch of solves at distinct candidates.
    let warm = forward_readings(&cfg, cfg.source_pos, sensor, &times).unwrap();
    println!("warmup final max = {:.4e}", warm.final_max);

    let candidates: Vec<(f64, f64)> = (0..20)
        .map(|k| cfg.cell_center(5 + 2 * (k % 10), 5 + 4 * (k / 10)))
        .collect();
    let start = Instant::now();
    let mut sink = 0.0;
    for &c in &candidates {
        let run = forward_readings(&cfg, c, sensor, &times).unwrap();
        sink += run.readings[599];
    }
    let elapsed = start.elapsed();
    let per_solve = elapsed / candidates.len() as u32;
    let steps = cfg.n_steps() as f64;
    let cells = cfg.n_cells() as f64;
    let ns_per_cell_step = elapsed.as_nanos() as f64 / candidates.len() as f64 / (steps * cells);
    println!("sink = {sink:.4e}");
    println!(
        "{} solves of {} steps: {:.2?} total, {:.2?} per solve, {:.3} ns per cell-step",
        candidates.len(),
        cfg.n_steps(),
        elapsed,
        per_solve,
        ns_per_cell_step
    );
    println!(
        "projected 2500-candidate cache build: {:.1?}",
        per_solve * 2500
    );
}
