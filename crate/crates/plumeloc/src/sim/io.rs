//! Plain-text field export and key = value configuration files.

use super::config::{auto_dt, Boundary, SimConfig};
use super::field::ConcentrationField;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Serialize a field as CSV: a header line naming the metadata columns,
/// one metadata line, then `ny` rows of `nx` values (row j = 0 first,
/// i increasing across each row). Values are full-precision.
pub fn write_field_csv(field: &ConcentrationField, path: &Path) -> Result<()> {
    let cfg = field.config();
    let (nx, ny) = cfg.grid;
    let mut out = String::new();
    out.push_str("nx,ny,lx,ly,t\n");
    let _ = writeln!(
        out,
        "{},{},{},{},{}",
        nx,
        ny,
        cfg.domain_size.0,
        cfg.domain_size.1,
        field.time_stamp()
    );
    for j in 0..ny {
        let row = &field.values()[j * nx..(j + 1) * nx];
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Serialize a field as a binary 8-bit PGM image, scaled linearly so the
/// field maximum maps to 255 (an all-zero field maps to all black).
/// Image row 0 is the top of the domain (j = ny - 1), matching the usual
/// y-up physical convention.
pub fn write_field_pgm(field: &ConcentrationField, path: &Path) -> Result<()> {
    write_pgm(field, field.max(), path)
}

/// PGM export with an explicit scale maximum, so a time series of frames
/// can share one color scale. Values at or above `scale_max` map to 255.
pub fn write_pgm(field: &ConcentrationField, scale_max: f64, path: &Path) -> Result<()> {
    let (nx, ny) = field.config().grid;
    let mut bytes = Vec::with_capacity(64 + nx * ny);
    bytes.extend_from_slice(format!("P5\n{nx} {ny}\n255\n").as_bytes());
    let scale = if scale_max > 0.0 {
        255.0 / scale_max
    } else {
        0.0
    };
    for j in (0..ny).rev() {
        for i in 0..nx {
            let v = (field.at(i, j) * scale).round().clamp(0.0, 255.0);
            bytes.push(v as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parse a configuration from `key = value` lines. Unset keys keep their
/// defaults; `dt = auto` (or leaving `dt` unset) selects half the
/// stability bound for the resulting parameters. Blank lines and lines
/// starting with `#` are ignored. Pair-valued keys take `x,y`.
///
/// Recognized keys match the configuration field names: `domain_size`,
/// `grid`, `diffusion`, `flow`, `degradation`, `emission`, `source_pos`,
/// `injection_duration`, `dt`, `total_time`, `boundary`,
/// `noise_sigma_frac`.
pub fn read_config_file(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub(crate) fn parse_config(text: &str) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    let mut dt_auto = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key = value, got '{line}'",
                lineno + 1
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad =
            |what: &str| Error::Config(format!("line {}: {key}: {what} '{value}'", lineno + 1));
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| bad("expected a number, got"))
        };
        let pair = || -> Result<(f64, f64)> {
            let (a, b) = value
                .split_once(',')
                .ok_or_else(|| bad("expected 'x,y', got"))?;
            let a = a
                .trim()
                .parse::<f64>()
                .map_err(|_| bad("expected 'x,y', got"))?;
            let b = b
                .trim()
                .parse::<f64>()
                .map_err(|_| bad("expected 'x,y', got"))?;
            Ok((a, b))
        };
        match key {
            "domain_size" => cfg.domain_size = pair()?,
            "grid" => {
                let (a, b) = pair()?;
                if a.fract() != 0.0 || b.fract() != 0.0 || a < 1.0 || b < 1.0 {
                    return Err(bad("expected positive integers, got"));
                }
                cfg.grid = (a as usize, b as usize);
            }
            "diffusion" => cfg.diffusion = num()?,
            "flow" => cfg.flow = pair()?,
            "degradation" => cfg.degradation = num()?,
            "emission" => cfg.emission = num()?,
            "source_pos" => cfg.source_pos = pair()?,
            "injection_duration" => cfg.injection_duration = num()?,
            "dt" => {
                if value == "auto" {
                    dt_auto = true;
                } else {
                    cfg.dt = num()?;
                    dt_auto = false;
                }
            }
            "total_time" => cfg.total_time = num()?,
            "boundary" => cfg.boundary = Boundary::parse(value)?,
            "noise_sigma_frac" => cfg.noise_sigma_frac = num()?,
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    if dt_auto {
        cfg.dt = auto_dt(&cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Render a configuration in the `key = value` format `read_config_file`
/// accepts; round-trips exactly.
pub fn format_config(cfg: &SimConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "domain_size = {},{}",
        cfg.domain_size.0, cfg.domain_size.1
    );
    let _ = writeln!(s, "grid = {},{}", cfg.grid.0, cfg.grid.1);
    let _ = writeln!(s, "diffusion = {}", cfg.diffusion);
    let _ = writeln!(s, "flow = {},{}", cfg.flow.0, cfg.flow.1);
    let _ = writeln!(s, "degradation = {}", cfg.degradation);
    let _ = writeln!(s, "emission = {}", cfg.emission);
    let _ = writeln!(s, "source_pos = {},{}", cfg.source_pos.0, cfg.source_pos.1);
    let _ = writeln!(s, "injection_duration = {}", cfg.injection_duration);
    let _ = writeln!(s, "dt = {}", cfg.dt);
    let _ = writeln!(s, "total_time = {}", cfg.total_time);
    let _ = writeln!(s, "boundary = {}", cfg.boundary.as_str());
    let _ = writeln!(s, "noise_sigma_frac = {}", cfg.noise_sigma_frac);
    s
}
