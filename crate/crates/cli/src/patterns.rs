//! Control pattern files: 32 rows, one class label per row.

use std::path::Path;

use anyhow::{bail, Context, Result};
use pocketgroove::dataset::{MicrotimingPattern, VelocityPattern, VELOCITY_CLASSES};
use pocketgroove::grid::STEPS;

/// First field of every non-blank, non-comment row.
fn rows(text: &str) -> Result<Vec<&str>> {
    let rows: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').next().unwrap_or("").trim())
        .collect();
    if rows.len() != STEPS {
        bail!("expected {STEPS} rows, found {}", rows.len());
    }
    Ok(rows)
}

/// Velocity classes `1..=5`, or `0` for a step without cymbals.
pub fn parse_velocity(text: &str) -> Result<VelocityPattern> {
    let mut out = [0u8; STEPS];
    for (t, r) in rows(text)?.into_iter().enumerate() {
        match r.parse::<u8>() {
            Ok(c) if c as usize <= VELOCITY_CLASSES => out[t] = c,
            _ => bail!("row {}: velocity class must be 0..=5, got `{r}`", t + 1),
        }
    }
    Ok(VelocityPattern(out))
}

/// Microtiming classes `-1`, `0` or `1`.
pub fn parse_microtiming(text: &str) -> Result<MicrotimingPattern> {
    let mut out = [0i8; STEPS];
    for (t, r) in rows(text)?.into_iter().enumerate() {
        match r.parse::<i8>() {
            Ok(c @ -1..=1) => out[t] = c,
            _ => bail!("row {}: microtiming class must be -1, 0 or 1, got `{r}`", t + 1),
        }
    }
    Ok(MicrotimingPattern(out))
}

pub fn read_velocity(path: &Path) -> Result<VelocityPattern> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_velocity(&text).with_context(|| format!("in {}", path.display()))
}

pub fn read_microtiming(path: &Path) -> Result<MicrotimingPattern> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_microtiming(&text).with_context(|| format!("in {}", path.display()))
}
