//! Layer-wise expert-count schedules.
//!
//! A schedule maps a depth position `t ∈ [0, 1]` to a (real) number of
//! experts between `n_min` and `n_max`. Layer `ℓ ∈ 1..=L` sits at
//! `t = (ℓ - 1) / (L - 1)`, with `t = 0` for a single-layer model, and its
//! integer expert count is the schedule value rounded half-up and clamped
//! to `[n_min, n_max]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wave breakpoints as fractions of `n_max - n_min` above `n_min`.
const WAVE_ALPHA: f64 = 0.3;
const WAVE_BETA: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Uniform,
    Descending,
    Ascending,
    PyramidUp,
    PyramidDown,
    WaveDown,
    WaveUp,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 7] = [
        ScheduleKind::Uniform,
        ScheduleKind::Descending,
        ScheduleKind::Ascending,
        ScheduleKind::PyramidUp,
        ScheduleKind::PyramidDown,
        ScheduleKind::WaveDown,
        ScheduleKind::WaveUp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::Descending => "descending",
            ScheduleKind::Ascending => "ascending",
            ScheduleKind::PyramidUp => "pyramid_up",
            ScheduleKind::PyramidDown => "pyramid_down",
            ScheduleKind::WaveDown => "wave_down",
            ScheduleKind::WaveUp => "wave_up",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Domain(format!("unknown schedule kind `{s}`")))
    }
}

/// Schedule kind plus the expert-count range and depth it is evaluated over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub n_max: usize,
    pub n_min: usize,
    pub layers: usize,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, n_max: usize, n_min: usize, layers: usize) -> Result<Self> {
        let spec = ScheduleSpec {
            kind,
            n_max,
            n_min,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 {
            return Err(Error::Domain("n_min must be at least 1".into()));
        }
        if self.n_min > self.n_max {
            return Err(Error::Domain(format!(
                "n_min ({}) exceeds n_max ({})",
                self.n_min, self.n_max
            )));
        }
        if self.layers < 1 {
            return Err(Error::Domain("schedule needs at least one layer".into()));
        }
        Ok(())
    }

    /// Depth position of 1-based layer `layer`.
    pub fn position(&self, layer: usize) -> f64 {
        if self.layers == 1 {
            0.0
        } else {
            (layer - 1) as f64 / (self.layers - 1) as f64
        }
    }
}

/// Raw, unrounded schedule value at depth position `t`.
pub fn schedule_value(kind: ScheduleKind, t: f64, n_max: usize, n_min: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("position t = {t} outside [0, 1]")));
    }
    if n_min > n_max {
        return Err(Error::Domain(format!(
            "n_min ({n_min}) exceeds n_max ({n_max})"
        )));
    }
    Ok(value_unchecked(kind, t, n_max as f64, n_min as f64))
}

fn value_unchecked(kind: ScheduleKind, t: f64, hi: f64, lo: f64) -> f64 {
    let span = hi - lo;
    match kind {
        ScheduleKind::Uniform => hi,
        ScheduleKind::Descending => hi - t * span,
        ScheduleKind::Ascending => lo + t * span,
        ScheduleKind::PyramidUp => {
            if t <= 0.5 {
                lo + 2.0 * t * span
            } else {
                hi - 2.0 * (t - 0.5) * span
            }
        }
        ScheduleKind::PyramidDown => {
            if t <= 0.5 {
                hi - 2.0 * t * span
            } else {
                lo + 2.0 * (t - 0.5) * span
            }
        }
        ScheduleKind::WaveDown => {
            let alpha = lo + WAVE_ALPHA * span;
            let beta = lo + WAVE_BETA * span;
            if t <= 1.0 / 3.0 {
                hi - 3.0 * t * (hi - alpha)
            } else if t <= 2.0 / 3.0 {
                alpha + 3.0 * (t - 1.0 / 3.0) * (beta - alpha)
            } else {
                beta - 3.0 * (t - 2.0 / 3.0) * (beta - lo)
            }
        }
        // depth mirror of wave-down
        ScheduleKind::WaveUp => value_unchecked(ScheduleKind::WaveDown, 1.0 - t, hi, lo),
    }
}

/// Round half-up. The small bias keeps values like `4.4999999999` that are
/// exact halves in real arithmetic from rounding down.
fn round_half_up(v: f64) -> f64 {
    (v + 0.5 + 1e-9).floor()
}

/// Integer expert count for every layer, first layer first.
pub fn layer_expert_counts(spec: &ScheduleSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    (1..=spec.layers)
        .map(|layer| {
            let raw = schedule_value(spec.kind, spec.position(layer), spec.n_max, spec.n_min)?;
            let rounded = round_half_up(raw).clamp(spec.n_min as f64, spec.n_max as f64);
            Ok(rounded as usize)
        })
        .collect()
}
