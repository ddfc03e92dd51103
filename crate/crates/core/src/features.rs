//! Situation-aware per-aircraft state vectors.
//!
//! Layout of the 18 components:
//!
//! | index | group | components |
//! |-------|-------|------------|
//! | 0–2   | location  | lat (deg), lon (deg), alt (m) |
//! | 3–5   | kinematic | v_gs (km/h), v_vs (m/s), heading (deg) |
//! | 6–7   | control   | v_dial (km/h), h_dial (m) |
//! | 8–13  | boundary  | d_AP, d_AR (km), α_AP, α_AR, I_AP, I_AR |
//! | 14–17 | temporal  | sin/cos hour of day, sin/cos minute of hour |
//!
//! Only the first eight components are z-scored.

use std::f64::consts::TAU;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::geometry::{approach_factor, AirspaceConfig};
use crate::simulator::AdsbMessage;
use crate::snapshot::{LabeledSample, Snapshot};
use crate::{Error, Result};

pub const STATE_DIM: usize = 18;
/// Number of leading components that are normalized.
pub const NORMALIZED_DIM: usize = 8;
/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector(pub [f64; STATE_DIM]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Location,
    Kinematic,
    Control,
    Boundary,
    Temporal,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 5] = [
        FeatureGroup::Location,
        FeatureGroup::Kinematic,
        FeatureGroup::Control,
        FeatureGroup::Boundary,
        FeatureGroup::Temporal,
    ];

    pub fn range(self) -> Range<usize> {
        match self {
            FeatureGroup::Location => 0..3,
            FeatureGroup::Kinematic => 3..6,
            FeatureGroup::Control => 6..8,
            FeatureGroup::Boundary => 8..14,
            FeatureGroup::Temporal => 14..18,
        }
    }

    pub fn width(self) -> usize {
        self.range().len()
    }
}

/// Which feature groups enter the model. Serialized as the list of dropped
/// groups.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    #[serde(default)]
    pub dropped: Vec<FeatureGroup>,
}

impl FeatureSet {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn without(group: FeatureGroup) -> Self {
        FeatureSet { dropped: vec![group] }
    }

    pub fn keeps(&self, group: FeatureGroup) -> bool {
        !self.dropped.contains(&group)
    }

    /// Model input width.
    pub fn dim(&self) -> usize {
        FeatureGroup::ALL.iter().filter(|g| self.keeps(**g)).map(|g| g.width()).sum()
    }

    /// Append the kept components of `v` to `out`.
    pub fn select_into(&self, v: &StateVector, out: &mut Vec<f64>) {
        for g in FeatureGroup::ALL {
            if self.keeps(g) {
                out.extend_from_slice(&v.0[g.range()]);
            }
        }
    }
}

/// Cyclical time-of-day encoding; hour and minute both carry their
/// fractional part so the encoding is continuous.
pub fn time_features(t: f64) -> [f64; 4] {
    let sec_of_day = t.rem_euclid(86_400.0);
    let hour = sec_of_day / 3600.0;
    let minute = sec_of_day.rem_euclid(3600.0) / 60.0;
    let (hs, hc) = (TAU * hour / 24.0).sin_cos();
    let (ms, mc) = (TAU * minute / 60.0).sin_cos();
    [hs, hc, ms, mc]
}

/// Unnormalized state of one aircraft observed in a snapshot taken at `t`.
pub fn extract_raw(msg: &AdsbMessage, t: f64, airspace: &AirspaceConfig) -> StateVector {
    let p = airspace.to_enu(&msg.pos);
    let v = msg.velocity();
    let indicator = |inside: bool| if inside { 1.0 } else { 0.0 };
    let tf = time_features(t);
    StateVector([
        msg.pos.lat,
        msg.pos.lon,
        msg.pos.alt,
        msg.v_gs,
        msg.v_vs,
        msg.heading,
        msg.v_dial,
        msg.h_dial,
        airspace.ap.boundary_distance(&p),
        airspace.ar.boundary_distance(&p),
        approach_factor(&p, v, &airspace.ap),
        approach_factor(&p, v, &airspace.ar),
        indicator(airspace.ap.contains(&p)),
        indicator(airspace.ar.contains(&p)),
        tf[0],
        tf[1],
        tf[2],
        tf[3],
    ])
}

/// The normalized components read straight from a message.
fn raw_head(msg: &AdsbMessage) -> [f64; NORMALIZED_DIM] {
    [msg.pos.lat, msg.pos.lon, msg.pos.alt, msg.v_gs, msg.v_vs, msg.heading, msg.v_dial, msg.h_dial]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NORMALIZED_DIM],
    pub std: [f64; NORMALIZED_DIM],
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) || self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::data("normalization stats must be finite with positive std"));
        }
        Ok(())
    }
}

/// Population mean/std of the first eight components over every aircraft of
/// every training snapshot.
pub fn fit_norm_stats(train: &[LabeledSample]) -> Result<NormStats> {
    let states = || train.iter().flat_map(|s| s.snapshot.aircraft.iter()).map(raw_head);
    let n = states().count();
    if n < 2 {
        return Err(Error::data(format!("need at least 2 aircraft states to fit normalization, got {n}")));
    }
    let mut mean = [0.0; NORMALIZED_DIM];
    for s in states() {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = [0.0; NORMALIZED_DIM];
    for s in states() {
        for ((v, x), m) in var.iter_mut().zip(s).zip(mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.map(|v| (v / n as f64).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

/// Z-score components 0–7; components 8–17 pass through untouched.
pub fn normalize(v: &StateVector, stats: &NormStats) -> StateVector {
    let mut out = *v;
    for i in 0..NORMALIZED_DIM {
        out.0[i] = (v.0[i] - stats.mean[i]) / stats.std[i];
    }
    out
}

/// Normalized, group-selected rows for every aircraft of `snapshot`,
/// flattened row-major (`len = n * features.dim()`).
pub fn encode_snapshot(
    snapshot: &Snapshot,
    airspace: &AirspaceConfig,
    stats: &NormStats,
    features: &FeatureSet,
) -> Vec<f64> {
    let mut rows = Vec::with_capacity(snapshot.len() * features.dim());
    for msg in &snapshot.aircraft {
        let v = normalize(&extract_raw(msg, snapshot.t, airspace), stats);
        features.select_into(&v, &mut rows);
    }
    rows
}
