//! Newline-delimited JSON records, single-document parsers and the
//! attention export format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::features::NormStats;
use crate::geometry::AirspaceConfig;
use crate::model::ModelParams;
use crate::simulator::AdsbMessage;
use crate::snapshot::{LabeledSample, Snapshot};
use crate::{Error, Result};

pub fn write_ndjson<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parse one record per non-blank line with `parse`; errors carry the
/// 1-based line number.
pub fn read_ndjson_with<T>(r: impl BufRead, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|e| Error::data(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn read_ndjson<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    read_ndjson_with(r, |l| Ok(serde_json::from_str(l)?))
}

pub fn write_ndjson_file<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_ndjson(BufWriter::new(File::create(path)?), items)
}

pub fn parse_message_line(line: &str) -> Result<AdsbMessage> {
    Ok(serde_json::from_str(line)?)
}

/// A snapshot document: finite time, unique aircraft ids sorted ascending.
pub fn parse_snapshot(text: &str) -> Result<Snapshot> {
    let s: Snapshot = serde_json::from_str(text)?;
    check_snapshot(&s)?;
    Ok(s)
}

fn check_snapshot(s: &Snapshot) -> Result<()> {
    if !s.t.is_finite() {
        return Err(Error::data("snapshot time must be finite"));
    }
    if s.aircraft.windows(2).any(|w| w[0].aircraft_id >= w[1].aircraft_id) {
        return Err(Error::data("snapshot aircraft must have unique ids in ascending order"));
    }
    if let Some(m) = s.aircraft.iter().find(|m| !m.is_valid()) {
        return Err(Error::data(format!("snapshot holds an invalid message for {}", m.aircraft_id)));
    }
    Ok(())
}

pub fn parse_sample_line(line: &str) -> Result<LabeledSample> {
    let s: LabeledSample = serde_json::from_str(line)?;
    check_snapshot(&s.snapshot)?;
    if !(s.horizon_s.is_finite() && s.horizon_s > 0.0) {
        return Err(Error::data("sample horizon must be positive"));
    }
    Ok(s)
}

pub fn read_messages(path: &Path) -> Result<Vec<AdsbMessage>> {
    read_ndjson_with(BufReader::new(File::open(path)?), parse_message_line)
}

pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    read_ndjson_with(BufReader::new(File::open(path)?), parse_sample_line)
}

pub fn parse_norm_stats(text: &str) -> Result<NormStats> {
    let n: NormStats = serde_json::from_str(text)?;
    n.validate()?;
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedAircraft {
    pub aircraft_id: String,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub in_ap: bool,
    pub in_ar: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub head: usize,
    /// `N_t × N_t`; row `i` is how aircraft `i` distributes its attention.
    pub matrix: Vec<Vec<f64>>,
    /// Column sums: attention each aircraft receives from all aircraft.
    pub influence: Vec<f64>,
    /// Attention received from aircraft currently inside AP.
    pub influence_from_ap: Vec<f64>,
    /// Attention received from aircraft currently inside AR.
    pub influence_from_ar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub t: f64,
    pub aircraft: Vec<ExportedAircraft>,
    pub heads: Vec<HeadAttention>,
}

/// Attention maps of the last attention block for one snapshot, restricted
/// to its aircraft.
pub fn attention_export(params: &ModelParams, snapshot: &Snapshot, airspace: &AirspaceConfig) -> Result<AttentionExport> {
    let sample = params.encode(snapshot, [0.0, 0.0], airspace)?;
    let maps = params.attention_maps(&sample)?;
    let n = snapshot.len();
    let aircraft: Vec<ExportedAircraft> = snapshot
        .aircraft
        .iter()
        .map(|m| {
            let p = airspace.to_enu(&m.pos);
            ExportedAircraft {
                aircraft_id: m.aircraft_id.clone(),
                lat: m.pos.lat,
                lon: m.pos.lon,
                alt: m.pos.alt,
                in_ap: airspace.ap.contains(&p),
                in_ar: airspace.ar.contains(&p),
            }
        })
        .collect();
    let heads = maps
        .into_iter()
        .enumerate()
        .map(|(head, flat)| {
            let matrix: Vec<Vec<f64>> = flat.chunks(n.max(1)).take(n).map(<[f64]>::to_vec).collect();
            let received = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
                (0..n).map(|j| (0..n).filter(|i| keep(*i)).map(|i| matrix[i][j]).sum()).collect()
            };
            HeadAttention {
                head,
                influence: received(&|_| true),
                influence_from_ap: received(&|i| aircraft[i].in_ap),
                influence_from_ar: received(&|i| aircraft[i].in_ar),
                matrix,
            }
        })
        .collect();
    Ok(AttentionExport { t: snapshot.t, aircraft, heads })
}
