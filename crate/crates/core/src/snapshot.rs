//! Snapshot construction, flow labels and chronological splits.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::geometry::{AirspaceConfig, RegionId};
use crate::simulator::AdsbMessage;
use crate::{Error, Result};

/// Look-back window covering two 4 s reporting cycles.
pub const DEFAULT_WINDOW_S: f64 = 8.0;
/// Prediction horizon: 15 minutes.
pub const DEFAULT_HORIZON_S: f64 = 900.0;

/// The set of aircraft states observed at query time `t`.
///
/// Aircraft are stored sorted by id; order carries no meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub aircraft: Vec<AdsbMessage>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.aircraft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aircraft.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub snapshot: Snapshot,
    pub y_ap: u32,
    pub y_ar: u32,
    pub horizon_s: f64,
}

impl LabeledSample {
    pub fn t(&self) -> f64 {
        self.snapshot.t
    }

    pub fn labels(&self) -> [f64; 2] {
        [self.y_ap as f64, self.y_ar as f64]
    }
}

/// Anything carrying a query time, for chronological splitting.
pub trait Timestamped {
    fn timestamp(&self) -> f64;
}

impl Timestamped for LabeledSample {
    fn timestamp(&self) -> f64 {
        self.t()
    }
}

fn admit(msg: &AdsbMessage, t: f64, window: f64, airspace: &AirspaceConfig) -> bool {
    msg.t >= t - window
        && msg.t <= t
        && msg.is_valid()
        && airspace.in_scope(&airspace.to_enu(&msg.pos))
}

fn collect<'a>(
    candidates: impl Iterator<Item = &'a AdsbMessage>,
    t: f64,
    window: f64,
    airspace: &AirspaceConfig,
) -> Snapshot {
    let mut latest: BTreeMap<&str, &AdsbMessage> = BTreeMap::new();
    for msg in candidates.filter(|m| admit(m, t, window, airspace)) {
        match latest.get(msg.aircraft_id.as_str()) {
            Some(prev) if prev.t > msg.t => {}
            _ => {
                latest.insert(&msg.aircraft_id, msg);
            }
        }
    }
    Snapshot { t, aircraft: latest.into_values().cloned().collect() }
}

/// Latest valid in-scope report per aircraft within `[t - window, t]`.
///
/// Equal timestamps resolve to the later message in input order. The input
/// need not be sorted.
pub fn build_snapshot(
    messages: &[AdsbMessage],
    t: f64,
    window: f64,
    airspace: &AirspaceConfig,
) -> Snapshot {
    collect(messages.iter(), t, window, airspace)
}

/// Time-sorted view over a message stream for repeated window queries.
pub struct MessageIndex<'a> {
    messages: &'a [AdsbMessage],
    order: Vec<usize>,
}

impl<'a> MessageIndex<'a> {
    pub fn new(messages: &'a [AdsbMessage]) -> Self {
        let mut order: Vec<usize> = (0..messages.len()).collect();
        // Stable: equal timestamps keep input order.
        order.sort_by(|&a, &b| messages[a].t.total_cmp(&messages[b].t));
        MessageIndex { messages, order }
    }

    /// `(first, last)` timestamps, or `None` for an empty stream.
    pub fn coverage(&self) -> Option<(f64, f64)> {
        let first = self.messages[*self.order.first()?].t;
        let last = self.messages[*self.order.last()?].t;
        Some((first, last))
    }

    /// Same result as [`build_snapshot`] over the indexed stream.
    pub fn snapshot(&self, t: f64, window: f64, airspace: &AirspaceConfig) -> Snapshot {
        let lo = self.order.partition_point(|&i| self.messages[i].t < t - window);
        let hi = self.order.partition_point(|&i| self.messages[i].t <= t);
        collect(self.order[lo..hi].iter().map(|&i| &self.messages[i]), t, window, airspace)
    }
}

/// Aircraft counts `(y_ap, y_ar)` inside each controlled region.
pub fn count_labels(snapshot: &Snapshot, airspace: &AirspaceConfig) -> (u32, u32) {
    let mut counts = (0, 0);
    for msg in &snapshot.aircraft {
        let p = airspace.to_enu(&msg.pos);
        if airspace.region(RegionId::Ap).contains(&p) {
            counts.0 += 1;
        }
        if airspace.region(RegionId::Ar).contains(&p) {
            counts.1 += 1;
        }
    }
    counts
}

/// Parameters of dataset construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub horizon_s: f64,
    pub window_s: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { horizon_s: DEFAULT_HORIZON_S, window_s: DEFAULT_WINDOW_S }
    }
}

/// Evenly spaced query times `start, start + cadence, ...` no later than
/// `end`.
pub fn time_grid(start: f64, end: f64, cadence: f64) -> Vec<f64> {
    if !(cadence > 0.0) || end < start {
        return vec![];
    }
    let n = ((end - start) / cadence).floor() as usize;
    (0..=n).map(|k| start + k as f64 * cadence).collect()
}

/// One labeled sample per query time: the snapshot at `t` with counts taken
/// from the snapshot at `t + horizon`.
///
/// `coverage` bounds the time span the stream is known to describe; it
/// defaults to the first/last message timestamps.
pub fn make_dataset(
    messages: &[AdsbMessage],
    t_grid: &[f64],
    spec: DatasetSpec,
    airspace: &AirspaceConfig,
    coverage: Option<(f64, f64)>,
) -> Result<Vec<LabeledSample>> {
    if !(spec.window_s > 0.0) {
        return Err(Error::config("snapshot window must be positive"));
    }
    if !(spec.horizon_s >= 0.0) {
        return Err(Error::config("horizon must be nonnegative"));
    }
    let index = MessageIndex::new(messages);
    let (start, end) = match coverage.or_else(|| index.coverage()) {
        Some(c) => c,
        None => return Err(Error::data("message stream is empty and no coverage was given")),
    };
    for &t in t_grid {
        if !t.is_finite() || t < start || t + spec.horizon_s > end {
            return Err(Error::data(format!(
                "query time {t} with horizon {} s falls outside coverage [{start}, {end}]",
                spec.horizon_s
            )));
        }
    }
    let mut cache: HashMap<u64, Snapshot> = HashMap::new();
    let mut snapshot_at = |t: f64| -> Snapshot {
        cache
            .entry(t.to_bits())
            .or_insert_with(|| index.snapshot(t, spec.window_s, airspace))
            .clone()
    };
    let samples = t_grid
        .iter()
        .map(|&t| {
            let snapshot = snapshot_at(t);
            let (y_ap, y_ar) = count_labels(&snapshot_at(t + spec.horizon_s), airspace);
            LabeledSample { snapshot, y_ap, y_ar, horizon_s: spec.horizon_s }
        })
        .collect();
    Ok(samples)
}

/// Split sizes `(floor(r0 N), floor(r1 N), remainder)`.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize)> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::config("split ratios must be positive"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split ratios must sum to 1"));
    }
    // Absorbs representation error in r * n just below an integer.
    let take = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let train = take(ratios[0]).min(n);
    let val = take(ratios[1]).min(n - train);
    Ok((train, val, n - train - val))
}

/// Chronological train/validation/test split; the remainder goes to test.
pub fn chronological_split<T: Timestamped>(
    samples: Vec<T>,
    ratios: [f64; 3],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if samples.windows(2).any(|w| w[0].timestamp() > w[1].timestamp()) {
        return Err(Error::data("samples must be sorted by time before splitting"));
    }
    let (n_train, n_val, _) = split_sizes(samples.len(), ratios)?;
    let mut rest = samples;
    let mut tail = rest.split_off(n_train);
    let test = tail.split_off(n_val);
    Ok((rest, tail, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EnuPoint;

    fn msg_at(airspace: &AirspaceConfig, id: &str, t: f64, p: EnuPoint) -> AdsbMessage {
        AdsbMessage {
            aircraft_id: id.into(),
            t,
            pos: airspace.from_enu(&p),
            v_gs: 400.0,
            v_vs: 0.0,
            heading: 90.0,
            v_dial: 400.0,
            h_dial: p.z * 1000.0,
        }
    }

    #[test]
    fn window_keeps_latest() {
        let a = AirspaceConfig::terminal_default();
        let p = EnuPoint::new(30.0, 0.0, 3.0);
        let t = 1000.0;
        let msgs: Vec<_> = [t - 10.0, t - 6.0, t - 2.0].iter().map(|&s| msg_at(&a, "A", s, p)).collect();
        let s = build_snapshot(&msgs, t, 8.0, &a);
        assert_eq!(s.len(), 1);
        assert_eq!(s.aircraft[0].t, t - 2.0);
    }

    #[test]
    fn out_of_scope_and_empty() {
        let a = AirspaceConfig::terminal_default();
        let far = msg_at(&a, "F", 100.0, EnuPoint::new(400.0, 0.0, 3.0));
        assert!(build_snapshot(&[far], 100.0, 8.0, &a).is_empty());
        assert!(build_snapshot(&[], 100.0, 8.0, &a).is_empty());
    }

    #[test]
    fn equal_timestamps_later_input_wins() {
        let a = AirspaceConfig::terminal_default();
        let m1 = msg_at(&a, "A", 5.0, EnuPoint::new(30.0, 0.0, 3.0));
        let m2 = msg_at(&a, "A", 5.0, EnuPoint::new(31.0, 0.0, 3.0));
        let s = build_snapshot(&[m1.clone(), m2.clone()], 6.0, 8.0, &a);
        assert_eq!(s.aircraft, vec![m2.clone()]);
        let s = build_snapshot(&[m2, m1.clone()], 6.0, 8.0, &a);
        assert_eq!(s.aircraft, vec![m1]);
    }

    #[test]
    fn invalid_messages_are_skipped() {
        let a = AirspaceConfig::terminal_default();
        let mut m = msg_at(&a, "A", 5.0, EnuPoint::new(30.0, 0.0, 3.0));
        m.v_gs = f64::NAN;
        assert!(build_snapshot(&[m], 6.0, 8.0, &a).is_empty());
    }

    #[test]
    fn label_counts() {
        let a = AirspaceConfig::terminal_default();
        let mut aircraft = vec![];
        for (i, x) in [30.0, 35.0, -40.0].iter().enumerate() {
            aircraft.push(msg_at(&a, &format!("R{i}"), 0.0, EnuPoint::new(*x, 0.0, 3.0)));
        }
        aircraft.push(msg_at(&a, "P", 0.0, EnuPoint::new(2.0, 1.0, 0.5)));
        aircraft.push(msg_at(&a, "B1", 0.0, EnuPoint::new(90.0, 0.0, 3.0)));
        aircraft.push(msg_at(&a, "B2", 0.0, EnuPoint::new(0.0, 0.0, 9.0)));
        let snap = Snapshot { t: 0.0, aircraft };
        assert_eq!(count_labels(&snap, &a), (1, 3));
        assert_eq!(count_labels(&Snapshot { t: 0.0, aircraft: vec![] }, &a), (0, 0));
        let buffer_only = Snapshot { t: 0.0, aircraft: snap.aircraft[4..].to_vec() };
        assert_eq!(count_labels(&buffer_only, &a), (0, 0));
    }

    #[test]
    fn dataset_labels_and_coverage() {
        let a = AirspaceConfig::terminal_default();
        let p = EnuPoint::new(30.0, 0.0, 3.0);
        let msgs: Vec<_> = (0..=300).map(|k| msg_at(&a, "S", k as f64 * 4.0, p)).collect();
        let spec = DatasetSpec { horizon_s: 900.0, window_s: 8.0 };
        let ds = make_dataset(&msgs, &[100.0], spec, &a, None).unwrap();
        assert_eq!((ds[0].y_ap, ds[0].y_ar), (0, 1));
        assert!(make_dataset(&msgs, &[400.0], spec, &a, None).is_err());

        let zero = DatasetSpec { horizon_s: 0.0, window_s: 8.0 };
        let ds = make_dataset(&msgs, &[100.0], zero, &a, None).unwrap();
        assert_eq!((ds[0].y_ap, ds[0].y_ar), count_labels(&ds[0].snapshot, &a));
    }

    #[test]
    fn split_floor_arithmetic() {
        assert_eq!(split_sizes(100, [0.8, 0.1, 0.1]).unwrap(), (80, 10, 10));
        assert_eq!(split_sizes(224_904, [0.8, 0.1, 0.1]).unwrap(), (179_923, 22_490, 22_491));
        assert_eq!(split_sizes(3, [0.8, 0.1, 0.1]).unwrap(), (2, 0, 1));
        assert!(split_sizes(3, [0.8, 0.3, 0.1]).is_err());
    }

    #[test]
    fn split_rejects_unsorted_and_keeps_order() {
        let mk = |t: f64| LabeledSample {
            snapshot: Snapshot { t, aircraft: vec![] },
            y_ap: 0,
            y_ar: 0,
            horizon_s: 900.0,
        };
        assert!(chronological_split(vec![mk(2.0), mk(1.0)], [0.8, 0.1, 0.1]).is_err());
        let (tr, va, te) = chronological_split((0..10).map(|k| mk(k as f64)).collect(), [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        assert!(tr.last().unwrap().t() < va[0].t() && va[0].t() < te[0].t());
    }

    #[test]
    fn grid_is_inclusive() {
        assert_eq!(time_grid(0.0, 180.0, 60.0), vec![0.0, 60.0, 120.0, 180.0]);
        assert!(time_grid(0.0, 10.0, 0.0).is_empty());
    }
}
