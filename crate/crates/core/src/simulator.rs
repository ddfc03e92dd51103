//! Deterministic synthetic terminal-area traffic.
//!
//! Flights spawn from an inhomogeneous (hour-by-hour) Poisson process, follow
//! piecewise-linear waypoint routes with a turn-rate cap, and emit one
//! ADS-B-like report every `msg_period_s` seconds. Each report is dropped
//! independently with probability `drop_prob`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::{AirspaceConfig, EnuPoint, GeoPoint};
use crate::{Error, Result};

/// Maximum heading change rate, degrees per second.
pub const MAX_TURN_RATE_DEG_S: f64 = 3.0;

/// Flights that have not reached their last waypoint after this long are
/// retired.
const MAX_FLIGHT_S: f64 = 4.0 * 3600.0;

/// One surveillance report for one aircraft.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdsbMessage {
    pub aircraft_id: String,
    /// Seconds since the simulation epoch (midnight of day 0).
    pub t: f64,
    pub pos: GeoPoint,
    /// Ground speed, km/h.
    pub v_gs: f64,
    /// Vertical speed, m/s.
    pub v_vs: f64,
    /// Degrees clockwise from north, in [0, 360).
    pub heading: f64,
    /// Selected airspeed, km/h.
    pub v_dial: f64,
    /// Selected altitude, metres.
    pub h_dial: f64,
}

impl AdsbMessage {
    /// All fields finite and within their documented ranges.
    pub fn is_valid(&self) -> bool {
        let scalars = [self.t, self.v_gs, self.v_vs, self.heading, self.v_dial, self.h_dial];
        scalars.iter().all(|v| v.is_finite())
            && self.pos.is_valid()
            && self.t >= 0.0
            && self.v_gs >= 0.0
            && (0.0..360.0).contains(&self.heading)
    }

    /// Horizontal velocity `[east, north]` in km/h.
    pub fn velocity(&self) -> [f64; 2] {
        let h = self.heading.to_radians();
        [self.v_gs * h.sin(), self.v_gs * h.cos()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightKind {
    Arrival,
    Departure,
    Overflight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightPlan {
    pub spawn_t: f64,
    pub entry: EnuPoint,
    pub waypoints: Vec<EnuPoint>,
    /// Highest airborne ground speed, km/h.
    pub cruise_speed: f64,
    /// Per-segment ground speed, km/h; `segment_speeds[i]` applies on the
    /// leg towards `waypoints[i]`.
    pub segment_speeds: Vec<f64>,
    /// Vertical speed limit, m/s.
    pub descent_rate: f64,
    pub kind: FlightKind,
}

impl FlightPlan {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::config("flight plan needs at least 2 waypoints"));
        }
        if self.segment_speeds.len() != self.waypoints.len() {
            return Err(Error::config("one segment speed per waypoint required"));
        }
        if !(200.0..=900.0).contains(&self.cruise_speed) {
            return Err(Error::config("cruise speed must lie in [200, 900] km/h"));
        }
        if self.segment_speeds.iter().any(|v| !(*v > 0.0 && *v <= self.cruise_speed)) {
            return Err(Error::config("segment speeds must be positive and at most the cruise speed"));
        }
        if !(self.descent_rate > 0.0) {
            return Err(Error::config("descent rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Flights spawned per hour, indexed by hour of day.
    pub hourly_rate: Vec<f64>,
    pub msg_period_s: f64,
    pub drop_prob: f64,
    /// Probabilities of (arrival, departure, overflight).
    pub kind_mix: [f64; 3],
}

/// Diurnal profile with a morning peak at 08:00–10:00 and an evening peak.
pub const DEFAULT_HOURLY_RATE: [f64; 24] = [
    3.0, 2.0, 1.5, 1.5, 2.0, 5.0, 10.0, 18.0, 30.0, 32.0, 22.0, 16.0, //
    15.0, 16.0, 18.0, 20.0, 24.0, 28.0, 30.0, 24.0, 16.0, 10.0, 6.0, 4.0,
];

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 7,
            duration_s: 86_400.0,
            hourly_rate: DEFAULT_HOURLY_RATE.to_vec(),
            msg_period_s: 4.0,
            drop_prob: 0.1,
            kind_mix: [0.55, 0.3, 0.15],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::config("simulation duration must be positive"));
        }
        if self.hourly_rate.len() != 24 {
            return Err(Error::config(format!(
                "hourly_rate needs 24 entries, got {}",
                self.hourly_rate.len()
            )));
        }
        if self.hourly_rate.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("hourly rates must be finite and nonnegative"));
        }
        if !(self.msg_period_s.is_finite() && self.msg_period_s > 0.0) {
            return Err(Error::config("msg_period_s must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::config("drop_prob must lie in [0, 1)"));
        }
        let mix_sum: f64 = self.kind_mix.iter().sum();
        if self.kind_mix.iter().any(|p| !(*p >= 0.0)) || (mix_sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("kind_mix must be probabilities summing to 1"));
        }
        Ok(())
    }
}

/// Kinematic state of one aircraft in the local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AircraftState {
    pub pos: EnuPoint,
    /// Degrees clockwise from north.
    pub heading: f64,
    /// km/h.
    pub v_gs: f64,
    /// m/s.
    pub v_vs: f64,
}

fn bearing_deg(from: &EnuPoint, to: &EnuPoint) -> f64 {
    (to.x - from.x).atan2(to.y - from.y).to_degrees().rem_euclid(360.0)
}

/// Signed smallest rotation from `from` to `to`, in (-180, 180].
fn heading_delta(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

fn wrap_heading(h: f64) -> f64 {
    let w = h.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Advance by `dt` seconds along the current heading and climb/descend at
/// the current vertical speed, then turn towards `target` at no more than
/// [`MAX_TURN_RATE_DEG_S`]. A target dead astern is turned to the right.
pub fn kinematic_step(state: &AircraftState, target: &EnuPoint, dt: f64) -> AircraftState {
    let h = state.heading.to_radians();
    let dist = state.v_gs / 3600.0 * dt;
    let pos = EnuPoint::new(
        state.pos.x + dist * h.sin(),
        state.pos.y + dist * h.cos(),
        state.pos.z + state.v_vs * dt / 1000.0,
    );
    let want = bearing_deg(&pos, target);
    let max_turn = MAX_TURN_RATE_DEG_S * dt;
    let turn = heading_delta(state.heading, want).clamp(-max_turn, max_turn);
    AircraftState { pos, heading: wrap_heading(state.heading + turn), ..*state }
}

/// Ground speed while taxiing, km/h.
pub const TAXI_SPEED: f64 = 20.0;
/// Range of the taxi time from the apron to the runway, seconds.
pub const TAXI_TIME_S: (f64, f64) = (900.0, 1500.0);

/// Route geometry derived from the airspace.
struct RouteFrame {
    center: EnuPoint,
    spawn_radius: f64,
    ap_radius: f64,
    ar_radius: f64,
    ap_top: f64,
    ap_bottom: f64,
    ar_band: (f64, f64),
}

impl RouteFrame {
    fn new(airspace: &AirspaceConfig) -> Self {
        let center = airspace.ap.center();
        let max_r = |poly: &[[f64; 2]]| {
            poly.iter().map(|v| (v[0] - center.x).hypot(v[1] - center.y)).fold(0.0, f64::max)
        };
        let ar_radius = max_r(airspace.ar.footprint());
        RouteFrame {
            center,
            // Just inside the scope so new flights are observed at once.
            spawn_radius: ar_radius + (airspace.buffer_km - 5.0).max(1.0),
            ap_radius: max_r(airspace.ap.footprint()),
            ar_radius,
            ap_top: airspace.ap.alt_band().1,
            ap_bottom: airspace.ap.alt_band().0,
            ar_band: airspace.ar.alt_band(),
        }
    }

    fn at(&self, bearing_deg: f64, radius: f64, z: f64) -> EnuPoint {
        let b = bearing_deg.to_radians();
        EnuPoint::new(self.center.x + radius * b.sin(), self.center.y + radius * b.cos(), z)
    }

    fn ar_level(&self, frac: f64) -> f64 {
        self.ar_band.0 + frac * (self.ar_band.1 - self.ar_band.0)
    }

    fn cruise_level(&self) -> f64 {
        self.ar_band.1 + 3.0
    }
}

fn draw_plan(frame: &RouteFrame, spawn_t: f64, kind: FlightKind, rng: &mut ChaCha8Rng) -> FlightPlan {
    let bearing: f64 = rng.random_range(0.0..360.0);
    let jitter = |rng: &mut ChaCha8Rng, v: f64| v * rng.random_range(0.95..1.05);
    let (entry, waypoints, speeds) = match kind {
        FlightKind::Arrival => {
            let dogleg = bearing + rng.random_range(-15.0..15.0);
            let s = jitter(rng, 360.0);
            (
                frame.at(bearing, frame.spawn_radius, frame.cruise_level()),
                vec![
                    frame.at(dogleg, 0.8 * frame.ar_radius, frame.ar_level(0.65)),
                    frame.at(dogleg, 0.75 * frame.ap_radius, frame.ap_bottom + 0.66 * (frame.ap_top - frame.ap_bottom)),
                    EnuPoint::new(frame.center.x, frame.center.y, frame.ap_bottom + 0.1),
                ],
                vec![s, jitter(rng, 320.0), jitter(rng, 260.0)],
            )
        }
        FlightKind::Departure => {
            // Taxi on the ground from an apron stand to the runway first.
            let taxi_s = rng.random_range(TAXI_TIME_S.0..TAXI_TIME_S.1);
            let stand = bearing + 180.0 + rng.random_range(-60.0..60.0);
            (
                frame.at(stand, TAXI_SPEED * taxi_s / 3600.0, 0.0),
                vec![
                    EnuPoint::new(frame.center.x, frame.center.y, 0.0),
                    frame.at(bearing, 0.75 * frame.ap_radius, frame.ap_bottom + 0.8 * (frame.ap_top - frame.ap_bottom)),
                    frame.at(bearing, 0.8 * frame.ar_radius, frame.ar_level(0.7)),
                    frame.at(bearing, frame.spawn_radius, frame.cruise_level()),
                ],
                vec![TAXI_SPEED, jitter(rng, 260.0), jitter(rng, 360.0), jitter(rng, 440.0)],
            )
        }
        FlightKind::Overflight => {
            let exit = bearing + 180.0 + rng.random_range(-40.0..40.0);
            let z = frame.cruise_level() + rng.random_range(0.5..2.5);
            let s = rng.random_range(550.0..800.0);
            let entry = frame.at(bearing, frame.spawn_radius, z);
            let exit = frame.at(exit, frame.spawn_radius, z);
            let mid = EnuPoint::new(0.5 * (entry.x + exit.x), 0.5 * (entry.y + exit.y), z);
            (entry, vec![mid, exit], vec![s, s])
        }
    };
    FlightPlan {
        spawn_t,
        entry,
        waypoints,
        cruise_speed: speeds.iter().copied().fold(0.0, f64::max),
        segment_speeds: speeds,
        descent_rate: 15.0,
        kind,
    }
}

/// Spawn times of the hour-by-hour Poisson process, ascending.
pub fn spawn_times(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let hours = (cfg.duration_s / 3600.0).ceil() as usize;
    let mut times = Vec::new();
    for h in 0..hours {
        let start = h as f64 * 3600.0;
        let end = ((h + 1) as f64 * 3600.0).min(cfg.duration_s);
        let mean = cfg.hourly_rate[h % 24] * (end - start) / 3600.0;
        if mean <= 0.0 {
            continue;
        }
        let n = Poisson::new(mean).expect("positive Poisson mean").sample(rng) as usize;
        let mut batch: Vec<f64> = (0..n).map(|_| rng.random_range(start..end)).collect();
        batch.sort_by(f64::total_cmp);
        times.extend(batch);
    }
    times
}

/// Draw every flight plan for a run.
pub fn plan_flights(cfg: &SimConfig, airspace: &AirspaceConfig) -> Result<Vec<FlightPlan>> {
    cfg.validate()?;
    airspace.validate()?;
    let frame = RouteFrame::new(airspace);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let times = spawn_times(cfg, &mut rng);
    let plans = times
        .into_iter()
        .map(|t| {
            let u: f64 = rng.random();
            let kind = if u < cfg.kind_mix[0] {
                FlightKind::Arrival
            } else if u < cfg.kind_mix[0] + cfg.kind_mix[1] {
                FlightKind::Departure
            } else {
                FlightKind::Overflight
            };
            draw_plan(&frame, t, kind, &mut rng)
        })
        .collect();
    Ok(plans)
}

/// A sampled point of a flown track, with the dial settings active there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub t: f64,
    pub state: AircraftState,
    pub v_dial: f64,
    pub h_dial: f64,
}

fn vertical_speed(state: &AircraftState, target: &EnuPoint, limit: f64) -> f64 {
    let d = state.pos.horizontal_distance(target);
    let secs = d / state.v_gs.max(1.0) * 3600.0;
    if secs < 1.0 {
        return 0.0;
    }
    ((target.z - state.pos.z) * 1000.0 / secs).clamp(-limit, limit)
}

/// Fly `plan`, sampling every `period` seconds until the last waypoint is
/// reached or `until` is passed.
pub fn fly(plan: &FlightPlan, period: f64, until: f64) -> Vec<TrackPoint> {
    let mut leg = 0;
    let mut state = AircraftState {
        pos: plan.entry,
        heading: bearing_deg(&plan.entry, &plan.waypoints[0]),
        v_gs: plan.segment_speeds[0],
        v_vs: 0.0,
    };
    let mut track = Vec::new();
    let mut k = 0u64;
    loop {
        let t = plan.spawn_t + k as f64 * period;
        if t > until || t - plan.spawn_t > MAX_FLIGHT_S {
            break;
        }
        let target = plan.waypoints[leg];
        state.v_gs = plan.segment_speeds[leg];
        state.v_vs = vertical_speed(&state, &target, plan.descent_rate);
        track.push(TrackPoint { t, state, v_dial: state.v_gs, h_dial: target.z * 1000.0 });

        // Capture when the waypoint is reachable within the next step, or
        // when it has been passed inside the turning circle.
        let step_km = state.v_gs / 3600.0 * period;
        let turn_diameter = 2.0 * (state.v_gs / 3600.0) / MAX_TURN_RATE_DEG_S.to_radians();
        let d = state.pos.horizontal_distance(&target);
        let astern = heading_delta(state.heading, bearing_deg(&state.pos, &target)).abs() > 90.0;
        if d <= step_km || (astern && d < turn_diameter) {
            leg += 1;
            if leg == plan.waypoints.len() {
                break;
            }
            state.v_gs = plan.segment_speeds[leg];
            state.v_vs = vertical_speed(&state, &plan.waypoints[leg], plan.descent_rate);
        }
        state = kinematic_step(&state, &plan.waypoints[leg], period);
        k += 1;
    }
    track
}

fn flight_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Turn a flown track into messages, dropping each with `drop_prob`.
pub fn emit_messages(
    track: &[TrackPoint],
    aircraft_id: &str,
    airspace: &AirspaceConfig,
    drop_prob: f64,
    rng: &mut impl Rng,
) -> Vec<AdsbMessage> {
    track
        .iter()
        .filter(|_| !(drop_prob > 0.0 && rng.random::<f64>() < drop_prob))
        .map(|p| AdsbMessage {
            aircraft_id: aircraft_id.to_string(),
            t: p.t,
            pos: airspace.from_enu(&p.state.pos),
            v_gs: p.state.v_gs,
            v_vs: p.state.v_vs,
            heading: p.state.heading,
            v_dial: p.v_dial,
            h_dial: p.h_dial,
        })
        .collect()
}

/// Full message stream for a run, sorted by timestamp (ties by flight
/// index). Deterministic in `cfg.seed`.
pub fn generate_traffic(cfg: &SimConfig, airspace: &AirspaceConfig) -> Result<Vec<AdsbMessage>> {
    let plans = plan_flights(cfg, airspace)?;
    let mut messages = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let track = fly(plan, cfg.msg_period_s, cfg.duration_s);
        let mut rng = flight_rng(cfg.seed, i);
        let id = format!("SIM{i:06}");
        messages.extend(emit_messages(&track, &id, airspace, cfg.drop_prob, &mut rng));
    }
    messages.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(messages)
}
