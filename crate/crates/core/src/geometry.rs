//! Airspace geometry: local tangent-plane projection, AP/AR prisms and the
//! scope region around them.
//!
//! Regions are vertical prisms: a convex counter-clockwise footprint polygon
//! extruded over an altitude band. All distances are kilometres in the local
//! east-north-up frame.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Kilometres per degree of latitude.
pub const KM_PER_DEG_LAT: f64 = 110.574;
/// Kilometres per degree of longitude at the equator.
pub const KM_PER_DEG_LON: f64 = 111.320;
/// Denominator guard for the approach factor.
pub const APPROACH_EPS: f64 = 1e-8;

const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    /// Degrees.
    pub lat: f64,
    /// Degrees.
    pub lon: f64,
    /// Metres above mean sea level.
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Self {
        Self { lat, lon, alt }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && self.alt.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
            && self.alt >= -500.0
    }
}

/// Local east/north/up coordinates in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EnuPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn horizontal_distance(&self, other: &EnuPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Equirectangular projection about `origin`.
pub fn to_enu(p: &GeoPoint, origin: &GeoPoint) -> EnuPoint {
    let cos_lat0 = origin.lat.to_radians().cos();
    EnuPoint {
        x: (p.lon - origin.lon) * KM_PER_DEG_LON * cos_lat0,
        y: (p.lat - origin.lat) * KM_PER_DEG_LAT,
        z: p.alt / 1000.0,
    }
}

/// Inverse of [`to_enu`].
pub fn from_enu(p: &EnuPoint, origin: &GeoPoint) -> GeoPoint {
    let cos_lat0 = origin.lat.to_radians().cos();
    GeoPoint {
        lat: origin.lat + p.y / KM_PER_DEG_LAT,
        lon: origin.lon + p.x / (KM_PER_DEG_LON * cos_lat0),
        alt: p.z * 1000.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionId {
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "AR")]
    Ar,
}

/// Serialized form of a [`Region`]; validated on conversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSpec {
    pub id: RegionId,
    /// Footprint vertices `[x_km, y_km]`, counter-clockwise.
    pub footprint_km: Vec<[f64; 2]>,
    pub z_min_km: f64,
    pub z_max_km: f64,
    pub center_km: [f64; 3],
}

/// Convex vertical prism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionSpec", into = "RegionSpec")]
pub struct Region {
    id: RegionId,
    footprint: Vec<[f64; 2]>,
    z_min: f64,
    z_max: f64,
    center: EnuPoint,
}

impl TryFrom<RegionSpec> for Region {
    type Error = Error;

    fn try_from(spec: RegionSpec) -> Result<Self> {
        let [cx, cy, cz] = spec.center_km;
        Region::new(
            spec.id,
            spec.footprint_km,
            (spec.z_min_km, spec.z_max_km),
            EnuPoint::new(cx, cy, cz),
        )
    }
}

impl From<Region> for RegionSpec {
    fn from(r: Region) -> Self {
        RegionSpec {
            id: r.id,
            footprint_km: r.footprint,
            z_min_km: r.z_min,
            z_max_km: r.z_max,
            center_km: [r.center.x, r.center.y, r.center.z],
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - (a[0] + t * dx)).hypot(p[1] - (a[1] + t * dy))
}

impl Region {
    pub fn new(
        id: RegionId,
        footprint: Vec<[f64; 2]>,
        alt_band: (f64, f64),
        center: EnuPoint,
    ) -> Result<Self> {
        let n = footprint.len();
        if n < 3 {
            return Err(Error::config(format!("region {id:?}: footprint needs at least 3 vertices")));
        }
        if footprint.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::config(format!("region {id:?}: non-finite vertex")));
        }
        let (z_min, z_max) = alt_band;
        if !(z_min.is_finite() && z_max.is_finite() && z_min < z_max) {
            return Err(Error::config(format!("region {id:?}: altitude band must satisfy z_min < z_max")));
        }
        let mut area2 = 0.0;
        for i in 0..n {
            let (a, b, c) = (footprint[i], footprint[(i + 1) % n], footprint[(i + 2) % n]);
            if cross(a, b, c) < -EDGE_TOL {
                return Err(Error::config(format!(
                    "region {id:?}: footprint must be convex and counter-clockwise"
                )));
            }
            area2 += a[0] * b[1] - b[0] * a[1];
        }
        if area2 <= 0.0 {
            return Err(Error::config(format!("region {id:?}: footprint has no positive area")));
        }
        let region = Region { id, footprint, z_min, z_max, center };
        if !region.contains(&center) {
            return Err(Error::config(format!("region {id:?}: center lies outside the region")));
        }
        Ok(region)
    }

    /// Regular `sides`-gon of circumradius `radius_km` centred on `(cx, cy)`,
    /// with the region centre at mid-band.
    pub fn regular(
        id: RegionId,
        sides: usize,
        radius_km: f64,
        (cx, cy): (f64, f64),
        alt_band: (f64, f64),
    ) -> Result<Self> {
        let footprint = (0..sides)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / sides as f64;
                [cx + radius_km * a.cos(), cy + radius_km * a.sin()]
            })
            .collect();
        let center = EnuPoint::new(cx, cy, 0.5 * (alt_band.0 + alt_band.1));
        Region::new(id, footprint, alt_band, center)
    }

    pub fn id(&self) -> RegionId {
        self.id
    }

    pub fn footprint(&self) -> &[[f64; 2]] {
        &self.footprint
    }

    pub fn alt_band(&self) -> (f64, f64) {
        (self.z_min, self.z_max)
    }

    pub fn center(&self) -> EnuPoint {
        self.center
    }

    fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.footprint.len();
        (0..n).map(move |i| (self.footprint[i], self.footprint[(i + 1) % n]))
    }

    /// Half-plane test of the footprint; points on an edge are inside.
    pub fn contains_horizontal(&self, x: f64, y: f64) -> bool {
        self.edges().all(|(a, b)| {
            let scale = (b[0] - a[0]).hypot(b[1] - a[1]).max(1.0);
            cross(a, b, [x, y]) >= -EDGE_TOL * scale
        })
    }

    pub fn contains(&self, p: &EnuPoint) -> bool {
        p.z >= self.z_min && p.z <= self.z_max && self.contains_horizontal(p.x, p.y)
    }

    /// Unsigned distance from `p` to the prism surface (walls and caps).
    pub fn boundary_distance(&self, p: &EnuPoint) -> f64 {
        let xy = [p.x, p.y];
        let wall = self
            .edges()
            .map(|(a, b)| segment_distance(xy, a, b))
            .fold(f64::INFINITY, f64::min);
        let inside_xy = self.contains_horizontal(p.x, p.y);
        let in_band = p.z >= self.z_min && p.z <= self.z_max;
        if inside_xy && in_band {
            wall.min(p.z - self.z_min).min(self.z_max - p.z)
        } else {
            let dxy = if inside_xy { 0.0 } else { wall };
            let dz = if p.z < self.z_min {
                self.z_min - p.z
            } else if p.z > self.z_max {
                p.z - self.z_max
            } else {
                0.0
            };
            dxy.hypot(dz)
        }
    }
}

/// Cosine between the horizontal velocity and the displacement to the
/// region centre. Positive means converging.
pub fn approach_factor(p: &EnuPoint, v: [f64; 2], r: &Region) -> f64 {
    let c = r.center();
    let rc = [c.x - p.x, c.y - p.y];
    let dot = v[0] * rc[0] + v[1] * rc[1];
    let norms = v[0].hypot(v[1]) * rc[0].hypot(rc[1]);
    dot / (norms + APPROACH_EPS)
}

/// The two controlled regions plus the uncontrolled buffer around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AirspaceConfig {
    pub origin: GeoPoint,
    pub ap: Region,
    pub ar: Region,
    pub buffer_km: f64,
}

impl Default for AirspaceConfig {
    fn default() -> Self {
        AirspaceConfig::terminal_default()
    }
}

impl AirspaceConfig {
    pub fn new(origin: GeoPoint, ap: Region, ar: Region, buffer_km: f64) -> Result<Self> {
        let cfg = AirspaceConfig { origin, ap, ar, buffer_km };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.origin.is_valid() {
            return Err(Error::config("airspace origin is not a valid geographic point"));
        }
        if !(self.buffer_km.is_finite() && self.buffer_km > 0.0) {
            return Err(Error::config("buffer_km must be positive"));
        }
        if self.ap.id() != RegionId::Ap || self.ar.id() != RegionId::Ar {
            return Err(Error::config("airspace regions must be tagged AP and AR"));
        }
        Ok(())
    }

    pub fn region(&self, id: RegionId) -> &Region {
        match id {
            RegionId::Ap => &self.ap,
            RegionId::Ar => &self.ar,
        }
    }

    pub fn to_enu(&self, p: &GeoPoint) -> EnuPoint {
        to_enu(p, &self.origin)
    }

    pub fn from_enu(&self, p: &EnuPoint) -> GeoPoint {
        from_enu(p, &self.origin)
    }

    /// Membership in the controlled regions or within `buffer_km` of them.
    pub fn in_scope(&self, p: &EnuPoint) -> bool {
        self.ap.contains(p)
            || self.ar.contains(p)
            || self.ap.boundary_distance(p).min(self.ar.boundary_distance(p)) <= self.buffer_km
    }

    /// Default terminal area: octagonal AP (r = 16 km, 0.1–1.5 km) nested
    /// under an octagonal AR (r = 55 km, 1.5–6 km), 100 km buffer.
    pub fn terminal_default() -> Self {
        let ap = Region::regular(RegionId::Ap, 8, 16.0, (0.0, 0.0), (0.1, 1.5))
            .expect("default AP region is valid");
        let ar = Region::regular(RegionId::Ar, 8, 55.0, (0.0, 0.0), (1.5, 6.0))
            .expect("default AR region is valid");
        AirspaceConfig { origin: GeoPoint::new(36.36, 120.09, 0.0), ap, ar, buffer_km: 100.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(lo: f64, hi: f64, band: (f64, f64)) -> Region {
        let c = 0.5 * (lo + hi);
        Region::new(
            RegionId::Ar,
            vec![[lo, lo], [hi, lo], [hi, hi], [lo, hi]],
            band,
            EnuPoint::new(c, c, 0.5 * (band.0 + band.1)),
        )
        .unwrap()
    }

    // Ray casting, independent of the half-plane test.
    fn ray_cast_inside(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
        let n = poly.len();
        for i in 0..n {
            if segment_distance([x, y], poly[i], poly[(i + 1) % n]) < 1e-12 {
                return true;
            }
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = (poly[i][0], poly[i][1]);
            let (xj, yj) = (poly[j][0], poly[j][1]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn ternary(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            if f(m1) < f(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        f(0.5 * (a + b))
    }

    /// Minimum distance over the prism faces, each minimised by nested
    /// ternary search (distance to a convex face is convex).
    fn sampled_surface_distance(r: &Region, p: &EnuPoint) -> f64 {
        let poly = r.footprint();
        let (z0, z1) = r.alt_band();
        let n = poly.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let d = ternary(0.0, 1.0, |s| {
                let (x, y) = (a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]));
                ternary(z0, z1, |z| ((x - p.x).powi(2) + (y - p.y).powi(2) + (z - p.z).powi(2)).sqrt())
            });
            best = best.min(d);
        }
        let xmin = poly.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
        let xmax = poly.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
        let y_range = |x: f64| {
            let mut ys = vec![];
            for i in 0..n {
                let (a, b) = (poly[i], poly[(i + 1) % n]);
                if (a[0] - x) * (b[0] - x) <= 0.0 && a[0] != b[0] {
                    ys.push(a[1] + (x - a[0]) / (b[0] - a[0]) * (b[1] - a[1]));
                }
            }
            let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        };
        for zc in [z0, z1] {
            let d = ternary(xmin, xmax, |x| {
                let (lo, hi) = y_range(x);
                if !(lo <= hi) {
                    return f64::INFINITY;
                }
                ternary(lo, hi, |y| ((x - p.x).powi(2) + (y - p.y).powi(2) + (zc - p.z).powi(2)).sqrt())
            });
            best = best.min(d);
        }
        best
    }

    fn random_convex(angles: &[f64], radius: f64, c: (f64, f64)) -> Vec<[f64; 2]> {
        let mut a: Vec<f64> = angles.to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        a.dedup_by(|x, y| (*x - *y).abs() < 0.05);
        a.iter().map(|t| [c.0 + radius * t.cos(), c.1 + radius * t.sin()]).collect()
    }

    #[test]
    fn enu_identity_and_scales() {
        let o = GeoPoint::new(36.0, 120.0, 0.0);
        let p = to_enu(&GeoPoint::new(36.0, 120.0, 1234.0), &o);
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 1.234));
        let p = to_enu(&GeoPoint::new(37.0, 120.0, 0.0), &o);
        assert!((p.y - 110.574).abs() < 1e-9 && p.x == 0.0);
        // 111.320 * cos(60°) = 55.660
        let o60 = GeoPoint::new(60.0, 10.0, 0.0);
        let p = to_enu(&GeoPoint::new(60.0, 11.0, 0.0), &o60);
        assert!((p.x - 55.660).abs() < 1e-9);
    }

    #[test]
    fn region_rejects_bad_shapes() {
        let c = EnuPoint::new(0.5, 0.5, 1.0);
        assert!(Region::new(RegionId::Ap, vec![[0.0, 0.0], [1.0, 0.0]], (0.0, 2.0), c).is_err());
        // clockwise
        let cw = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        assert!(Region::new(RegionId::Ap, cw, (0.0, 2.0), c).is_err());
        let ccw = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(Region::new(RegionId::Ap, ccw.clone(), (2.0, 2.0), c).is_err());
        assert!(Region::new(RegionId::Ap, ccw.clone(), (0.0, 2.0), EnuPoint::new(3.0, 0.5, 1.0)).is_err());
        // non-convex dart
        let dart = vec![[0.0, 0.0], [2.0, 1.0], [0.0, 2.0], [0.5, 1.0]];
        assert!(Region::new(RegionId::Ap, dart, (0.0, 2.0), EnuPoint::new(0.4, 1.0, 1.0)).is_err());
        assert!(Region::new(RegionId::Ap, ccw, (0.0, 2.0), c).is_ok());
    }

    #[test]
    fn contains_cases() {
        let r = square(-10.0, 10.0, (0.0, 5.0));
        assert!(r.contains(&r.center()));
        assert!(!r.contains(&EnuPoint::new(0.0, 0.0, 5.001)));
        let on_edge = EnuPoint::new(10.0, 3.0, 2.5);
        assert!(r.contains(&on_edge));
        assert_eq!(r.contains(&on_edge), ray_cast_inside(r.footprint(), 10.0, 3.0));
    }

    #[test]
    fn boundary_distance_cases() {
        let r = square(-10.0, 10.0, (0.0, 5.0));
        let p = EnuPoint::new(0.0, 0.0, 2.5);
        assert!((r.boundary_distance(&p) - 2.5).abs() < 1e-12);
        assert!((sampled_surface_distance(&r, &p) - 2.5).abs() < 1e-3);
        assert_eq!(r.boundary_distance(&EnuPoint::new(-10.0, 4.0, 1.0)), 0.0);

        let r = square(0.0, 10.0, (0.0, 5.0));
        let p = EnuPoint::new(15.0, 5.0, 2.5);
        assert!((r.boundary_distance(&p) - 5.0).abs() < 1e-12);
        assert!((sampled_surface_distance(&r, &p) - 5.0).abs() < 1e-3);
    }

    #[test]
    fn approach_factor_cases() {
        let r = square(-10.0, 10.0, (0.0, 5.0));
        let p = EnuPoint::new(0.0, -50.0, 1.0);
        assert!((approach_factor(&p, [0.0, 300.0], &r) - 1.0).abs() < 1e-6);
        assert!((approach_factor(&p, [0.0, -300.0], &r) + 1.0).abs() < 1e-6);
        assert_eq!(approach_factor(&p, [300.0, 0.0], &r), 0.0);
        assert_eq!(approach_factor(&r.center(), [0.0, 0.0], &r), 0.0);
    }

    #[test]
    fn scope_cases() {
        let cfg = AirspaceConfig::terminal_default();
        assert!(cfg.in_scope(&cfg.ap.center()));
        // AR octagon has a vertex at (55, 0); due east of it the nearest surface point is that vertex.
        let exact = EnuPoint::new(55.0 + cfg.buffer_km, 0.0, 3.0);
        assert!((cfg.ar.boundary_distance(&exact) - cfg.buffer_km).abs() < 1e-9);
        assert!(cfg.in_scope(&exact));
        let far = EnuPoint::new(55.0 + cfg.buffer_km + 1.0, 0.0, 3.0);
        assert!((cfg.ar.boundary_distance(&far) - (cfg.buffer_km + 1.0)).abs() < 1e-9);
        assert!(!cfg.in_scope(&far));
    }

    #[test]
    fn exact_buffer_distance_is_in_scope() {
        let ap = Region::new(
            RegionId::Ap,
            vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]],
            (0.0, 1.0),
            EnuPoint::new(0.0, 0.0, 0.5),
        )
        .unwrap();
        let ar = square(-10.0, 10.0, (1.0, 5.0));
        let ar = Region::new(RegionId::Ar, ar.footprint().to_vec(), (1.0, 5.0), EnuPoint::new(0.0, 0.0, 3.0)).unwrap();
        let cfg = AirspaceConfig::new(GeoPoint::new(0.0, 0.0, 0.0), ap, ar, 4.0).unwrap();
        assert!(cfg.in_scope(&EnuPoint::new(14.0, 0.0, 3.0)));
        assert!(!cfg.in_scope(&EnuPoint::new(14.0 + 1e-9, 0.0, 3.0)));
    }

    #[test]
    fn config_roundtrips_through_serde() {
        let cfg = AirspaceConfig::terminal_default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: AirspaceConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        let bad = s.replace("\"z_min_km\":1.5", "\"z_min_km\":7.5");
        assert!(serde_json::from_str::<AirspaceConfig>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn interior_distance_matches_surface_oracle(
            angles in prop::collection::vec(0.0..std::f64::consts::TAU, 3..9),
            radius in 5.0..40.0f64,
            fx in -0.7..0.7f64, fy in -0.7..0.7f64, fz in 0.0..1.0f64,
        ) {
            let poly = random_convex(&angles, radius, (0.0, 0.0));
            prop_assume!(poly.len() >= 3);
            let r = match Region::new(RegionId::Ar, poly, (1.0, 6.0), EnuPoint::new(0.0, 0.0, 3.5)) {
                Ok(r) => r,
                Err(_) => return Ok(()),
            };
            let p = EnuPoint::new(fx * radius, fy * radius, 1.0 + 5.0 * fz);
            let d = r.boundary_distance(&p);
            let oracle = sampled_surface_distance(&r, &p);
            prop_assert!((d - oracle).abs() < 1e-3, "impl {} oracle {}", d, oracle);
            prop_assert_eq!(r.contains(&p), ray_cast_inside(r.footprint(), p.x, p.y));
        }

        #[test]
        fn exterior_distance_matches_surface_oracle(
            angles in prop::collection::vec(0.0..std::f64::consts::TAU, 3..9),
            px in -80.0..80.0f64, py in -80.0..80.0f64, pz in -5.0..12.0f64,
        ) {
            let poly = random_convex(&angles, 20.0, (3.0, -2.0));
            prop_assume!(poly.len() >= 3);
            let c = poly.iter().fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
            let c = EnuPoint::new(c[0] / poly.len() as f64, c[1] / poly.len() as f64, 3.5);
            let r = match Region::new(RegionId::Ar, poly, (1.0, 6.0), c) {
                Ok(r) => r,
                Err(_) => return Ok(()),
            };
            let p = EnuPoint::new(px, py, pz);
            let d = r.boundary_distance(&p);
            prop_assert!((d - sampled_surface_distance(&r, &p)).abs() < 1e-3);
            prop_assert_eq!(r.contains_horizontal(px, py), ray_cast_inside(r.footprint(), px, py));
        }

        #[test]
        fn approach_factor_scale_invariant(
            vx in -500.0..500.0f64, vy in -500.0..500.0f64,
            px in -100.0..100.0f64, py in -100.0..100.0f64,
        ) {
            prop_assume!(vx.hypot(vy) > 1.0);
            let r = square(-10.0, 10.0, (0.0, 5.0));
            let p = EnuPoint::new(px, py, 1.0);
            let a = approach_factor(&p, [vx, vy], &r);
            prop_assert!((-1.0..=1.0).contains(&a));
            for k in [0.1, 10.0] {
                prop_assert!((approach_factor(&p, [k * vx, k * vy], &r) - a).abs() < 1e-6);
            }
        }

        #[test]
        fn scope_monotone_in_buffer(
            px in -250.0..250.0f64, py in -250.0..250.0f64, pz in 0.0..15.0f64,
            d1 in 1.0..150.0f64, extra in 0.0..100.0f64,
        ) {
            let mut cfg = AirspaceConfig::terminal_default();
            let p = EnuPoint::new(px, py, pz);
            cfg.buffer_km = d1;
            let small = cfg.in_scope(&p);
            cfg.buffer_km = d1 + extra;
            prop_assert!(!small || cfg.in_scope(&p));
        }

        #[test]
        fn enu_inverse_recovers_lat_lon(
            lat0 in -70.0..70.0f64, lon0 in -170.0..170.0f64,
            dlat in -2.0..2.0f64, dlon in -2.0..2.0f64, alt in 0.0..12000.0f64,
        ) {
            let o = GeoPoint::new(lat0, lon0, 0.0);
            let p = GeoPoint::new(lat0 + dlat, lon0 + dlon, alt);
            let back = from_enu(&to_enu(&p, &o), &o);
            prop_assert!((back.lat - p.lat).abs() < 1e-9);
            prop_assert!((back.lon - p.lon).abs() < 1e-9);
            prop_assert!((back.alt - p.alt).abs() < 1e-6);
        }
    }
}
