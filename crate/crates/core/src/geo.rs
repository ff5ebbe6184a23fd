//! WGS84 transverse Mercator (UTM) projection and region polygons.
//!
//! Projected coordinates are in km. The forward and inverse maps use the
//! sixth-order Krüger series, accurate to well below a millimetre inside
//! a zone and still sub-metre tens of degrees off the central meridian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const K0: f64 = 0.9996;
const FALSE_EASTING_M: f64 = 500_000.0;
const FALSE_NORTHING_SOUTH_M: f64 = 10_000_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat.is_finite() && self.lon.is_finite()) {
            return Err(Error::invalid(format!("non-finite coordinate ({}, {})", self.lat, self.lon)));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!("coordinate out of range ({}, {})", self.lat, self.lon)));
        }
        Ok(())
    }
}

/// Planar projected coordinates in km.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct XY {
    pub x: f64,
    pub y: f64,
}

impl XY {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &XY) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtmZone {
    pub number: u8,
    pub north: bool,
}

impl UtmZone {
    pub const CA: UtmZone = UtmZone { number: 11, north: true };

    pub fn central_meridian(&self) -> f64 {
        -183.0 + 6.0 * self.number as f64
    }

    /// Parses identifiers like `11S`, `10N` or `33`. Band letters N..X are
    /// northern; C..M southern.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let digits: String = s.chars().take_while(|c| c.is_ascii_digit()).collect();
        let rest = s[digits.len()..].trim().to_ascii_uppercase();
        let number: u8 = digits
            .parse()
            .map_err(|_| Error::invalid(format!("bad UTM zone '{s}'")))?;
        if !(1..=60).contains(&number) {
            return Err(Error::invalid(format!("UTM zone number {number} outside 1..=60")));
        }
        let north = match rest.as_str() {
            "" => true,
            r if r.len() == 1 => {
                let c = r.chars().next().unwrap();
                if !('C'..='X').contains(&c) || c == 'I' || c == 'O' {
                    return Err(Error::invalid(format!("bad UTM band letter '{c}'")));
                }
                c >= 'N'
            }
            _ => return Err(Error::invalid(format!("bad UTM zone '{s}'"))),
        };
        Ok(Self { number, north })
    }
}

impl Default for UtmZone {
    fn default() -> Self {
        Self::CA
    }
}

struct Kruger {
    a_rect: f64,
    e: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

fn kruger() -> Kruger {
    let n = WGS84_F / (2.0 - WGS84_F);
    let (n2, n3) = (n * n, n * n * n);
    let (n4, n5, n6) = (n2 * n2, n2 * n3, n3 * n3);
    let a_rect = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
    let alpha = [
        n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
            + 7891.0 * n6 / 37800.0,
        13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
            - 1_983_433.0 * n6 / 1_935_360.0,
        61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0 + 167_603.0 * n6 / 181_440.0,
        49561.0 * n4 / 161_280.0 - 179.0 * n5 / 168.0 + 6_601_661.0 * n6 / 7_257_600.0,
        34729.0 * n5 / 80640.0 - 3_418_889.0 * n6 / 1_995_840.0,
        212_378_941.0 * n6 / 319_334_400.0,
    ];
    let beta = [
        n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0
            + 96199.0 * n6 / 604_800.0,
        n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0
            - 1_118_711.0 * n6 / 3_870_720.0,
        17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
        4397.0 * n4 / 161_280.0 - 11.0 * n5 / 504.0 - 830_251.0 * n6 / 7_257_600.0,
        4583.0 * n5 / 161_280.0 - 108_847.0 * n6 / 3_991_680.0,
        20_648_693.0 * n6 / 638_668_800.0,
    ];
    Kruger { a_rect, e: 2.0 * n.sqrt() / (1.0 + n), alpha, beta }
}

/// Projects a geographic point into the given zone; output in km.
pub fn project_to_utm(p: GeoPoint, zone: UtmZone) -> Result<XY> {
    p.validate()?;
    if p.lat.abs() > 84.0 {
        return Err(Error::OutsideUtm(p.lat));
    }
    let k = kruger();
    let phi = p.lat.to_radians();
    let lam = (p.lon - zone.central_meridian()).to_radians();
    let t = (phi.sin().atanh() - k.e * (k.e * phi.sin()).atanh()).sinh();
    let xi_p = t.atan2(lam.cos());
    let eta_p = (lam.sin() / (1.0 + t * t).sqrt()).atanh();
    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, a) in k.alpha.iter().enumerate() {
        let m = 2.0 * (j + 1) as f64;
        xi += a * (m * xi_p).sin() * (m * eta_p).cosh();
        eta += a * (m * xi_p).cos() * (m * eta_p).sinh();
    }
    let easting = FALSE_EASTING_M + K0 * k.a_rect * eta;
    let mut northing = K0 * k.a_rect * xi;
    if !zone.north {
        northing += FALSE_NORTHING_SOUTH_M;
    }
    Ok(XY::new(easting / 1000.0, northing / 1000.0))
}

/// Inverse of [`project_to_utm`].
pub fn unproject_from_utm(p: XY, zone: UtmZone) -> Result<GeoPoint> {
    if !p.is_finite() {
        return Err(Error::invalid("non-finite projected coordinate"));
    }
    let k = kruger();
    let mut northing = p.y * 1000.0;
    if !zone.north {
        northing -= FALSE_NORTHING_SOUTH_M;
    }
    let xi = northing / (K0 * k.a_rect);
    let eta = (p.x * 1000.0 - FALSE_EASTING_M) / (K0 * k.a_rect);
    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, b) in k.beta.iter().enumerate() {
        let m = 2.0 * (j + 1) as f64;
        xi_p -= b * (m * xi).sin() * (m * eta).cosh();
        eta_p -= b * (m * xi).cos() * (m * eta).sinh();
    }
    let tau_p = xi_p.sin() / (eta_p.sinh().powi(2) + xi_p.cos().powi(2)).sqrt();
    let lam = eta_p.sinh().atan2(xi_p.cos());
    // Newton iteration for tan(phi) from the conformal latitude.
    let e2 = k.e * k.e;
    let mut tau = tau_p;
    for _ in 0..8 {
        let sigma = (k.e * (k.e * tau / (1.0 + tau * tau).sqrt()).atanh()).sinh();
        let tau_i = tau * (1.0 + sigma * sigma).sqrt() - sigma * (1.0 + tau * tau).sqrt();
        let d = (tau_p - tau_i) / (1.0 + tau_i * tau_i).sqrt()
            * (1.0 + (1.0 - e2) * tau * tau)
            / ((1.0 - e2) * (1.0 + tau * tau).sqrt());
        tau += d;
        if d.abs() < 1e-14 {
            break;
        }
    }
    let lat = tau.atan().to_degrees();
    let lon = zone.central_meridian() + lam.to_degrees();
    if lat.abs() > 84.0 {
        return Err(Error::OutsideUtm(lat));
    }
    Ok(GeoPoint::new(lat, lon))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    North,
    South,
}

impl Region {
    pub fn label(&self) -> &'static str {
        match self {
            Region::North => "north",
            Region::South => "south",
        }
    }

    pub fn from_label(s: &str) -> Option<Region> {
        match s.trim().to_ascii_lowercase().as_str() {
            "north" => Some(Region::North),
            "south" => Some(Region::South),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPolygon {
    pub label: String,
    pub vertices: Vec<GeoPoint>,
}

#[derive(Serialize, Deserialize)]
struct PolygonJson {
    label: String,
    vertices: Vec<[f64; 2]>,
}

impl RegionPolygon {
    pub fn new(label: impl Into<String>, vertices: Vec<GeoPoint>) -> Result<Self> {
        let poly = Self { label: label.into(), vertices };
        poly.validate()?;
        Ok(poly)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(Error::invalid(format!("polygon '{}' has fewer than 3 vertices", self.label)));
        }
        for v in &self.vertices {
            v.validate()?;
        }
        Ok(())
    }

    /// Even-odd containment in the lat/lon plane; points on an edge count as inside.
    pub fn contains(&self, p: GeoPoint) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if on_segment(p, a, b) {
                return true;
            }
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let lon_at = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
                if p.lon < lon_at {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn centroid(&self) -> GeoPoint {
        let n = self.vertices.len() as f64;
        let lat = self.vertices.iter().map(|v| v.lat).sum::<f64>() / n;
        let lon = self.vertices.iter().map(|v| v.lon).sum::<f64>() / n;
        GeoPoint::new(lat, lon)
    }
}

fn on_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> bool {
    let cross = (b.lon - a.lon) * (p.lat - a.lat) - (b.lat - a.lat) * (p.lon - a.lon);
    let scale = (b.lon - a.lon).abs() + (b.lat - a.lat).abs();
    if cross.abs() > 1e-12 * scale.max(1.0) {
        return false;
    }
    p.lat >= a.lat.min(b.lat) - 1e-12
        && p.lat <= a.lat.max(b.lat) + 1e-12
        && p.lon >= a.lon.min(b.lon) - 1e-12
        && p.lon <= a.lon.max(b.lon) + 1e-12
}

/// Label of the first polygon containing `p`.
pub fn classify_region<'a>(p: GeoPoint, polys: &'a [RegionPolygon]) -> Option<&'a str> {
    polys.iter().find(|poly| poly.contains(p)).map(|poly| poly.label.as_str())
}

/// Northern and southern California polygons used for the regional small-magnitude constant.
pub fn california_regions() -> Vec<RegionPolygon> {
    let north = [
        (34.5175, -121.5250),
        (39.8384, -125.2341),
        (41.3595, -124.1684),
        (41.3995, -120.7227),
        (37.9775, -116.6225),
    ];
    let south = [
        (37.9775, -116.6225),
        (35.2944, -113.4142),
        (31.4772, -115.0250),
        (31.0082, -117.6898),
        (34.5175, -121.5250),
    ];
    let mk = |label: &str, v: &[(f64, f64)]| RegionPolygon {
        label: label.to_string(),
        vertices: v.iter().map(|&(lat, lon)| GeoPoint::new(lat, lon)).collect(),
    };
    vec![mk("north", &north), mk("south", &south)]
}

pub fn polygons_from_json(text: &str) -> Result<Vec<RegionPolygon>> {
    let raw: Vec<PolygonJson> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|p| {
            RegionPolygon::new(
                p.label,
                p.vertices.iter().map(|v| GeoPoint::new(v[0], v[1])).collect(),
            )
        })
        .collect()
}

pub fn polygons_to_json(polys: &[RegionPolygon]) -> Result<String> {
    let raw: Vec<PolygonJson> = polys
        .iter()
        .map(|p| PolygonJson {
            label: p.label.clone(),
            vertices: p.vertices.iter().map(|v| [v.lat, v.lon]).collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_meridian_on_equator() {
        let p = project_to_utm(GeoPoint::new(0.0, -117.0), UtmZone::CA).unwrap();
        assert!((p.x - 500.0).abs() < 1e-9);
        assert!(p.y.abs() < 1e-9);
    }

    #[test]
    fn zone_parsing() {
        assert_eq!(UtmZone::parse("11S").unwrap(), UtmZone { number: 11, north: true });
        assert_eq!(UtmZone::parse("33H").unwrap(), UtmZone { number: 33, north: false });
        assert!(UtmZone::parse("61N").is_err());
        assert!(UtmZone::parse("abc").is_err());
    }

    #[test]
    fn polar_latitude_rejected() {
        assert!(matches!(
            project_to_utm(GeoPoint::new(85.0, -117.0), UtmZone::CA),
            Err(Error::OutsideUtm(_))
        ));
    }

    #[test]
    fn polygons_round_trip_through_json() {
        let polys = california_regions();
        let text = polygons_to_json(&polys).unwrap();
        assert_eq!(polygons_from_json(&text).unwrap(), polys);
    }
}
