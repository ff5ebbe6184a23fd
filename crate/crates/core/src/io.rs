//! Flatfile ingestion: CSV records plus the `c7` sidecar into a [`Dataset`].

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cells::{build_grid, segment_ray, CellGrid, Ray3, SegmentMatrix};
use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::geo::{classify_region, project_to_utm, GeoPoint, Region, RegionPolygon, UtmZone, XY};
use crate::inference::smoothing::interp_ln;

pub const RESIDUAL_PREFIX: &str = "res_f";

const REQUIRED: [&str; 11] = [
    "event_id", "station_id", "mag", "rrup_km", "vs30", "eq_lat", "eq_lon", "sta_lat", "sta_lon", "cls_lat", "cls_lon",
];

/// One flatfile row as read, before projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatRow {
    pub event_id: String,
    pub station_id: String,
    pub mag: f64,
    pub rrup_km: f64,
    pub vs30: f64,
    pub eq: GeoPoint,
    pub sta: GeoPoint,
    pub cls: GeoPoint,
    pub cls_depth_km: Option<f64>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flatfile {
    pub freqs: Vec<f64>,
    pub rows: Vec<FlatRow>,
}

fn freq_label(f: f64) -> String {
    format!("{RESIDUAL_PREFIX}{f}")
}

impl Flatfile {
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let pos = |name: &str| headers.iter().position(|h| h == name);
        let mut idx = BTreeMap::new();
        for name in REQUIRED {
            let p = pos(name).ok_or_else(|| Error::invalid(format!("flatfile lacks required column `{name}`")))?;
            idx.insert(name, p);
        }
        let depth_col = pos("cls_depth_km");
        let mut freq_cols = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            if let Some(rest) = h.strip_prefix(RESIDUAL_PREFIX) {
                let f: f64 = rest
                    .parse()
                    .map_err(|_| Error::invalid(format!("cannot parse frequency from column `{h}`")))?;
                if !(f > 0.0 && f.is_finite()) {
                    return Err(Error::invalid(format!("column `{h}`: frequency must be positive")));
                }
                freq_cols.push((f, i));
            }
        }
        if freq_cols.is_empty() {
            return Err(Error::invalid(format!("flatfile has no `{RESIDUAL_PREFIX}<freq>` columns")));
        }
        freq_cols.sort_by(|a, b| a.0.total_cmp(&b.0));
        if freq_cols.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("duplicate residual frequency columns"));
        }
        let freqs: Vec<f64> = freq_cols.iter().map(|c| c.0).collect();

        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 1;
            let rec = rec?;
            let field = |name: &str| rec.get(idx[name]).unwrap_or("");
            let num = |name: &str| -> Result<f64> {
                let s = field(name);
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::Row { row, msg: format!("`{name}` is not a number: {s:?}") })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Row { row, msg: format!("`{name}` is not finite") })
                }
            };
            let text = |name: &str| -> Result<String> {
                let s = field(name);
                if s.is_empty() {
                    Err(Error::Row { row, msg: format!("`{name}` is empty") })
                } else {
                    Ok(s.to_string())
                }
            };
            let depth = match depth_col.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) {
                Some(s) => Some(
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Row { row, msg: format!("`cls_depth_km` is not a number: {s:?}") })?,
                ),
                None => None,
            };
            let residuals = freq_cols
                .iter()
                .map(|&(_, c)| {
                    let s = rec.get(c).unwrap_or("");
                    if s.is_empty() {
                        return Ok(f64::NAN);
                    }
                    s.parse::<f64>()
                        .map_err(|_| Error::Row { row, msg: format!("residual `{}` is not a number: {s:?}", headers[c].to_string()) })
                })
                .collect::<Result<Vec<f64>>>()?;
            let r = FlatRow {
                event_id: text("event_id")?,
                station_id: text("station_id")?,
                mag: num("mag")?,
                rrup_km: num("rrup_km")?,
                vs30: num("vs30")?,
                eq: GeoPoint::new(num("eq_lat")?, num("eq_lon")?),
                sta: GeoPoint::new(num("sta_lat")?, num("sta_lon")?),
                cls: GeoPoint::new(num("cls_lat")?, num("cls_lon")?),
                cls_depth_km: depth,
                residuals,
            };
            if r.rrup_km <= 0.0 {
                return Err(Error::Row { row, msg: "`rrup_km` must be positive".into() });
            }
            rows.push(r);
        }
        Ok(Self { freqs, rows })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = REQUIRED.iter().map(|s| s.to_string()).collect();
        header.push("cls_depth_km".into());
        header.extend(self.freqs.iter().map(|&f| freq_label(f)));
        wr.write_record(&header)?;
        for r in &self.rows {
            let mut v = vec![
                r.event_id.clone(),
                r.station_id.clone(),
                r.mag.to_string(),
                r.rrup_km.to_string(),
                r.vs30.to_string(),
                r.eq.lat.to_string(),
                r.eq.lon.to_string(),
                r.sta.lat.to_string(),
                r.sta.lon.to_string(),
                r.cls.lat.to_string(),
                r.cls.lon.to_string(),
                r.cls_depth_km.map(|d| d.to_string()).unwrap_or_default(),
            ];
            v.extend(r.residuals.iter().map(|x| if x.is_nan() { String::new() } else { x.to_string() }));
            wr.write_record(&v)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Ergodic anelastic coefficient per frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C7Table {
    pub freqs: Vec<f64>,
    pub c7: Vec<f64>,
}

impl C7Table {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: C7Table = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.freqs.is_empty() || self.freqs.len() != self.c7.len() {
            return Err(Error::invalid("c7 table needs matching, non-empty `freqs` and `c7`"));
        }
        if self.freqs.windows(2).any(|w| !(w[0] < w[1])) || !(self.freqs[0] > 0.0) {
            return Err(Error::invalid("c7 frequencies must be positive and strictly increasing"));
        }
        if self.c7.iter().any(|c| !c.is_finite() || *c > 0.0) {
            return Err(Error::invalid("c7 values must be finite and not positive"));
        }
        Ok(())
    }

    /// Piecewise linear in ln f, flat outside the tabulated range.
    pub fn at(&self, freq: f64) -> f64 {
        interp_ln(&self.freqs, &self.c7, freq)
    }
}

/// How the attenuation grid is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GridSpec {
    Explicit(CellGrid),
    /// Cover the bounding box of all sources and sites, padded by `margin_km`.
    Auto { cell_km: f64, margin_km: f64 },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Auto { cell_km: 25.0, margin_km: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub zone: UtmZone,
    pub grid: GridSpec,
    pub regions: Vec<RegionPolygon>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub records: usize,
    pub events: usize,
    pub stations: usize,
    pub cells_crossed: usize,
    pub dropped_no_residual: usize,
    pub missing_depth: usize,
    pub warnings: Vec<String>,
}

/// Projects, segments and groups a flatfile.
pub fn ingest(flat: &Flatfile, c7: &C7Table, opts: &IngestOptions) -> Result<(Dataset, IngestReport)> {
    c7.validate()?;
    let mut report = IngestReport { rows_read: flat.rows.len(), ..Default::default() };
    let proj = |p: GeoPoint, row: usize, what: &str| -> Result<XY> {
        p.validate().map_err(|e| Error::Row { row, msg: format!("{what}: {e}") })?;
        project_to_utm(p, opts.zone).map_err(|e| Error::Row { row, msg: format!("{what}: {e}") })
    };
    let mut staged = Vec::new();
    for (k, r) in flat.rows.iter().enumerate() {
        let row = k + 1;
        if r.residuals.len() != flat.freqs.len() {
            return Err(Error::Row { row, msg: "residual count does not match the frequency columns".into() });
        }
        if r.residuals.iter().all(|v| !v.is_finite()) {
            report.dropped_no_residual += 1;
            log::warn!("row {row}: no usable residual, dropped");
            continue;
        }
        let depth = match r.cls_depth_km {
            Some(d) if d < 0.0 => return Err(Error::Row { row, msg: "`cls_depth_km` is negative".into() }),
            Some(d) => d,
            None => {
                report.missing_depth += 1;
                0.0
            }
        };
        let eq_xy = proj(r.eq, row, "eq")?;
        let sta_xy = proj(r.sta, row, "sta")?;
        let cls_xy = proj(r.cls, row, "cls")?;
        let region = classify_region(r.eq, &opts.regions).and_then(Region::from_label);
        staged.push((row, r, depth, eq_xy, sta_xy, cls_xy, region));
    }
    if report.missing_depth > 0 {
        report.warnings.push(format!("{} rows lack cls_depth_km; depth 0 used", report.missing_depth));
    }
    if report.dropped_no_residual > 0 {
        report.warnings.push(format!("{} rows have no usable residual and were dropped", report.dropped_no_residual));
    }

    let grid = match &opts.grid {
        GridSpec::Explicit(g) => {
            g.validate()?;
            *g
        }
        GridSpec::Auto { cell_km, .. } if staged.is_empty() => build_grid((XY::new(0.0, 0.0), XY::new(*cell_km, *cell_km)), *cell_km, *cell_km)?,
        GridSpec::Auto { cell_km, margin_km } => {
            let pts = staged.iter().flat_map(|s| [s.4, s.5]);
            let (mut lo, mut hi) = (XY::new(f64::INFINITY, f64::INFINITY), XY::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
            for p in pts {
                lo = XY::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = XY::new(hi.x.max(p.x), hi.y.max(p.y));
            }
            let m = margin_km.max(0.0);
            build_grid((XY::new(lo.x - m, lo.y - m), XY::new(hi.x + m, hi.y + m)), *cell_km, *cell_km)?
        }
    };

    let mut records = Vec::with_capacity(staged.len());
    let mut seg = SegmentMatrix::new(grid.n_cells());
    for (row, r, depth, eq_xy, sta_xy, cls_xy, region) in staged {
        let ray = Ray3::new(cls_xy, depth, sta_xy, 0.0);
        let cells = segment_ray(&grid, &ray, row).map_err(|e| Error::Row { row, msg: e.to_string() })?;
        let total: f64 = cells.iter().map(|c| c.1).sum();
        let cells = if total > 0.0 {
            cells.into_iter().map(|(c, l)| (c, l * r.rrup_km / total)).collect()
        } else {
            cells
        };
        seg.rows.push(cells);
        records.push(Record {
            event_id: r.event_id.clone(),
            station_id: r.station_id.clone(),
            mag: r.mag,
            rrup: r.rrup_km,
            vs30: r.vs30,
            eq: r.eq,
            sta: r.sta,
            cls: r.cls,
            cls_depth: depth,
            eq_xy,
            sta_xy,
            cls_xy,
            region,
            residual: r.residuals.clone(),
        });
    }
    let c7v: Vec<f64> = flat.freqs.iter().map(|&f| c7.at(f)).collect();
    let ds = Dataset::assemble(opts.zone, flat.freqs.clone(), c7v, records, grid, seg);
    report.records = ds.n_records();
    report.events = ds.events.len();
    report.stations = ds.stations.len();
    report.cells_crossed = ds.seg.crossed_cells().len();
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::california_regions;

    const SAMPLE: &str = "event_id,station_id,mag,rrup_km,vs30,eq_lat,eq_lon,sta_lat,sta_lon,cls_lat,cls_lon,cls_depth_km,res_f1,res_f5\n\
        e1,s1,4.5,40,400,34.0,-118.0,34.3,-118.1,34.0,-118.0,8,0.1,-0.2\n\
        e1,s2,4.5,60,500,34.0,-118.0,34.5,-117.9,34.0,-118.0,,0.3,\n\
        e2,s1,6.0,30,400,34.2,-118.3,34.3,-118.1,34.2,-118.3,5,,\n";

    fn opts() -> IngestOptions {
        IngestOptions { zone: UtmZone::CA, grid: GridSpec::default(), regions: california_regions() }
    }

    #[test]
    fn reads_and_ingests() {
        let flat = Flatfile::read(SAMPLE.as_bytes()).unwrap();
        assert_eq!(flat.freqs, vec![1.0, 5.0]);
        assert!(flat.rows[1].residuals[1].is_nan());
        let c7 = C7Table { freqs: vec![1.0, 10.0], c7: vec![-0.002, -0.006] };
        let (ds, rep) = ingest(&flat, &c7, &opts()).unwrap();
        assert_eq!(rep.dropped_no_residual, 1);
        assert_eq!(rep.missing_depth, 1);
        assert_eq!(ds.events.len(), 1);
        assert!((ds.seg.row_sum(0) - 40.0).abs() < 1e-9);
        assert!((ds.c7[1] - (-0.002 - 0.004 * 5f64.ln() / 10f64.ln())).abs() < 1e-15);
        assert_eq!(ds.records[0].region, Some(Region::South));
    }

    #[test]
    fn row_errors_are_numbered() {
        let bad = SAMPLE.replace("e2,s1,6.0,30", "e2,s1,abc,30");
        match Flatfile::read(bad.as_bytes()) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let missing = SAMPLE.replace("vs30,", "");
        assert!(Flatfile::read(missing.as_bytes()).is_err());
    }

    #[test]
    fn write_read_round_trip() {
        let flat = Flatfile::read(SAMPLE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        flat.write(&mut buf).unwrap();
        let back = Flatfile::read(buf.as_slice()).unwrap();
        assert_eq!(back.rows.len(), 3);
        assert_eq!(back.rows[0], flat.rows[0]);
        assert_eq!(back.rows[1].cls_depth_km, None);
    }
}
