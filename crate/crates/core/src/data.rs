//! Ingested records and their per-event / per-station groupings.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cells::{CellGrid, SegmentMatrix};
use crate::geo::{GeoPoint, Region, UtmZone, XY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub event_id: String,
    pub station_id: String,
    pub mag: f64,
    pub rrup: f64,
    pub vs30: f64,
    pub eq: GeoPoint,
    pub sta: GeoPoint,
    pub cls: GeoPoint,
    pub cls_depth: f64,
    pub eq_xy: XY,
    pub sta_xy: XY,
    pub cls_xy: XY,
    pub region: Option<Region>,
    /// Ergodic total residual per dataset frequency; NaN where unusable.
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: String,
    pub geo: GeoPoint,
    pub xy: XY,
    pub mag: f64,
    pub region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub geo: GeoPoint,
    pub xy: XY,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub zone: UtmZone,
    pub freqs: Vec<f64>,
    pub c7: Vec<f64>,
    pub records: Vec<Record>,
    pub grid: CellGrid,
    pub seg: SegmentMatrix,
    pub events: Vec<Event>,
    pub stations: Vec<Station>,
    pub rec_event: Vec<usize>,
    pub rec_station: Vec<usize>,
}

impl Dataset {
    /// Groups records into events and stations in first-appearance order.
    pub fn assemble(
        zone: UtmZone,
        freqs: Vec<f64>,
        c7: Vec<f64>,
        records: Vec<Record>,
        grid: CellGrid,
        seg: SegmentMatrix,
    ) -> Self {
        let mut events: Vec<Event> = Vec::new();
        let mut stations: Vec<Station> = Vec::new();
        let mut ev_map: HashMap<String, usize> = HashMap::new();
        let mut st_map: HashMap<String, usize> = HashMap::new();
        let mut rec_event = Vec::with_capacity(records.len());
        let mut rec_station = Vec::with_capacity(records.len());
        for r in &records {
            let e = *ev_map.entry(r.event_id.clone()).or_insert_with(|| {
                events.push(Event {
                    id: r.event_id.clone(),
                    geo: r.eq,
                    xy: r.eq_xy,
                    mag: r.mag,
                    region: r.region,
                });
                events.len() - 1
            });
            let s = *st_map.entry(r.station_id.clone()).or_insert_with(|| {
                stations.push(Station { id: r.station_id.clone(), geo: r.sta, xy: r.sta_xy });
                stations.len() - 1
            });
            rec_event.push(e);
            rec_station.push(s);
        }
        Self { zone, freqs, c7, records, grid, seg, events, stations, rec_event, rec_station }
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    pub fn freq_index(&self, freq: f64) -> Option<usize> {
        self.freqs.iter().position(|&f| (f - freq).abs() <= 1e-9 * f.abs().max(1.0))
    }

    /// Records whose event passes `keep`, regrouped.
    pub fn filter_events(&self, keep: impl Fn(&str) -> bool) -> Dataset {
        let mut records = Vec::new();
        let mut seg = SegmentMatrix::new(self.seg.n_cells);
        for (i, r) in self.records.iter().enumerate() {
            if keep(&r.event_id) {
                records.push(r.clone());
                seg.rows.push(self.seg.rows[i].clone());
            }
        }
        Dataset::assemble(self.zone, self.freqs.clone(), self.c7.clone(), records, self.grid, seg)
    }

    /// Keeps only the listed frequencies (by index).
    pub fn select_freqs(&self, idx: &[usize]) -> Dataset {
        let mut out = self.clone();
        out.freqs = idx.iter().map(|&i| self.freqs[i]).collect();
        out.c7 = idx.iter().map(|&i| self.c7[i]).collect();
        for r in &mut out.records {
            r.residual = idx.iter().map(|&i| r.residual[i]).collect();
        }
        out
    }
}
