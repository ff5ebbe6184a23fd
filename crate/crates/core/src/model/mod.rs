//! Non-ergodic median, parameter containers and the per-frequency posterior.
//!
//! The regression target is the de-attenuated residual
//! `y = residual + c7·R_rup`, modelled as
//!
//! ```text
//! y = δc0 + δc0e[region] + δc1e(x_e) + δc1a(x_s) + δc1b(s) + c_ca·ΔR + δB_e + δW
//! ```
//!
//! with `δB_e ~ N(0, τ0²)` and `δW ~ N(0, φ0²)`.

pub mod noncentered;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geo::{Region, XY};
use crate::kernels::{distance_matrix, exp_correlation, JITTER_REL};
use crate::linalg::{cholesky, Chol, Matrix};

pub use noncentered::{NcLayout, NcModel};

/// Magnitude and frequency below which the regional constant applies.
pub const DC0E_MAG_LIMIT: f64 = 5.0;
pub const DC0E_FREQ_LIMIT: f64 = 5.0;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Regional-constant selector for an event at this frequency.
pub fn apply_dc0e_mask(mag: f64, region: Option<Region>, freq: f64) -> Option<Region> {
    if mag < DC0E_MAG_LIMIT && freq < DC0E_FREQ_LIMIT {
        region
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// All hyperparameters free.
    One,
    /// Hyperparameters pinned; only φ0 and τ0 free.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    pub dc0_sd: f64,
    pub dc0e_sd: f64,
    pub ell_shape: f64,
    pub ell_scale: f64,
    pub omega_rate: f64,
    pub omega_1bs: LogNormalPrior,
    pub phi0: LogNormalPrior,
    pub tau0: LogNormalPrior,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            dc0_sd: 0.1,
            dc0e_sd: 0.2,
            ell_shape: 2.0,
            ell_scale: 50.0,
            omega_rate: 20.0,
            omega_1bs: LogNormalPrior { mu: -0.8, sigma: 0.3 },
            phi0: LogNormalPrior { mu: -1.3, sigma: 0.3 },
            tau0: LogNormalPrior { mu: -1.0, sigma: 0.3 },
        }
    }
}

pub fn ln_normal(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
}

pub fn ln_inv_gamma(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - libm::lgamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

pub fn ln_exponential(x: f64, rate: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    rate.ln() - rate * x
}

pub fn ln_lognormal(x: f64, p: LogNormalPrior) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let z = (x.ln() - p.mu) / p.sigma;
    -0.5 * z * z - x.ln() - p.sigma.ln() - 0.5 * LN_2PI
}

/// Kind of prior acting on a positive hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperPrior {
    InvGamma { shape: f64, scale: f64 },
    Exponential { rate: f64 },
    LogNormal(LogNormalPrior),
}

impl HyperPrior {
    pub fn ln_density(&self, x: f64) -> f64 {
        match *self {
            HyperPrior::InvGamma { shape, scale } => ln_inv_gamma(x, shape, scale),
            HyperPrior::Exponential { rate } => ln_exponential(x, rate),
            HyperPrior::LogNormal(p) => ln_lognormal(x, p),
        }
    }

    /// Log density of `v = ln x` including the Jacobian `x`.
    pub fn ln_density_log(&self, v: f64) -> f64 {
        self.ln_density(v.exp()) + v
    }

    /// Derivative of [`Self::ln_density_log`] with respect to `v = ln x`.
    pub fn d_ln_density_log(&self, v: f64) -> f64 {
        let x = v.exp();
        match *self {
            HyperPrior::InvGamma { shape, scale } => -(shape + 1.0) + scale / x + 1.0,
            HyperPrior::Exponential { rate } => -rate * x + 1.0,
            HyperPrior::LogNormal(p) => -(v - p.mu) / (p.sigma * p.sigma),
        }
    }
}

/// Index of each free quantity in the full hyperparameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HyperName {
    Ell1e,
    Omega1e,
    Ell1as,
    Omega1as,
    Omega1bs,
    EllCa1,
    OmegaCa1,
    OmegaCa2,
    Phi0,
    Tau0,
}

impl HyperName {
    pub const ALL: [HyperName; 10] = [
        HyperName::Ell1e,
        HyperName::Omega1e,
        HyperName::Ell1as,
        HyperName::Omega1as,
        HyperName::Omega1bs,
        HyperName::EllCa1,
        HyperName::OmegaCa1,
        HyperName::OmegaCa2,
        HyperName::Phi0,
        HyperName::Tau0,
    ];

    pub fn free(phase: Phase) -> &'static [HyperName] {
        match phase {
            Phase::One => &Self::ALL,
            Phase::Two => &Self::ALL[8..],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            HyperName::Ell1e => "ell_1e",
            HyperName::Omega1e => "omega_1e",
            HyperName::Ell1as => "ell_1as",
            HyperName::Omega1as => "omega_1as",
            HyperName::Omega1bs => "omega_1bs",
            HyperName::EllCa1 => "ell_ca1",
            HyperName::OmegaCa1 => "omega_ca1",
            HyperName::OmegaCa2 => "omega_ca2",
            HyperName::Phi0 => "phi0",
            HyperName::Tau0 => "tau0",
        }
    }

    pub fn from_label(s: &str) -> Option<HyperName> {
        Self::ALL.iter().copied().find(|h| h.label() == s)
    }

    pub fn prior(&self, p: &Priors) -> HyperPrior {
        let ig = HyperPrior::InvGamma { shape: p.ell_shape, scale: p.ell_scale };
        let ex = HyperPrior::Exponential { rate: p.omega_rate };
        match self {
            HyperName::Ell1e | HyperName::Ell1as | HyperName::EllCa1 => ig,
            HyperName::Omega1e | HyperName::Omega1as | HyperName::OmegaCa1 | HyperName::OmegaCa2 => ex,
            HyperName::Omega1bs => HyperPrior::LogNormal(p.omega_1bs),
            HyperName::Phi0 => HyperPrior::LogNormal(p.phi0),
            HyperName::Tau0 => HyperPrior::LogNormal(p.tau0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub ell_1e: f64,
    pub omega_1e: f64,
    pub ell_1as: f64,
    pub omega_1as: f64,
    pub omega_1bs: f64,
    pub ell_ca1: f64,
    pub omega_ca1: f64,
    pub omega_ca2: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let v = [
            self.ell_1e,
            self.omega_1e,
            self.ell_1as,
            self.omega_1as,
            self.omega_1bs,
            self.ell_ca1,
            self.omega_ca1,
            self.omega_ca2,
        ];
        if v.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("hyperparameters must be positive: {self:?}")))
        }
    }
}

/// Full vector of the ten free quantities (eight hyperparameters plus φ0, τ0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub hyper: HyperParams,
    pub phi0: f64,
    pub tau0: f64,
}

impl HyperState {
    pub fn get(&self, h: HyperName) -> f64 {
        match h {
            HyperName::Ell1e => self.hyper.ell_1e,
            HyperName::Omega1e => self.hyper.omega_1e,
            HyperName::Ell1as => self.hyper.ell_1as,
            HyperName::Omega1as => self.hyper.omega_1as,
            HyperName::Omega1bs => self.hyper.omega_1bs,
            HyperName::EllCa1 => self.hyper.ell_ca1,
            HyperName::OmegaCa1 => self.hyper.omega_ca1,
            HyperName::OmegaCa2 => self.hyper.omega_ca2,
            HyperName::Phi0 => self.phi0,
            HyperName::Tau0 => self.tau0,
        }
    }

    pub fn set(&mut self, h: HyperName, v: f64) {
        match h {
            HyperName::Ell1e => self.hyper.ell_1e = v,
            HyperName::Omega1e => self.hyper.omega_1e = v,
            HyperName::Ell1as => self.hyper.ell_1as = v,
            HyperName::Omega1as => self.hyper.omega_1as = v,
            HyperName::Omega1bs => self.hyper.omega_1bs = v,
            HyperName::EllCa1 => self.hyper.ell_ca1 = v,
            HyperName::OmegaCa1 => self.hyper.omega_ca1 = v,
            HyperName::OmegaCa2 => self.hyper.omega_ca2 = v,
            HyperName::Phi0 => self.phi0 = v,
            HyperName::Tau0 => self.tau0 = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dc0: f64,
    pub dc0e_north: f64,
    pub dc0e_south: f64,
    /// Per unique event location.
    pub dc1e: Vec<f64>,
    /// Per unique station location.
    pub dc1a: Vec<f64>,
    /// Per station.
    pub dc1b: Vec<f64>,
    /// Per modelled cell; every entry ≤ 0.
    pub c_ca: Vec<f64>,
    /// Per event.
    pub db: Vec<f64>,
    pub phi0: f64,
    pub tau0: f64,
}

impl ModelParams {
    pub fn zeros(data: &FreqData) -> Self {
        Self {
            dc0: 0.0,
            dc0e_north: 0.0,
            dc0e_south: 0.0,
            dc1e: vec![0.0; data.eq_locs.len()],
            dc1a: vec![0.0; data.sta_locs.len()],
            dc1b: vec![0.0; data.n_stations()],
            c_ca: vec![data.c7; data.n_cells()],
            db: vec![0.0; data.n_events()],
            phi0: 0.5,
            tau0: 0.4,
        }
    }

    pub fn dc0e(&self, r: Option<Region>) -> f64 {
        match r {
            Some(Region::North) => self.dc0e_north,
            Some(Region::South) => self.dc0e_south,
            None => 0.0,
        }
    }
}

/// One frequency's regression problem, indexed locally.
#[derive(Debug, Clone)]
pub struct FreqData {
    pub freq: f64,
    pub c7: f64,
    /// De-attenuated residual `residual + c7·R_rup`.
    pub y: Vec<f64>,
    pub residual: Vec<f64>,
    pub rrup: Vec<f64>,
    pub mag: Vec<f64>,
    /// Dataset record index of each local record.
    pub records: Vec<usize>,
    pub rec_event: Vec<usize>,
    pub rec_station: Vec<usize>,
    pub event_ids: Vec<String>,
    pub station_ids: Vec<String>,
    pub event_mag: Vec<f64>,
    pub event_loc: Vec<usize>,
    pub station_loc: Vec<usize>,
    pub eq_locs: Vec<XY>,
    pub sta_locs: Vec<XY>,
    pub station_xy: Vec<XY>,
    /// Regional constant acting on each event at this frequency.
    pub event_dc0e: Vec<Option<Region>>,
    /// Grid cell id of each modelled cell.
    pub cells: Vec<usize>,
    pub cell_xy: Vec<XY>,
    /// Per record: (local cell, ΔR).
    pub seg: Vec<Vec<(usize, f64)>>,
    pub eq_dist: Matrix,
    pub sta_dist: Matrix,
    pub cell_dist: Matrix,
}

fn key(p: XY) -> (u64, u64) {
    (p.x.to_bits(), p.y.to_bits())
}

impl FreqData {
    /// Builds the problem for dataset frequency `fi` from records with a finite residual.
    pub fn new(ds: &Dataset, fi: usize) -> Result<Self> {
        let freq = *ds
            .freqs
            .get(fi)
            .ok_or_else(|| Error::invalid(format!("frequency index {fi} out of range")))?;
        let c7 = ds.c7[fi];
        let mut ev_map: HashMap<usize, usize> = HashMap::new();
        let mut st_map: HashMap<usize, usize> = HashMap::new();
        let mut eloc_map: HashMap<(u64, u64), usize> = HashMap::new();
        let mut sloc_map: HashMap<(u64, u64), usize> = HashMap::new();
        let mut d = FreqData {
            freq,
            c7,
            y: vec![],
            residual: vec![],
            rrup: vec![],
            mag: vec![],
            records: vec![],
            rec_event: vec![],
            rec_station: vec![],
            event_ids: vec![],
            station_ids: vec![],
            event_mag: vec![],
            event_loc: vec![],
            station_loc: vec![],
            eq_locs: vec![],
            sta_locs: vec![],
            station_xy: vec![],
            event_dc0e: vec![],
            cells: vec![],
            cell_xy: vec![],
            seg: vec![],
            eq_dist: Matrix::zeros(0, 0),
            sta_dist: Matrix::zeros(0, 0),
            cell_dist: Matrix::zeros(0, 0),
        };
        let mut cell_used = vec![false; ds.grid.n_cells()];
        for (i, r) in ds.records.iter().enumerate() {
            let res = r.residual[fi];
            if !res.is_finite() {
                continue;
            }
            let ge = ds.rec_event[i];
            let gs = ds.rec_station[i];
            let e = *ev_map.entry(ge).or_insert_with(|| {
                let ev = &ds.events[ge];
                d.event_ids.push(ev.id.clone());
                d.event_mag.push(ev.mag);
                d.event_dc0e.push(apply_dc0e_mask(ev.mag, ev.region, freq));
                let next = eloc_map.len();
                let loc = *eloc_map.entry(key(ev.xy)).or_insert(next);
                if loc == d.eq_locs.len() {
                    d.eq_locs.push(ev.xy);
                }
                d.event_loc.push(loc);
                d.event_ids.len() - 1
            });
            let s = *st_map.entry(gs).or_insert_with(|| {
                let st = &ds.stations[gs];
                d.station_ids.push(st.id.clone());
                d.station_xy.push(st.xy);
                let next = sloc_map.len();
                let loc = *sloc_map.entry(key(st.xy)).or_insert(next);
                if loc == d.sta_locs.len() {
                    d.sta_locs.push(st.xy);
                }
                d.station_loc.push(loc);
                d.station_ids.len() - 1
            });
            d.y.push(res + c7 * r.rrup);
            d.residual.push(res);
            d.rrup.push(r.rrup);
            d.mag.push(r.mag);
            d.records.push(i);
            d.rec_event.push(e);
            d.rec_station.push(s);
            for &(c, l) in &ds.seg.rows[i] {
                if l > 0.0 {
                    cell_used[c] = true;
                }
            }
        }
        let mut cell_local = vec![usize::MAX; ds.grid.n_cells()];
        for (c, used) in cell_used.iter().enumerate() {
            if *used {
                cell_local[c] = d.cells.len();
                d.cells.push(c);
                d.cell_xy.push(ds.grid.midpoint(c));
            }
        }
        for &i in &d.records {
            let row = ds.seg.rows[i]
                .iter()
                .filter(|&&(_, l)| l > 0.0)
                .map(|&(c, l)| (cell_local[c], l))
                .collect();
            d.seg.push(row);
        }
        d.eq_dist = distance_matrix(&d.eq_locs);
        d.sta_dist = distance_matrix(&d.sta_locs);
        d.cell_dist = distance_matrix(&d.cell_xy);
        Ok(d)
    }

    pub fn n_records(&self) -> usize {
        self.y.len()
    }
    pub fn n_events(&self) -> usize {
        self.event_ids.len()
    }
    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn record_dc0e(&self, i: usize) -> Option<Region> {
        self.event_dc0e[self.rec_event[i]]
    }

    /// Σ c·ΔR along record `i`.
    pub fn path_term(&self, i: usize, c_ca: &[f64]) -> f64 {
        self.seg[i].iter().map(|&(c, l)| c_ca[c] * l).sum()
    }
}

/// Median adjustment for local record `i` (without δB).
pub fn median_nonergodic(data: &FreqData, i: usize, p: &ModelParams) -> Result<f64> {
    let e = *data.rec_event.get(i).ok_or_else(|| Error::invalid(format!("record {i} missing")))?;
    let s = data.rec_station[i];
    let el = *data.event_loc.get(e).ok_or_else(|| Error::invalid(format!("event {e} missing")))?;
    let sl = *data.station_loc.get(s).ok_or_else(|| Error::invalid(format!("station {s} missing")))?;
    let dc1e = *p.dc1e.get(el).ok_or_else(|| Error::invalid(format!("event location {el} missing")))?;
    let dc1a = *p.dc1a.get(sl).ok_or_else(|| Error::invalid(format!("station location {sl} missing")))?;
    let dc1b = *p.dc1b.get(s).ok_or_else(|| Error::invalid(format!("station {s} missing")))?;
    if data.seg[i].iter().any(|&(c, _)| c >= p.c_ca.len()) {
        return Err(Error::invalid(format!("record {i} references a cell outside c_ca")));
    }
    Ok(median_terms(p.dc0, p.dc0e(data.record_dc0e(i)), dc1e, dc1a, dc1b, data.path_term(i, &p.c_ca)))
}

/// Sum of the median components.
pub fn median_terms(dc0: f64, dc0e: f64, dc1e: f64, dc1a: f64, dc1b: f64, path: f64) -> f64 {
    dc0 + dc0e + dc1e + dc1a + dc1b + path
}

fn median_unchecked(data: &FreqData, i: usize, p: &ModelParams) -> f64 {
    let e = data.rec_event[i];
    let s = data.rec_station[i];
    p.dc0
        + p.dc0e(data.event_dc0e[e])
        + p.dc1e[data.event_loc[e]]
        + p.dc1a[data.station_loc[s]]
        + p.dc1b[s]
        + data.path_term(i, &p.c_ca)
}

/// Gaussian log likelihood of the records given every term including δB.
pub fn log_likelihood(data: &FreqData, p: &ModelParams) -> f64 {
    let mut ss = 0.0;
    for i in 0..data.n_records() {
        let r = data.y[i] - median_unchecked(data, i, p) - p.db[data.rec_event[i]];
        ss += r * r;
    }
    let n = data.n_records() as f64;
    -0.5 * ss / (p.phi0 * p.phi0) - n * p.phi0.ln() - 0.5 * n * LN_2PI
}

/// Correlation-matrix Cholesky `chol(exp(−D/ℓ) + 1e-9·I)`; scaling by ω gives the
/// factor of the jittered Gram matrix.
pub fn corr_chol(dist: &Matrix, ell: f64) -> Result<Chol> {
    let r = exp_correlation(dist, ell);
    cholesky(&r, JITTER_REL)
}

/// Cell prior covariance `ω1²·exp(−D/ℓ) + ω2²·I` plus the relative jitter.
pub fn cell_cov(dist: &Matrix, ell: f64, omega1: f64, omega2: f64) -> Matrix {
    let mut k = exp_correlation(dist, ell);
    let w1 = omega1 * omega1;
    let w2 = omega2 * omega2;
    let n = k.nrows();
    for j in 0..n {
        for i in 0..n {
            k[(i, j)] *= w1;
        }
        k[(j, j)] += w2 + JITTER_REL * (w1 + w2);
    }
    k
}

/// Zero-mean GP log density `log N(v; 0, ω²·(R + jitter))` from the correlation factor.
pub fn gp_logpdf(chol_r: &Chol, omega: f64, v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let w = chol_r.forward(v);
    let q: f64 = w.iter().map(|x| x * x).sum::<f64>() / (omega * omega);
    -0.5 * q - 0.5 * chol_r.logdet() - n * omega.ln() - 0.5 * n * LN_2PI
}

/// `log N(v; m, K)` from a factor of K.
pub fn mvn_logpdf(chol: &Chol, v: &[f64], mean: f64) -> f64 {
    let d: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let w = chol.forward(&d);
    let q: f64 = w.iter().map(|x| x * x).sum();
    -0.5 * q - 0.5 * chol.logdet() - 0.5 * v.len() as f64 * LN_2PI
}

/// Centered log posterior. The truncated cell prior is left unnormalized
/// (upper bound at zero), so any positive cell coefficient gives −∞. In phase 2
/// the hyperparameters are constants and their priors are dropped.
pub fn log_posterior(
    data: &FreqData,
    p: &ModelParams,
    h: &HyperParams,
    phase: Phase,
    priors: &Priors,
) -> Result<f64> {
    if p.c_ca.iter().any(|&c| c > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    if !(p.phi0 > 0.0 && p.tau0 > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    h.validate()?;
    let mut lp = log_likelihood(data, p);
    lp += p.db.iter().map(|&b| ln_normal(b, 0.0, p.tau0)).sum::<f64>();
    if !p.dc1e.is_empty() {
        lp += gp_logpdf(&corr_chol(&data.eq_dist, h.ell_1e)?, h.omega_1e, &p.dc1e);
    }
    if !p.dc1a.is_empty() {
        lp += gp_logpdf(&corr_chol(&data.sta_dist, h.ell_1as)?, h.omega_1as, &p.dc1a);
    }
    lp += p.dc1b.iter().map(|&b| ln_normal(b, 0.0, h.omega_1bs)).sum::<f64>();
    if !p.c_ca.is_empty() {
        let k = cell_cov(&data.cell_dist, h.ell_ca1, h.omega_ca1, h.omega_ca2);
        lp += mvn_logpdf(&cholesky(&k, 0.0)?, &p.c_ca, data.c7);
    }
    lp += ln_normal(p.dc0, 0.0, priors.dc0_sd);
    lp += ln_normal(p.dc0e_north, 0.0, priors.dc0e_sd);
    lp += ln_normal(p.dc0e_south, 0.0, priors.dc0e_sd);
    let state = HyperState { hyper: *h, phi0: p.phi0, tau0: p.tau0 };
    for name in HyperName::free(phase) {
        lp += name.prior(priors).ln_density(state.get(*name));
    }
    Ok(lp)
}

/// Whether the regional constant for `r` enters the model at this frequency.
pub fn region_active(data: &FreqData, r: Region) -> bool {
    data.event_dc0e.iter().any(|&x| x == Some(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc0e_mask_thresholds() {
        assert_eq!(apply_dc0e_mask(4.5, Some(Region::North), 1.0), Some(Region::North));
        assert_eq!(apply_dc0e_mask(5.5, Some(Region::North), 1.0), None);
        assert_eq!(apply_dc0e_mask(4.5, Some(Region::South), 10.0), None);
        assert_eq!(apply_dc0e_mask(6.0, Some(Region::South), 5.0), None);
        assert_eq!(apply_dc0e_mask(4.0, None, 1.0), None);
    }

    #[test]
    fn median_hand_sum() {
        let v = median_terms(0.02, 0.0, 0.1, -0.2, 0.05, -0.3);
        assert!((v - (-0.33)).abs() < 1e-15);
    }

    #[test]
    fn prior_densities() {
        // InvGamma(2, 50) at its mode 50/3
        let mode = 50.0 / 3.0;
        let h = 1e-4;
        let d = (ln_inv_gamma(mode + h, 2.0, 50.0) - ln_inv_gamma(mode - h, 2.0, 50.0)) / (2.0 * h);
        assert!(d.abs() < 1e-6);
        assert!((ln_exponential(0.0, 20.0) - 20f64.ln()).abs() < 1e-15);
        assert_eq!(ln_exponential(-1.0, 20.0), f64::NEG_INFINITY);
    }

    #[test]
    fn hyper_prior_log_derivatives() {
        let p = Priors::default();
        for name in HyperName::ALL {
            let pr = name.prior(&p);
            for v in [-3.0, -1.2, 0.5, 3.0] {
                let h = 1e-6;
                let fd = (pr.ln_density_log(v + h) - pr.ln_density_log(v - h)) / (2.0 * h);
                assert!((fd - pr.d_ln_density_log(v)).abs() < 1e-6 * (1.0 + fd.abs()), "{name:?} at {v}");
            }
        }
    }
}
