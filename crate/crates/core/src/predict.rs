//! Predictive distributions of the non-ergodic coefficients at new locations and
//! scenario medians with epistemic uncertainty.

use std::collections::BTreeMap;
use std::io::Write;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::aleatory::AleatoryModel;
use crate::cells::{segment_ray, CellGrid, Ray3};
use crate::error::{Error, Result};
use crate::geo::{unproject_from_utm, Region, UtmZone, XY};
use crate::inference::FreqFit;
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky, floor_psd, symmetrize, Matrix};
use crate::model::{apply_dc0e_mask, FreqData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Dc1e,
    Dc1a,
    CCa,
}

impl Term {
    pub fn label(&self) -> &'static str {
        match self {
            Term::Dc1e => "dc1e",
            Term::Dc1a => "dc1a",
            Term::CCa => "c_ca",
        }
    }

    pub fn parse(s: &str) -> Result<Term> {
        match s {
            "dc1e" => Ok(Term::Dc1e),
            "dc1a" => Ok(Term::Dc1a),
            "c_ca" | "cca" => Ok(Term::CCa),
            _ => Err(Error::invalid(format!("unknown term {s:?}; expected dc1e, dc1a or c_ca"))),
        }
    }
}

/// Posterior of a spatially varying coefficient at its known locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub term: Term,
    pub known: Vec<XY>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub kernel: KernelSpec,
    /// Prior mean of the coefficient (0, or c7 for cells).
    pub prior_mean: f64,
}

impl CoefficientField {
    pub fn validate(&self) -> Result<()> {
        let n = self.known.len();
        if self.mean.len() != n || self.sd.len() != n {
            return Err(Error::invalid(format!("{} field: location, mean and sd lengths differ", self.term.label())));
        }
        if self.sd.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid(format!("{} field: negative or NaN sd", self.term.label())));
        }
        self.kernel.validate()
    }

    fn cov(&self, a: XY, b: XY, same: bool) -> f64 {
        let d = a.dist(&b);
        self.kernel.at(d, same || d == 0.0)
    }

    /// `K⁻¹k` for the new points plus the prior covariance block they need.
    fn weights(&self, new_pts: &[XY]) -> Result<(Matrix, Matrix)> {
        let n = self.known.len();
        let m = new_pts.len();
        let k = Mat::from_fn(n, n, |i, j| self.cov(self.known[i], self.known[j], i == j));
        let ch = cholesky(&k, 0.0)?;
        let kx = Mat::from_fn(n, m, |i, j| self.cov(self.known[i], new_pts[j], false));
        let a = ch.solve_mat(&kx);
        Ok((kx, a))
    }
}

/// Conditional mean and covariance of `field` at `new_pts`:
/// `μ* = m + kᵀK⁻¹(μ − m)`, `Σ* = K* − kᵀK⁻¹k + kᵀK⁻¹·Ψ·K⁻¹k` with `Ψ = diag(sd²)`.
pub fn condition_field(field: &CoefficientField, new_pts: &[XY]) -> Result<(Vec<f64>, Matrix)> {
    field.validate()?;
    let m = new_pts.len();
    let kstar = Mat::from_fn(m, m, |i, j| field.cov(new_pts[i], new_pts[j], i == j));
    if field.known.is_empty() {
        return Ok((vec![field.prior_mean; m], kstar));
    }
    let (kx, a) = field.weights(new_pts)?;
    let n = field.known.len();
    let mean: Vec<f64> = (0..m)
        .map(|j| field.prior_mean + (0..n).map(|i| a[(i, j)] * (field.mean[i] - field.prior_mean)).sum::<f64>())
        .collect();
    let mut cov = kstar;
    for j in 0..m {
        for l in 0..m {
            let mut s = 0.0;
            for i in 0..n {
                s += -kx[(i, j)] * a[(i, l)] + a[(i, j)] * field.sd[i] * field.sd[i] * a[(i, l)];
            }
            cov[(j, l)] += s;
        }
    }
    symmetrize(&mut cov);
    Ok((mean, floor_psd(&cov)?))
}

/// Conditional means and marginal variances only (for large query sets).
pub fn condition_marginal(field: &CoefficientField, new_pts: &[XY]) -> Result<(Vec<f64>, Vec<f64>)> {
    field.validate()?;
    let prior_var = field.kernel.variance() + field.kernel.jitter();
    if field.known.is_empty() {
        return Ok((vec![field.prior_mean; new_pts.len()], vec![prior_var; new_pts.len()]));
    }
    let n = field.known.len();
    let mut means = Vec::with_capacity(new_pts.len());
    let mut vars = Vec::with_capacity(new_pts.len());
    for chunk in new_pts.chunks(512) {
        let (kx, a) = field.weights(chunk)?;
        for j in 0..chunk.len() {
            let mut mu = field.prior_mean;
            let mut v = prior_var;
            for i in 0..n {
                mu += a[(i, j)] * (field.mean[i] - field.prior_mean);
                v += -kx[(i, j)] * a[(i, j)] + a[(i, j)] * a[(i, j)] * field.sd[i] * field.sd[i];
            }
            means.push(mu);
            vars.push(v.max(0.0));
        }
    }
    Ok((means, vars))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Everything needed to predict at one frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqModel {
    pub freq: f64,
    pub c7: f64,
    pub dc0: MeanSd,
    pub dc0e_north: MeanSd,
    pub dc0e_south: MeanSd,
    pub dc1e: CoefficientField,
    pub dc1a: CoefficientField,
    pub c_ca: CoefficientField,
    /// Grid cell id of each known cell in `c_ca`.
    pub cell_ids: Vec<usize>,
    pub dc1b: BTreeMap<String, MeanSd>,
    pub omega_1bs: f64,
    pub phi0: f64,
    pub tau0: f64,
}

fn block(fit: &FreqFit, prefix: &str, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, s) = fit.summary.block(prefix);
    if m.len() != n {
        return Err(Error::invalid(format!("summary has {} {prefix} entries, expected {n}", m.len())));
    }
    Ok((m, s))
}

fn mean_sd(fit: &FreqFit, name: &str) -> Result<MeanSd> {
    let p = fit.summary.get(name).ok_or_else(|| Error::invalid(format!("summary lacks {name}")))?;
    Ok(MeanSd { mean: p.mean, sd: p.sd })
}

impl FreqModel {
    pub fn from_fit(d: &FreqData, fit: &FreqFit) -> Result<Self> {
        let hs = fit.hyper_means()?;
        let h = hs.hyper;
        let (em, es) = block(fit, "dc1e:", d.eq_locs.len())?;
        let (am, as_) = block(fit, "dc1a:", d.sta_locs.len())?;
        let (cm, cs) = block(fit, "c_ca:", d.n_cells())?;
        let mut dc1b = BTreeMap::new();
        for id in &d.station_ids {
            dc1b.insert(id.clone(), mean_sd(fit, &format!("dc1b:{id}"))?);
        }
        Ok(Self {
            freq: d.freq,
            c7: d.c7,
            dc0: mean_sd(fit, "dc0")?,
            dc0e_north: mean_sd(fit, "dc0e_north")?,
            dc0e_south: mean_sd(fit, "dc0e_south")?,
            dc1e: CoefficientField {
                term: Term::Dc1e,
                known: d.eq_locs.clone(),
                mean: em,
                sd: es,
                kernel: KernelSpec::exponential(h.omega_1e, h.ell_1e),
                prior_mean: 0.0,
            },
            dc1a: CoefficientField {
                term: Term::Dc1a,
                known: d.sta_locs.clone(),
                mean: am,
                sd: as_,
                kernel: KernelSpec::exponential(h.omega_1as, h.ell_1as),
                prior_mean: 0.0,
            },
            c_ca: CoefficientField {
                term: Term::CCa,
                known: d.cell_xy.clone(),
                mean: cm,
                sd: cs,
                kernel: KernelSpec::cell(h.omega_ca1, h.ell_ca1, h.omega_ca2),
                prior_mean: d.c7,
            },
            cell_ids: d.cells.clone(),
            dc1b,
            omega_1bs: h.omega_1bs,
            phi0: hs.phi0,
            tau0: hs.tau0,
        })
    }

    pub fn field(&self, t: Term) -> &CoefficientField {
        match t {
            Term::Dc1e => &self.dc1e,
            Term::Dc1a => &self.dc1a,
            Term::CCa => &self.c_ca,
        }
    }
}

/// Model for `freq` or an error naming the available frequencies.
pub fn model_at(models: &[FreqModel], freq: f64) -> Result<&FreqModel> {
    models
        .iter()
        .find(|m| (m.freq - freq).abs() <= 1e-9 * freq.abs().max(1.0))
        .ok_or_else(|| Error::MissingFrequency { freq, available: models.iter().map(|m| m.freq).collect() })
}

/// A new earthquake–site pair in projected coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub eq: XY,
    pub sta: XY,
    /// Closest point on the rupture and its depth (km).
    pub cls: XY,
    pub cls_depth: f64,
    pub mag: f64,
    /// Rupture distance; defaults to the 3-D ray length.
    pub rrup: Option<f64>,
    pub station_id: Option<String>,
    pub region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPrediction {
    pub freq: f64,
    /// Non-ergodic median of the de-attenuated target (sum of all terms).
    pub median_adjustment: f64,
    pub epistemic_sd: f64,
    /// `c7·R_rup`, the ergodic anelastic term the cell attenuation replaces.
    pub ergodic_attenuation: f64,
    pub terms: BTreeMap<String, TermValue>,
    pub tau0: f64,
    pub phi0: f64,
    pub aleatory_total: f64,
    /// Cells whose conditioned mean was clamped at zero.
    pub clamped_cells: usize,
    pub rrup: f64,
}

impl ScenarioPrediction {
    /// Predicted ergodic residual: the non-ergodic median minus `c7·R_rup`.
    pub fn residual_prediction(&self) -> f64 {
        self.median_adjustment - self.ergodic_attenuation
    }
}

/// Per-cell lengths of the scenario ray, rescaled to sum to `rrup` when given.
pub fn scenario_segments(grid: &CellGrid, sc: &Scenario) -> Result<(Vec<(usize, f64)>, f64)> {
    let ray = Ray3::new(sc.cls, sc.cls_depth, sc.sta, 0.0);
    let seg = segment_ray(grid, &ray, 0)?;
    let total: f64 = seg.iter().map(|s| s.1).sum();
    match sc.rrup {
        Some(r) if total > 0.0 => Ok((seg.into_iter().map(|(c, l)| (c, l * r / total)).collect(), r)),
        Some(r) => Ok((seg, r)),
        None => Ok((seg, total)),
    }
}

/// Median and epistemic uncertainty of a scenario. Component variances are summed
/// as independent.
pub fn predict_scenario(
    model: &FreqModel,
    grid: &CellGrid,
    sc: &Scenario,
    aleatory: Option<&AleatoryModel>,
    condition_event: bool,
) -> Result<ScenarioPrediction> {
    let mut terms = BTreeMap::new();
    let mut var = 0.0;
    let mut add = |name: &str, mean: f64, sd: f64, terms: &mut BTreeMap<String, TermValue>| {
        var += sd * sd;
        terms.insert(name.to_string(), TermValue { mean, sd });
    };
    add("dc0", model.dc0.mean, model.dc0.sd, &mut terms);
    let region = apply_dc0e_mask(sc.mag, sc.region, model.freq);
    let reg = match region {
        Some(Region::North) => model.dc0e_north,
        Some(Region::South) => model.dc0e_south,
        None => MeanSd { mean: 0.0, sd: 0.0 },
    };
    add("dc0e", reg.mean, reg.sd, &mut terms);

    let (e_mean, e_var) = if condition_event {
        let (m, v) = condition_marginal(&model.dc1e, &[sc.eq])?;
        (m[0], v[0])
    } else {
        (0.0, model.dc1e.kernel.variance())
    };
    add("dc1e", e_mean, e_var.sqrt(), &mut terms);
    let (a_m, a_v) = condition_marginal(&model.dc1a, &[sc.sta])?;
    add("dc1a", a_m[0], a_v[0].sqrt(), &mut terms);
    let b = sc.station_id.as_ref().and_then(|s| model.dc1b.get(s)).copied();
    let b = b.unwrap_or(MeanSd { mean: 0.0, sd: model.omega_1bs });
    add("dc1b", b.mean, b.sd, &mut terms);

    let (seg, rrup) = scenario_segments(grid, sc)?;
    let pts: Vec<XY> = seg.iter().map(|(c, _)| grid.midpoint(*c)).collect();
    let lens: Vec<f64> = seg.iter().map(|s| s.1).collect();
    let (mut cm, cc) = condition_field(&model.c_ca, &pts)?;
    let mut clamped = 0;
    for c in cm.iter_mut() {
        if *c > 0.0 {
            *c = 0.0;
            clamped += 1;
        }
    }
    let att: f64 = cm.iter().zip(&lens).map(|(c, l)| c * l).sum();
    let mut att_var = 0.0;
    for i in 0..lens.len() {
        for j in 0..lens.len() {
            att_var += lens[i] * cc[(i, j)] * lens[j];
        }
    }
    add("attenuation", att, att_var.max(0.0).sqrt(), &mut terms);

    let median: f64 = terms.values().map(|t| t.mean).sum();
    let (tau0, phi0) = match aleatory {
        Some(a) => (a.tau0_of_mag(sc.mag, model.freq), a.phi0_of_mag(sc.mag, model.freq)),
        None => (model.tau0, model.phi0),
    };
    Ok(ScenarioPrediction {
        freq: model.freq,
        median_adjustment: median,
        epistemic_sd: var.max(0.0).sqrt(),
        ergodic_attenuation: model.c7 * rrup,
        terms,
        tau0,
        phi0,
        aleatory_total: tau0.hypot(phi0),
        clamped_cells: clamped,
        rrup,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub lon: f64,
    pub lat: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Conditioned mean and sd of `field` at each query point, with geographic coordinates.
pub fn export_coefficient_map(field: &CoefficientField, query: &[XY], zone: UtmZone) -> Result<Vec<MapRow>> {
    let (m, v) = condition_marginal(field, query)?;
    query
        .iter()
        .zip(m.into_iter().zip(v))
        .map(|(p, (mean, var))| {
            let g = unproject_from_utm(*p, zone)?;
            Ok(MapRow { lon: g.lon, lat: g.lat, mean, sd: var.sqrt() })
        })
        .collect()
}

/// Regular query lattice over a projected bounding box, `res` km apart.
pub fn query_lattice(lo: XY, hi: XY, res: f64) -> Result<Vec<XY>> {
    if !(res > 0.0) || hi.x < lo.x || hi.y < lo.y {
        return Err(Error::invalid("query lattice needs res > 0 and an ordered bounding box"));
    }
    let nx = ((hi.x - lo.x) / res).floor() as usize + 1;
    let ny = ((hi.y - lo.y) / res).floor() as usize + 1;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(XY::new(lo.x + i as f64 * res, lo.y + j as f64 * res));
        }
    }
    Ok(out)
}

pub fn write_map_csv<W: Write>(rows: &[MapRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["lon", "lat", "mean", "sd"])?;
    for r in rows {
        wr.write_record([r.lon.to_string(), r.lat.to_string(), r.mean.to_string(), r.sd.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn map_geojson(rows: &[MapRow]) -> serde_json::Value {
    let features: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [r.lon, r.lat]},
                "properties": {"mean": r.mean, "sd": r.sd},
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}
