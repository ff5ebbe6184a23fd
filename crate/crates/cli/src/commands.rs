use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use negmm::geo::{classify_region, project_to_utm, GeoPoint, Region, RegionPolygon};
use negmm::ifcorr::{fit_correlation_model, sample_correlated_terms, reference_models, CorrelationFit, EmpiricalCorr};
use negmm::inference::{default_hyper, fit_frequency, smooth_hyperparameters, FreqFit, SamplerKind, SmoothedHyper};
use negmm::io::GridSpec;
use negmm::model::{FreqData, Phase};
use negmm::pipeline::{load_dataset, run_pipeline, term_values, ModelBundle, PipelineConfig};
use negmm::predict::{export_coefficient_map, map_geojson, model_at, predict_scenario, query_lattice, write_map_csv, Scenario, Term};
use negmm::rng::substream;
use negmm::validate::{crossval, generate_synthetic, CrossvalOptions, SyntheticSpec};
use negmm::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, DataArgs, Global, SamplerArgs, SamplerChoice};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Run { data, sampler, out, strict } => run(g, data, sampler, out.as_deref(), *strict),
        Command::Ingest { data, out } => ingest(g, data, out),
        Command::Fit { phase, data, sampler, freqs, hyper, out } => fit(g, *phase, data, sampler, freqs, hyper.as_deref(), out),
        Command::Smooth { fits, out } => smooth(g, fits, out),
        Command::Predict { scenario, model, freqs, no_condition_event, out } => {
            predict(scenario, model, freqs, !no_condition_event, out)
        }
        Command::Map { model, term, freq, bbox, res_km, out } => map(model, term, *freq, bbox, *res_km, out),
        Command::Correlate { model, terms, out } => correlate(model, terms, out),
        Command::SampleSpectra { model, term, n, reference, out } => sample_spectra(g, model, term, *n, *reference, out),
        Command::Crossval { data, sampler, freq, k, model, no_condition_event, out } => {
            cross_validate(g, data, sampler, *freq, *k, model.as_deref(), !no_condition_event, out)
        }
        Command::Synth { spec, out } => synth(g, spec.as_deref(), out),
    }
}

fn config(g: &Global, data: &DataArgs, sampler: &SamplerArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(p) = &data.flatfile {
        cfg.flatfile = p.clone();
    }
    if let Some(p) = &data.c7 {
        cfg.c7 = p.clone();
    }
    if let Some(p) = &data.grid {
        cfg.grid = read_grid(p)?;
    }
    if let Some(p) = &data.polygons {
        cfg.polygons = Some(p.clone());
    }
    if let Some(z) = &data.zone {
        cfg.zone = z.clone();
    }
    let sc = &mut cfg.sampler;
    if let Some(k) = sampler.sampler {
        sc.kind = match k {
            SamplerChoice::Gibbs => SamplerKind::Gibbs,
            SamplerChoice::Nuts => SamplerKind::Nuts,
            SamplerChoice::Laplace => SamplerKind::Laplace,
        };
    }
    if let Some(v) = sampler.chains {
        sc.chains = v;
    }
    if let Some(v) = sampler.warmup {
        sc.warmup = v;
    }
    if let Some(v) = sampler.draws {
        sc.draws = v;
    }
    if cfg.flatfile.as_os_str().is_empty() || cfg.c7.as_os_str().is_empty() {
        return Err(Error::invalid("a flatfile and a c7 table are required (--flatfile/--c7 or --config)"));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Accepts either a tagged grid spec or a bare cell grid.
fn read_grid(p: &Path) -> Result<GridSpec> {
    let text = fs::read_to_string(p)?;
    if let Ok(spec) = serde_json::from_str::<GridSpec>(&text) {
        return Ok(spec);
    }
    let grid: negmm::cells::CellGrid = serde_json::from_str(&text)?;
    grid.validate()?;
    Ok(GridSpec::Explicit(grid))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn run(g: &Global, data: &DataArgs, sampler: &SamplerArgs, out: Option<&Path>, strict: bool) -> Result<()> {
    let mut cfg = config(g, data, sampler)?;
    if let Some(o) = out {
        cfg.output = o.to_path_buf();
    }
    cfg.strict_convergence |= strict;
    let b = run_pipeline(&cfg)?;
    println!(
        "bundle {}: {} records, {} phase-one fits, {} phase-two fits, {} correlation models, {} warnings",
        cfg.output.display(),
        b.ingest.records,
        b.phase1.len(),
        b.phase2.len(),
        b.correlation.len(),
        b.warnings.len()
    );
    for w in &b.warnings {
        log::warn!("{w}");
    }
    Ok(())
}

fn ingest(g: &Global, data: &DataArgs, out: &Path) -> Result<()> {
    let cfg = config(g, data, &SamplerArgs::default())?;
    let (ds, report) = load_dataset(&cfg)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("ingest.json"), &report)?;
    write_json(&out.join("grid.json"), &ds.grid)?;
    ds.grid.write_csv(create(&out.join("grid.csv"))?)?;
    let ids: Vec<String> = ds.records.iter().map(|r| format!("{}:{}", r.event_id, r.station_id)).collect();
    ds.seg.write_triplets(&ids, create(&out.join("segments.csv"))?)?;
    println!(
        "{} rows: {} records, {} events, {} stations, {} cells crossed, {} dropped",
        report.rows_read, report.records, report.events, report.stations, report.cells_crossed, report.dropped_no_residual
    );
    Ok(())
}

fn write_fits(out: &Path, fits: &[FreqFit]) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("fits.json"), &fits)?;
    for f in fits {
        f.summary.write_csv(create(&out.join(format!("summary_{}Hz.csv", f.freq)))?)?;
        let cols: Vec<String> =
            f.summary.params.iter().filter(|p| !p.name.contains(':')).map(|p| p.name.clone()).collect();
        f.summary.write_draws_csv(&cols, create(&out.join(format!("draws_{}Hz.csv", f.freq)))?)?;
    }
    Ok(())
}

fn unconverged(fits: &[FreqFit]) -> Result<()> {
    let bad: Vec<String> = fits.iter().filter(|f| !f.summary.converged).map(|f| format!("{} Hz", f.freq)).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Convergence(format!("convergence gate not met at {}", bad.join(", "))))
    }
}

fn fit(
    g: &Global,
    phase: u8,
    data: &DataArgs,
    sampler: &SamplerArgs,
    freqs: &[f64],
    hyper: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = config(g, data, sampler)?;
    let (ds, _) = load_dataset(&cfg)?;
    let idx: Vec<usize> = if freqs.is_empty() {
        (0..ds.freqs.len()).collect()
    } else {
        freqs
            .iter()
            .map(|&f| ds.freq_index(f).ok_or_else(|| Error::MissingFrequency { freq: f, available: ds.freqs.clone() }))
            .collect::<Result<_>>()?
    };
    let smoothed: Option<SmoothedHyper> = match (phase, hyper) {
        (2, Some(p)) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        (2, None) => return Err(Error::invalid("phase 2 needs --hyper with smoothed hyperparameters")),
        _ => None,
    };
    let (stage, ph) = if phase == 1 { ("phase1", Phase::One) } else { ("phase2", Phase::Two) };
    let mut sc = cfg.sampler.clone();
    sc.seed = substream(cfg.seed, stage).random();
    let mut fits = Vec::with_capacity(idx.len());
    for fi in idx {
        let d = FreqData::new(&ds, fi)?;
        let mut hs = default_hyper(d.c7);
        if let Some(s) = &smoothed {
            s.validate()?;
            hs.hyper = s.at(d.freq);
        }
        log::info!("fitting {} Hz, phase {phase}", d.freq);
        fits.push(fit_frequency(&d, ph, &cfg.priors, hs, &sc)?);
    }
    write_fits(out, &fits)?;
    for f in &fits {
        println!("{} Hz: converged {}", f.freq, f.summary.converged);
    }
    unconverged(&fits)
}

fn smooth(g: &Global, fits: &Path, out: &Path) -> Result<()> {
    let path = if fits.is_dir() { fits.join("fits.json") } else { fits.to_path_buf() };
    let fits: Vec<FreqFit> = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let rules = match &g.config {
        Some(p) => PipelineConfig::load(p)?.smoothing,
        None => Default::default(),
    };
    let sums: Vec<_> = fits.iter().map(|f| f.summary.clone()).collect();
    let (s, warnings) = smooth_hyperparameters(&sums, &rules)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    write_json(out, &s)?;
    println!("smoothed hyperparameters at {} frequencies", s.freqs.len());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ScenarioInput {
    eq: GeoPoint,
    sta: GeoPoint,
    /// Closest point on the rupture; the epicentre when absent.
    cls: Option<GeoPoint>,
    #[serde(default)]
    cls_depth_km: f64,
    mag: f64,
    rrup_km: Option<f64>,
    station_id: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(ScenarioInput),
    Many(Vec<ScenarioInput>),
}

fn regions(b: &ModelBundle) -> Result<Vec<RegionPolygon>> {
    match &b.config.polygons {
        Some(p) => negmm::geo::polygons_from_json(&fs::read_to_string(p)?),
        None => Ok(negmm::geo::california_regions()),
    }
}

fn predict(scenario: &Path, model: &Path, freqs: &[f64], condition_event: bool, out: &Path) -> Result<()> {
    let b = ModelBundle::load(model)?;
    let polys = regions(&b)?;
    let inputs = match serde_json::from_str(&fs::read_to_string(scenario)?)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    };
    let freqs: Vec<f64> = if freqs.is_empty() { b.models.iter().map(|m| m.freq).collect() } else { freqs.to_vec() };
    let mut wr = csv::Writer::from_writer(create(out)?);
    let terms = ["dc0", "dc0e", "dc1e", "dc1a", "dc1b", "attenuation"];
    let mut header: Vec<String> = [
        "scenario",
        "freq_hz",
        "median_adjustment",
        "residual_prediction",
        "epistemic_sd",
        "tau0",
        "phi0",
        "aleatory_sd",
        "rrup_km",
        "clamped_cells",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for t in terms {
        header.push(format!("{t}_mean"));
        header.push(format!("{t}_sd"));
    }
    wr.write_record(&header).map_err(Error::from)?;
    for (k, s) in inputs.iter().enumerate() {
        let cls = s.cls.unwrap_or(s.eq);
        let region = classify_region(s.eq, &polys).and_then(Region::from_label);
        let sc = Scenario {
            eq: project_to_utm(s.eq, b.zone)?,
            sta: project_to_utm(s.sta, b.zone)?,
            cls: project_to_utm(cls, b.zone)?,
            cls_depth: s.cls_depth_km,
            mag: s.mag,
            rrup: s.rrup_km,
            station_id: s.station_id.clone(),
            region,
        };
        for &f in &freqs {
            let m = model_at(&b.models, f)?;
            let p = predict_scenario(m, &b.grid, &sc, b.aleatory.as_ref(), condition_event)?;
            let mut row = vec![
                k.to_string(),
                p.freq.to_string(),
                p.median_adjustment.to_string(),
                p.residual_prediction().to_string(),
                p.epistemic_sd.to_string(),
                p.tau0.to_string(),
                p.phi0.to_string(),
                p.aleatory_total.to_string(),
                p.rrup.to_string(),
                p.clamped_cells.to_string(),
            ];
            for t in terms {
                let v = &p.terms[t];
                row.push(v.mean.to_string());
                row.push(v.sd.to_string());
            }
            wr.write_record(&row).map_err(Error::from)?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn map(model: &Path, term: &str, freq: f64, bbox: &[f64], res_km: f64, out: &Path) -> Result<()> {
    let b = ModelBundle::load(model)?;
    let m = model_at(&b.models, freq)?;
    let field = m.field(Term::parse(term)?);
    let [lon0, lat0, lon1, lat1] = bbox else {
        return Err(Error::invalid("--bbox takes lon_min,lat_min,lon_max,lat_max"));
    };
    let corners = [(*lat0, *lon0), (*lat0, *lon1), (*lat1, *lon0), (*lat1, *lon1)]
        .iter()
        .map(|&(la, lo)| project_to_utm(GeoPoint::new(la, lo), b.zone))
        .collect::<Result<Vec<_>>>()?;
    let lo = negmm::geo::XY::new(
        corners.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
        corners.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
    );
    let hi = negmm::geo::XY::new(
        corners.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
        corners.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
    );
    let pts = query_lattice(lo, hi, res_km)?;
    let rows = export_coefficient_map(field, &pts, b.zone)?;
    if is_csv(out) {
        write_map_csv(&rows, create(out)?)?;
    } else {
        write_json(out, &map_geojson(&rows))?;
    }
    println!("{} points written to {}", rows.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct CorrelateReport {
    models: BTreeMap<String, CorrelationFit>,
    skipped: BTreeMap<String, String>,
}

fn correlate(model: &Path, terms: &[String], out: &Path) -> Result<()> {
    const KNOWN: [&str; 4] = ["dc1e", "dc1a", "dc1b", "c_ca"];
    let terms: Vec<&str> = terms.iter().map(|t| if t == "cca" { "c_ca" } else { t.as_str() }).collect();
    if let Some(t) = terms.iter().find(|t| !KNOWN.contains(t)) {
        return Err(Error::invalid(format!("unknown term {t:?}; expected one of {KNOWN:?}")));
    }
    let b = ModelBundle::load(model)?;
    if b.phase2.is_empty() {
        return Err(Error::invalid(format!("{} has no phase-two fits", model.display())));
    }
    let (ds, _) = load_dataset(&b.config)?;
    let mut per_term: BTreeMap<&str, Vec<(f64, BTreeMap<String, f64>)>> = BTreeMap::new();
    for f in &b.phase2 {
        let fi = ds
            .freq_index(f.freq)
            .ok_or_else(|| Error::MissingFrequency { freq: f.freq, available: ds.freqs.clone() })?;
        let d = FreqData::new(&ds, fi)?;
        for (t, vals) in term_values(&d, f)? {
            if terms.contains(&t) {
                per_term.entry(t).or_default().push((f.freq, vals));
            }
        }
    }
    let mut report = CorrelateReport { models: BTreeMap::new(), skipped: BTreeMap::new() };
    for (t, per_freq) in per_term {
        match fit_correlation_model(&EmpiricalCorr::from_values(&per_freq)) {
            Ok(fit) => {
                report.models.insert(t.to_string(), fit);
            }
            Err(Error::Invalid(m)) => {
                log::warn!("{t}: {m}");
                report.skipped.insert(t.to_string(), m);
            }
            Err(e) => return Err(e),
        }
    }
    write_json(out, &report)?;
    println!("{} models fitted, {} skipped", report.models.len(), report.skipped.len());
    Ok(())
}

fn sample_spectra(g: &Global, model: &Path, term: &str, n: usize, reference: bool, out: &Path) -> Result<()> {
    let b = ModelBundle::load(model)?;
    let term = if term == "cca" { "c_ca" } else { term };
    let corr = if reference {
        reference_models().into_iter().find(|(t, _)| *t == term).map(|(_, m)| m)
    } else {
        b.correlation.get(term).map(|f| f.model)
    }
    .ok_or_else(|| Error::invalid(format!("no correlation model for {term:?}; try --reference")))?;
    let freqs: Vec<f64> = b.models.iter().map(|m| m.freq).collect();
    let sds: Vec<f64> = b
        .models
        .iter()
        .map(|m| match term {
            "dc1e" => Ok(m.dc1e.kernel.variance().sqrt()),
            "dc1a" => Ok(m.dc1a.kernel.variance().sqrt()),
            "dc1b" => Ok(m.omega_1bs),
            "c_ca" => Ok(m.c_ca.kernel.variance().sqrt()),
            _ => Err(Error::invalid(format!("unknown term {term:?}"))),
        })
        .collect::<Result<_>>()?;
    let mut rng = substream(g.seed.unwrap_or(b.config.seed), "sample-spectra");
    let mut wr = csv::Writer::from_writer(create(out)?);
    wr.write_record(["sample", "freq_hz", "value"]).map_err(Error::from)?;
    for s in 0..n {
        let v = sample_correlated_terms(&corr, &sds, &freqs, &mut rng)?;
        for (f, x) in freqs.iter().zip(v) {
            wr.write_record([s.to_string(), f.to_string(), x.to_string()]).map_err(Error::from)?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cross_validate(
    g: &Global,
    data: &DataArgs,
    sampler: &SamplerArgs,
    freq: Option<f64>,
    k: usize,
    model: Option<&Path>,
    condition_event: bool,
    out: &Path,
) -> Result<()> {
    let cfg = config(g, data, sampler)?;
    let (ds, _) = load_dataset(&cfg)?;
    if ds.freqs.is_empty() {
        return Err(Error::invalid("dataset has no frequencies"));
    }
    let fi = match freq {
        Some(f) => ds.freq_index(f).ok_or_else(|| Error::MissingFrequency { freq: f, available: ds.freqs.clone() })?,
        None => ds.freqs.len() / 2,
    };
    let d = FreqData::new(&ds, fi)?;
    let mut pinned = default_hyper(d.c7);
    match model {
        Some(p) => {
            let b = ModelBundle::load(p)?;
            let s = b.smoothed.ok_or_else(|| Error::invalid(format!("{} has no smoothed hyperparameters", p.display())))?;
            pinned.hyper = s.at(d.freq);
        }
        None => {
            let mut sc = cfg.sampler.clone();
            sc.seed = substream(cfg.seed, "phase1").random();
            let fit = fit_frequency(&d, Phase::One, &cfg.priors, pinned, &sc)?;
            unconverged(std::slice::from_ref(&fit))?;
            pinned = fit.hyper_means()?;
        }
    }
    let opts = CrossvalOptions { k, seed: cfg.seed, condition_event, sampler: cfg.sampler.clone(), priors: cfg.priors.clone() };
    let report = crossval(&ds, fi, pinned, &opts)?;
    if is_csv(out) {
        report.write_csv(create(out)?)?;
    } else {
        write_json(out, &report)?;
    }
    println!(
        "{} Hz: mean rmse non-ergodic {:.4}, ergodic {:.4}, ratio {:.4}",
        report.freq, report.mean_rmse_nonergodic, report.mean_rmse_ergodic, report.ratio
    );
    Ok(())
}

fn synth(g: &Global, spec: Option<&Path>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let (flat, truth) = generate_synthetic(&spec)?;
    fs::create_dir_all(out)?;
    flat.write(create(&out.join("flatfile.csv"))?)?;
    write_json(&out.join("c7.json"), &negmm::io::C7Table { freqs: spec.freqs.clone(), c7: spec.c7.clone() })?;
    write_json(&out.join("grid.json"), &spec.grid())?;
    write_json(&out.join("spec.json"), &spec)?;
    write_json(&out.join("truth.json"), &truth)?;
    println!("{} records written to {}", flat.rows.len(), out.join("flatfile.csv").display());
    Ok(())
}

