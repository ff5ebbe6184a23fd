//! End-to-end orchestration and the on-disk model bundle.
//!
//! Stages run as barriers: ingest, phase one, smoothing, phase two, aleatory,
//! correlation, bundle write. Per-frequency jobs within a stage run on up to
//! `workers` threads when the `parallel` feature is on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aleatory::{fit_phi_split, smooth_aleatory, AleatoryModel, AleatoryRaw};
use crate::cells::CellGrid;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geo::{california_regions, polygons_from_json, UtmZone};
use crate::ifcorr::{fit_correlation_model, CorrelationFit, EmpiricalCorr};
use crate::inference::{
    default_hyper, fit_frequency, smooth_hyperparameters, FreqFit, SamplerConfig, SmoothedHyper, SmoothingRules,
};
use crate::io::{ingest, C7Table, Flatfile, GridSpec, IngestOptions, IngestReport};
use crate::model::{median_nonergodic, FreqData, HyperName, ModelParams, Phase, Priors};
use crate::predict::FreqModel;
use crate::rng::substream;

pub const BUNDLE_FORMAT: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const MAG_BREAKS: (f64, f64) = (5.0, 6.5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Phases {
    /// Phase one, smoothing and phase two.
    Both,
    /// Phase one and smoothing only.
    PhaseOne,
    /// Phase two with smoothed hyperparameters taken from an existing bundle.
    PhaseTwo { hyper_from: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub flatfile: PathBuf,
    /// JSON `{"freqs": [...], "c7": [...]}`.
    pub c7: PathBuf,
    /// Region polygons as JSON; the built-in California pair when absent.
    pub polygons: Option<PathBuf>,
    pub grid: GridSpec,
    pub zone: String,
    pub output: PathBuf,
    /// Frequencies to model; all flatfile frequencies when empty.
    pub freqs: Vec<f64>,
    /// Phase-one subset; every other modelled frequency when empty.
    pub phase1_freqs: Vec<f64>,
    pub phases: Phases,
    pub sampler: SamplerConfig,
    pub smoothing: SmoothingRules,
    pub priors: Priors,
    pub seed: u64,
    pub workers: usize,
    /// Abort on a fit that misses the convergence gate instead of warning.
    pub strict_convergence: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            flatfile: PathBuf::new(),
            c7: PathBuf::new(),
            polygons: None,
            grid: GridSpec::default(),
            zone: "11N".into(),
            output: PathBuf::from("bundle"),
            freqs: vec![],
            phase1_freqs: vec![],
            phases: Phases::Both,
            sampler: SamplerConfig::default(),
            smoothing: SmoothingRules::default(),
            priors: Priors::default(),
            seed: 1,
            workers: 1,
            strict_convergence: false,
        }
    }
}

fn check_freqs(name: &str, f: &[f64]) -> Result<()> {
    if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid(format!("{name}: frequencies must be positive")));
    }
    if f.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("{name}: frequencies must be strictly increasing")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        check_freqs("freqs", &self.freqs)?;
        check_freqs("phase1_freqs", &self.phase1_freqs)?;
        UtmZone::parse(&self.zone)?;
        self.sampler.validate()?;
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        Ok(())
    }

    /// The config as stored in a bundle: output location and worker count removed,
    /// since neither changes the results.
    pub fn canonical(&self) -> Self {
        Self { output: PathBuf::new(), workers: 1, ..self.clone() }
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.canonical())?.as_bytes()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses a flatfile and its c7 sidecar, then ingests with the config's grid and polygons.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<(Dataset, IngestReport)> {
    let flat = Flatfile::read(fs::File::open(&cfg.flatfile)?)?;
    let c7 = C7Table::from_json(&fs::read_to_string(&cfg.c7)?)?;
    let regions = match &cfg.polygons {
        Some(p) => polygons_from_json(&fs::read_to_string(p)?)?,
        None => california_regions(),
    };
    let opts = IngestOptions { zone: UtmZone::parse(&cfg.zone)?, grid: cfg.grid.clone(), regions };
    ingest(&flat, &c7, &opts)
}

/// Everything a pipeline run produces. Posterior draws are held in memory only
/// until the bundle is written; a loaded bundle carries summaries without draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: PipelineConfig,
    pub zone: UtmZone,
    pub grid: CellGrid,
    pub ingest: IngestReport,
    pub phase1: Vec<FreqFit>,
    pub smoothed: Option<SmoothedHyper>,
    pub phase2: Vec<FreqFit>,
    pub models: Vec<FreqModel>,
    pub aleatory: Option<AleatoryModel>,
    pub correlation: BTreeMap<String, CorrelationFit>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Relative path → SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
}

fn freq_tag(f: f64) -> String {
    format!("{f}Hz")
}

/// Scalar and hyperparameter columns kept in the draws files.
fn draw_columns(fit: &FreqFit) -> Vec<String> {
    fit.summary.params.iter().filter(|p| !p.name.contains(':')).map(|p| p.name.clone()).collect()
}

struct Writer {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Writer {
    fn put(&mut self, rel: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, &bytes)?;
        self.files.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.put(rel, s.into_bytes())
    }

    fn fits(&mut self, dir: &str, fits: &[FreqFit]) -> Result<()> {
        if fits.is_empty() {
            return Ok(());
        }
        self.json(&format!("{dir}/fits.json"), &fits)?;
        for f in fits {
            let mut buf = Vec::new();
            f.summary.write_csv(&mut buf)?;
            self.put(&format!("{dir}/summary_{}.csv", freq_tag(f.freq)), buf)?;
            if !f.summary.draws.is_empty() {
                let mut buf = Vec::new();
                f.summary.write_draws_csv(&draw_columns(f), &mut buf)?;
                self.put(&format!("{dir}/draws_{}.csv", freq_tag(f.freq)), buf)?;
            }
        }
        Ok(())
    }
}

impl ModelBundle {
    fn empty(config: &PipelineConfig, zone: UtmZone, ds: &Dataset, ingest: IngestReport) -> Self {
        Self {
            config: config.canonical(),
            zone,
            grid: ds.grid,
            ingest,
            phase1: vec![],
            smoothed: None,
            phase2: vec![],
            models: vec![],
            aleatory: None,
            correlation: BTreeMap::new(),
            warnings: vec![],
        }
    }

    /// Writes every present artifact and the manifest; returns the manifest.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        self.save_with(dir, None)
    }

    fn save_with(&self, dir: &Path, failure: Option<(&str, &Error)>) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let mut w = Writer { root: dir.to_path_buf(), files: BTreeMap::new() };
        w.json("config.json", &self.config)?;
        w.json("zone.json", &self.zone)?;
        w.json("grid.json", &self.grid)?;
        let mut buf = Vec::new();
        self.grid.write_csv(&mut buf)?;
        w.put("grid.csv", buf)?;
        w.json("ingest.json", &self.ingest)?;
        w.fits("phase1", &self.phase1)?;
        if let Some(s) = &self.smoothed {
            w.json("smoothed_hyper.json", s)?;
        }
        w.fits("phase2", &self.phase2)?;
        if !self.models.is_empty() {
            w.json("models.json", &self.models)?;
        }
        if let Some(a) = &self.aleatory {
            w.json("aleatory.json", a)?;
        }
        if !self.correlation.is_empty() {
            w.json("correlation.json", &self.correlation)?;
        }
        w.json("warnings.json", &self.warnings)?;
        if let Some((stage, e)) = failure {
            w.json("error.json", &serde_json::json!({ "stage": stage, "message": e.to_string() }))?;
        }
        let manifest =
            Manifest { format: BUNDLE_FORMAT, config_hash: self.config.hash()?, seed: self.config.seed, files: w.files };
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        fs::write(dir.join(MANIFEST), s)?;
        Ok(manifest)
    }

    /// Reads a bundle after checking every file against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = verify_bundle(dir)?;
        if manifest.files.contains_key("error.json") {
            return Err(Error::invalid(format!("{} holds partial diagnostics of a failed run", dir.display())));
        }
        let read = |rel: &str| -> Result<Option<String>> {
            if manifest.files.contains_key(rel) {
                Ok(Some(fs::read_to_string(dir.join(rel))?))
            } else {
                Ok(None)
            }
        };
        let req = |rel: &str| read(rel)?.ok_or_else(|| Error::invalid(format!("bundle lacks {rel}")));
        let opt = |rel: &str| -> Result<Option<String>> { read(rel) };
        let fits = |rel: &str| -> Result<Vec<FreqFit>> {
            Ok(match opt(rel)? {
                Some(s) => serde_json::from_str(&s)?,
                None => vec![],
            })
        };
        Ok(Self {
            config: serde_json::from_str(&req("config.json")?)?,
            zone: serde_json::from_str(&req("zone.json")?)?,
            grid: serde_json::from_str(&req("grid.json")?)?,
            ingest: serde_json::from_str(&req("ingest.json")?)?,
            phase1: fits("phase1/fits.json")?,
            smoothed: opt("smoothed_hyper.json")?.map(|s| serde_json::from_str(&s)).transpose()?,
            phase2: fits("phase2/fits.json")?,
            models: opt("models.json")?.map(|s| serde_json::from_str(&s)).transpose()?.unwrap_or_default(),
            aleatory: opt("aleatory.json")?.map(|s| serde_json::from_str(&s)).transpose()?,
            correlation: opt("correlation.json")?.map(|s| serde_json::from_str(&s)).transpose()?.unwrap_or_default(),
            warnings: serde_json::from_str(&req("warnings.json")?)?,
        })
    }
}

/// Checks file hashes and the config hash; returns the manifest.
pub fn verify_bundle(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::invalid(format!("bundle format {} is not supported", manifest.format)));
    }
    for (rel, want) in &manifest.files {
        let got = sha256_hex(&fs::read(dir.join(rel))?);
        if &got != want {
            return Err(Error::invalid(format!("{rel}: content does not match the manifest")));
        }
    }
    let cfg: PipelineConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    if cfg.hash()? != manifest.config_hash {
        return Err(Error::invalid("config hash does not match the manifest"));
    }
    Ok(manifest)
}

/// SHA-256 of the manifest, which covers every bundle file.
pub fn bundle_hash(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(dir.join(MANIFEST))?))
}

fn run_jobs<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    items.iter().map(f).collect()
}

/// Posterior-mean parameters of a fit, in the local indexing of `d`.
pub fn mean_params(d: &FreqData, fit: &FreqFit) -> Result<ModelParams> {
    let s = &fit.summary;
    let blk = |prefix: &str, n: usize| -> Result<Vec<f64>> {
        let (m, _) = s.block(prefix);
        if m.len() != n {
            return Err(Error::invalid(format!("{} Hz: summary has {} {prefix} entries, expected {n}", fit.freq, m.len())));
        }
        Ok(m)
    };
    let scalar = |name: &str| s.mean(name).ok_or_else(|| Error::invalid(format!("summary lacks {name}")));
    Ok(ModelParams {
        dc0: scalar("dc0")?,
        dc0e_north: scalar("dc0e_north")?,
        dc0e_south: scalar("dc0e_south")?,
        dc1e: blk("dc1e:", d.eq_locs.len())?,
        dc1a: blk("dc1a:", d.sta_locs.len())?,
        dc1b: blk("dc1b:", d.n_stations())?,
        c_ca: blk("c_ca:", d.n_cells())?,
        db: blk("dB:", d.n_events())?,
        phi0: scalar(HyperName::Phi0.label())?,
        tau0: scalar(HyperName::Tau0.label())?,
    })
}

/// Raw `(τ0, φ0M1, φ0M2)` at one frequency from posterior-mean within-event residuals.
pub fn aleatory_raw(d: &FreqData, fit: &FreqFit) -> Result<AleatoryRaw> {
    let p = mean_params(d, fit)?;
    let mut dw = Vec::with_capacity(d.n_records());
    for i in 0..d.n_records() {
        dw.push(d.y[i] - median_nonergodic(d, i, &p)? - p.db[d.rec_event[i]]);
    }
    let (phi0_m1, phi0_m2) = fit_phi_split(&dw, &d.mag, MAG_BREAKS)?;
    Ok(AleatoryRaw { tau0: p.tau0, phi0_m1, phi0_m2 })
}

/// Posterior means of each correlated term keyed by event, station or cell id.
pub fn term_values(d: &FreqData, fit: &FreqFit) -> Result<BTreeMap<&'static str, BTreeMap<String, f64>>> {
    let p = mean_params(d, fit)?;
    let mut out: BTreeMap<&'static str, BTreeMap<String, f64>> = BTreeMap::new();
    let e = out.entry("dc1e").or_default();
    for (k, id) in d.event_ids.iter().enumerate() {
        e.insert(id.clone(), p.dc1e[d.event_loc[k]]);
    }
    let a = out.entry("dc1a").or_default();
    for (k, id) in d.station_ids.iter().enumerate() {
        a.insert(id.clone(), p.dc1a[d.station_loc[k]]);
    }
    let b = out.entry("dc1b").or_default();
    for (k, id) in d.station_ids.iter().enumerate() {
        b.insert(id.clone(), p.dc1b[k]);
    }
    let c = out.entry("c_ca").or_default();
    for (k, id) in d.cells.iter().enumerate() {
        c.insert(id.to_string(), p.c_ca[k]);
    }
    Ok(out)
}

fn pick_freqs(ds: &Dataset, want: &[f64]) -> Result<Vec<usize>> {
    if want.is_empty() {
        return Ok((0..ds.freqs.len()).collect());
    }
    want.iter()
        .map(|&f| ds.freq_index(f).ok_or_else(|| Error::MissingFrequency { freq: f, available: ds.freqs.clone() }))
        .collect()
}

fn stage_seed(root: u64, stage: &str) -> u64 {
    substream(root, stage).random()
}

/// Runs the configured stages and writes the bundle to `cfg.output`. A failing
/// stage writes what was produced so far plus `error.json` and returns a stage error.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ModelBundle> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let zone = UtmZone::parse(&cfg.zone).map_err(|e| e.in_stage("config"))?;
    let (ds, report) = load_dataset(cfg).map_err(|e| e.in_stage("ingest"))?;
    let mut bundle = ModelBundle::empty(cfg, zone, &ds, report);
    bundle.warnings.extend(bundle.ingest.warnings.iter().cloned());
    match stages(cfg, &ds, &mut bundle) {
        Ok(()) => {
            bundle.save(&cfg.output).map_err(|e| e.in_stage("bundle"))?;
            Ok(bundle)
        }
        Err((stage, e)) => {
            if let Err(w) = bundle.save_with(&cfg.output, Some((stage, &e))) {
                log::error!("could not persist partial diagnostics: {w}");
            }
            Err(e.in_stage(stage))
        }
    }
}

fn warn(bundle: &mut ModelBundle, msg: String) {
    log::warn!("{msg}");
    bundle.warnings.push(msg);
}

fn check_gate(cfg: &PipelineConfig, bundle: &mut ModelBundle, fits: &[FreqFit]) -> Result<()> {
    for f in fits.iter().filter(|f| !f.summary.converged) {
        let msg = format!("{} Hz phase {:?}: convergence gate not met", f.freq, f.phase);
        if cfg.strict_convergence {
            return Err(Error::Convergence(msg));
        }
        bundle.warnings.push(msg);
    }
    Ok(())
}

type StageResult = std::result::Result<(), (&'static str, Error)>;

fn stages(cfg: &PipelineConfig, ds: &Dataset, bundle: &mut ModelBundle) -> StageResult {
    let all = pick_freqs(ds, &cfg.freqs).map_err(|e| ("ingest", e))?;
    let data: Vec<FreqData> = all.iter().map(|&fi| FreqData::new(ds, fi)).collect::<Result<_>>().map_err(|e| ("ingest", e))?;

    let smoothed = match &cfg.phases {
        Phases::PhaseTwo { hyper_from } => {
            let prior = ModelBundle::load(hyper_from).map_err(|e| ("smooth", e))?;
            let s = prior
                .smoothed
                .ok_or_else(|| ("smooth", Error::invalid(format!("{} has no smoothed hyperparameters", hyper_from.display()))))?;
            bundle.phase1 = prior.phase1;
            s
        }
        Phases::Both | Phases::PhaseOne => {
            let p1: Vec<usize> = if cfg.phase1_freqs.is_empty() {
                (0..data.len()).step_by(2).collect()
            } else {
                let idx = pick_freqs(ds, &cfg.phase1_freqs).map_err(|e| ("phase1", e))?;
                idx.iter()
                    .map(|fi| {
                        all.iter().position(|a| a == fi).ok_or_else(|| {
                            Error::invalid(format!("phase-one frequency {} Hz is not among the modelled frequencies", ds.freqs[*fi]))
                        })
                    })
                    .collect::<Result<_>>()
                    .map_err(|e| ("phase1", e))?
            };
            let mut sc = cfg.sampler.clone();
            sc.seed = stage_seed(cfg.seed, "phase1");
            let fits = run_jobs(cfg.workers, &p1, |&k| {
                let d = &data[k];
                fit_frequency(d, Phase::One, &cfg.priors, default_hyper(d.c7), &sc)
            })
            .map_err(|e| ("phase1", e))?;
            check_gate(cfg, bundle, &fits).map_err(|e| ("phase1", e))?;
            bundle.phase1 = fits;
            let s = if bundle.phase1.len() >= 3 {
                let sums: Vec<_> = bundle.phase1.iter().map(|f| f.summary.clone()).collect();
                let (s, w) = smooth_hyperparameters(&sums, &cfg.smoothing).map_err(|e| ("smooth", e))?;
                bundle.warnings.extend(w);
                s
            } else {
                let msg = format!(
                    "{} phase-one frequencies are too few to smooth; posterior means are interpolated directly",
                    bundle.phase1.len()
                );
                warn(bundle, msg);
                let mut fits: Vec<&FreqFit> = bundle.phase1.iter().collect();
                fits.sort_by(|a, b| a.freq.total_cmp(&b.freq));
                let values = fits
                    .iter()
                    .map(|f| f.hyper_means().map(|h| h.hyper))
                    .collect::<Result<_>>()
                    .map_err(|e| ("smooth", e))?;
                SmoothedHyper { freqs: fits.iter().map(|f| f.freq).collect(), values }
            };
            s.validate().map_err(|e| ("smooth", e))?;
            s
        }
    };
    bundle.smoothed = Some(smoothed.clone());
    if cfg.phases == Phases::PhaseOne {
        return Ok(());
    }

    let mut sc = cfg.sampler.clone();
    sc.seed = stage_seed(cfg.seed, "phase2");
    let idx: Vec<usize> = (0..data.len()).collect();
    let fits = run_jobs(cfg.workers, &idx, |&k| {
        let d = &data[k];
        let mut hs = default_hyper(d.c7);
        hs.hyper = smoothed.at(d.freq);
        fit_frequency(d, Phase::Two, &cfg.priors, hs, &sc)
    })
    .map_err(|e| ("phase2", e))?;
    check_gate(cfg, bundle, &fits).map_err(|e| ("phase2", e))?;
    bundle.models = data
        .iter()
        .zip(&fits)
        .map(|(d, f)| FreqModel::from_fit(d, f))
        .collect::<Result<_>>()
        .map_err(|e| ("phase2", e))?;
    bundle.phase2 = fits;

    let freqs: Vec<f64> = data.iter().map(|d| d.freq).collect();
    if freqs.len() > crate::aleatory::DEGREE {
        let raw = data
            .iter()
            .zip(&bundle.phase2)
            .map(|(d, f)| aleatory_raw(d, f))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| ("aleatory", e))?;
        let model = smooth_aleatory(&freqs, &raw).map_err(|e| ("aleatory", e))?;
        bundle.warnings.extend(model.warnings.iter().cloned());
        bundle.aleatory = Some(model);
    } else {
        warn(bundle, format!("aleatory smoothing skipped: {} frequencies, need {}", freqs.len(), crate::aleatory::DEGREE + 1));
    }

    let mut per_term: BTreeMap<&'static str, Vec<(f64, BTreeMap<String, f64>)>> = BTreeMap::new();
    for (d, f) in data.iter().zip(&bundle.phase2) {
        for (term, vals) in term_values(d, f).map_err(|e| ("correlation", e))? {
            per_term.entry(term).or_default().push((d.freq, vals));
        }
    }
    for (term, per_freq) in per_term {
        let emp = EmpiricalCorr::from_values(&per_freq);
        match fit_correlation_model(&emp) {
            Ok(fit) => {
                if fit.degenerate {
                    warn(bundle, format!("{term}: correlation fit is degenerate"));
                }
                bundle.correlation.insert(term.to_string(), fit);
            }
            Err(Error::Invalid(m)) => warn(bundle, format!("{term}: correlation fit skipped: {m}")),
            Err(e) => return Err(("correlation", e)),
        }
    }
    Ok(())
}
