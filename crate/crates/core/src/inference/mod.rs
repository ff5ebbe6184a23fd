//! Posterior sampling for one frequency and the two-phase protocol.

pub mod diagnostics;
pub mod gibbs;
pub mod laplace;
pub mod nuts;
pub mod slice;
pub mod smoothing;
pub mod summary;
pub mod tmvn;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FreqData, HyperName, HyperParams, HyperState, ModelParams, NcModel, Phase, Priors};
use crate::rng::{indexed, Rng};

pub use smoothing::{smooth_hyperparameters, Rule, SmoothedHyper, SmoothingRules};
pub use summary::{ParamSummary, PosteriorSummary, ESS_MIN, RHAT_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Collapsed blocked Gibbs with exact truncated-normal moves for the cells.
    Gibbs,
    /// No-U-turn HMC on the non-centered parameterization.
    Nuts,
    /// Posterior mode plus Gaussian approximation.
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub kind: SamplerKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { chains: 4, warmup: 500, draws: 500, target_accept: 0.8, max_tree_depth: 10, seed: 1, kind: SamplerKind::Gibbs }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::invalid("chains must be at least 1"));
        }
        if self.draws == 0 {
            return Err(Error::invalid("draws must be at least 1"));
        }
        if self.warmup == 0 && self.kind != SamplerKind::Laplace {
            return Err(Error::invalid("warmup must be at least 1"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target_accept must lie in (0, 1)"));
        }
        if self.max_tree_depth == 0 {
            return Err(Error::invalid("max_tree_depth must be at least 1"));
        }
        Ok(())
    }
}

/// Names of the flattened parameter vector, in [`flatten`] order.
pub fn param_names(d: &FreqData) -> Vec<String> {
    let mut v = vec!["dc0".to_string(), "dc0e_north".into(), "dc0e_south".into()];
    v.extend((0..d.eq_locs.len()).map(|i| format!("dc1e:{i}")));
    v.extend((0..d.sta_locs.len()).map(|i| format!("dc1a:{i}")));
    v.extend(d.station_ids.iter().map(|s| format!("dc1b:{s}")));
    v.extend(d.cells.iter().map(|c| format!("c_ca:{c}")));
    v.extend(d.event_ids.iter().map(|e| format!("dB:{e}")));
    v.extend(HyperName::ALL.iter().map(|h| h.label().to_string()));
    v
}

pub fn flatten(p: &ModelParams, hs: &HyperState) -> Vec<f64> {
    let mut v = vec![p.dc0, p.dc0e_north, p.dc0e_south];
    v.extend(&p.dc1e);
    v.extend(&p.dc1a);
    v.extend(&p.dc1b);
    v.extend(&p.c_ca);
    v.extend(&p.db);
    v.extend(HyperName::ALL.iter().map(|h| hs.get(*h)));
    v
}

/// Result of sampling one frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqFit {
    pub freq: f64,
    pub phase: Phase,
    pub summary: PosteriorSummary,
}

impl FreqFit {
    /// Posterior-mean hyperparameters.
    pub fn hyper_means(&self) -> Result<HyperState> {
        let mut hs = default_hyper(-0.01);
        for h in HyperName::ALL {
            let m = self
                .summary
                .mean(h.label())
                .ok_or_else(|| Error::invalid(format!("summary lacks {}", h.label())))?;
            hs.set(h, m);
        }
        Ok(hs)
    }
}

/// Starting hyperparameters near the prior bulk.
pub fn default_hyper(c7: f64) -> HyperState {
    let wca = (c7.abs() * 0.5).max(1e-4);
    HyperState {
        hyper: HyperParams {
            ell_1e: 30.0,
            omega_1e: 0.2,
            ell_1as: 30.0,
            omega_1as: 0.2,
            omega_1bs: (-0.8f64).exp(),
            ell_ca1: 30.0,
            omega_ca1: wca,
            omega_ca2: wca,
        },
        phi0: (-1.3f64).exp(),
        tau0: (-1.0f64).exp(),
    }
}

fn jitter_start(hs: &HyperState, phase: Phase, rng: &mut Rng) -> HyperState {
    let mut out = *hs;
    for h in HyperName::free(phase) {
        let z: f64 = StandardNormal.sample(rng);
        out.set(*h, hs.get(*h) * (0.3 * z).exp());
    }
    out
}

fn run_chain(
    d: &FreqData,
    phase: Phase,
    priors: &Priors,
    start: HyperState,
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = indexed(cfg.seed, &format!("chain@{}", d.freq), chain as u64);
    let start = jitter_start(&start, phase, &mut rng);
    match cfg.kind {
        SamplerKind::Gibbs => {
            let g = gibbs::Gibbs::new(d, phase, *priors);
            let mut st = g.init(start)?;
            let mut out = Vec::with_capacity(cfg.draws);
            for it in 0..(cfg.warmup + cfg.draws) {
                g.sweep(&mut st, it, it < cfg.warmup, &mut rng)?;
                if it >= cfg.warmup {
                    out.push(flatten(&st.p, &st.hs));
                }
            }
            Ok(out)
        }
        SamplerKind::Nuts | SamplerKind::Laplace => {
            let m = NcModel::new(d, phase, *priors, start);
            let mut p0 = ModelParams::zeros(d);
            p0.c_ca.iter_mut().for_each(|c| *c = d.c7.min(-1e-6));
            p0.phi0 = start.phi0;
            p0.tau0 = start.tau0;
            let x0 = m.pack(&p0, &start)?;
            let f = |x: &[f64]| m.logp_grad(x);
            let xs = if cfg.kind == SamplerKind::Nuts {
                let s = nuts::NutsSettings { target_accept: cfg.target_accept, max_tree_depth: cfg.max_tree_depth };
                let (xs, stats) = nuts::run_chain(&f, x0, cfg.warmup, cfg.draws, s, &mut rng)?;
                if stats.divergences > 0 {
                    log::warn!("{} Hz chain {chain}: {} divergent transitions", d.freq, stats.divergences);
                }
                xs
            } else {
                let (mode, _) = laplace::maximize(&f, x0, 2000, 1e-6)?;
                let h = laplace::neg_hessian_chol(&f, &mode)?;
                laplace::gaussian_draws(&mode, &h, cfg.draws, &mut rng)
            };
            xs.iter()
                .map(|x| {
                    let (p, hs) = m.unpack(x)?;
                    Ok(flatten(&p, &hs))
                })
                .collect()
        }
    }
}

/// Samples the posterior of one frequency. `start` holds the pinned values in
/// phase two and the starting point in phase one.
pub fn fit_frequency(
    d: &FreqData,
    phase: Phase,
    priors: &Priors,
    start: HyperState,
    cfg: &SamplerConfig,
) -> Result<FreqFit> {
    cfg.validate()?;
    if d.n_events() < 2 || d.n_stations() < 2 {
        return Err(Error::invalid(format!(
            "{} Hz: need at least 2 events and 2 stations, have {} and {}",
            d.freq,
            d.n_events(),
            d.n_stations()
        )));
    }
    let chains: Vec<usize> = (0..cfg.chains).collect();
    let run = |c: &usize| run_chain(d, phase, priors, start, cfg, *c);
    #[cfg(feature = "parallel")]
    let draws: Vec<Vec<Vec<f64>>> = {
        use rayon::prelude::*;
        chains.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let draws: Vec<Vec<Vec<f64>>> = chains.iter().map(run).collect::<Result<_>>()?;
    let draws = draws;
    let gated: Vec<String> = HyperName::free(phase).iter().map(|h| h.label().to_string()).collect();
    let summary = PosteriorSummary::from_draws(d.freq, param_names(d), draws, gated);
    if !summary.converged {
        log::warn!("{} Hz phase {:?}: convergence gate not met", d.freq, phase);
    }
    Ok(FreqFit { freq: d.freq, phase, summary })
}

fn stage_freq(e: Error, freq: f64) -> Error {
    match e {
        Error::Factorization(m) => Error::Factorization(format!("{freq} Hz: {m}")),
        other => other,
    }
}

/// Phase one at the dataset frequencies `freqs` (indices).
pub fn fit_phase1(ds: &Dataset, freqs: &[usize], priors: &Priors, cfg: &SamplerConfig) -> Result<Vec<FreqFit>> {
    freqs
        .iter()
        .map(|&fi| {
            let d = FreqData::new(ds, fi)?;
            fit_frequency(&d, Phase::One, priors, default_hyper(d.c7), cfg).map_err(|e| stage_freq(e, d.freq))
        })
        .collect()
}

/// Phase two with hyperparameters pinned to `smoothed`.
pub fn fit_phase2(
    ds: &Dataset,
    freqs: &[usize],
    smoothed: &SmoothedHyper,
    priors: &Priors,
    cfg: &SamplerConfig,
) -> Result<Vec<FreqFit>> {
    smoothed.validate()?;
    freqs
        .iter()
        .map(|&fi| {
            let d = FreqData::new(ds, fi)?;
            let mut hs = default_hyper(d.c7);
            hs.hyper = smoothed.at(d.freq);
            fit_frequency(&d, Phase::Two, priors, hs, cfg).map_err(|e| stage_freq(e, d.freq))
        })
        .collect()
}
