//! Per-parameter posterior summaries and draw storage.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::diagnostics::{ess, quantile, split_rhat};
use crate::error::Result;

/// Convergence thresholds on the free hyperparameters.
pub const RHAT_MAX: f64 = 1.05;
pub const ESS_MIN: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
    pub ess: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub freq: f64,
    pub params: Vec<ParamSummary>,
    /// Names whose diagnostics decide convergence.
    pub gated: Vec<String>,
    pub converged: bool,
    /// `draws[chain][iteration][param]`, in `params` order.
    #[serde(skip)]
    pub draws: Vec<Vec<Vec<f64>>>,
}

impl PosteriorSummary {
    pub fn from_draws(freq: f64, names: Vec<String>, draws: Vec<Vec<Vec<f64>>>, gated: Vec<String>) -> Self {
        let mut params = Vec::with_capacity(names.len());
        for (k, name) in names.into_iter().enumerate() {
            let chains: Vec<Vec<f64>> = draws.iter().map(|c| c.iter().map(|d| d[k]).collect()).collect();
            let mut all: Vec<f64> = chains.iter().flatten().copied().collect();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let var = if all.len() > 1 {
                all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            all.sort_by(f64::total_cmp);
            params.push(ParamSummary {
                name,
                mean,
                sd: var.max(0.0).sqrt(),
                q05: quantile(&all, 0.05),
                q95: quantile(&all, 0.95),
                ess: ess(&chains),
                rhat: split_rhat(&chains),
            });
        }
        let converged = gated.iter().all(|g| {
            params
                .iter()
                .find(|p| &p.name == g)
                .is_some_and(|p| p.rhat < RHAT_MAX && p.ess >= ESS_MIN)
        });
        Self { freq, params, gated, converged, draws }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.get(name).map(|p| p.mean)
    }

    /// Means and standard deviations of every parameter whose name starts with `prefix`.
    pub fn block(&self, prefix: &str) -> (Vec<f64>, Vec<f64>) {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.mean, p.sd))
            .unzip()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["freq", "param", "mean", "sd", "q05", "q95", "ess", "rhat"])?;
        for p in &self.params {
            wr.write_record([
                self.freq.to_string(),
                p.name.clone(),
                p.mean.to_string(),
                p.sd.to_string(),
                p.q05.to_string(),
                p.q95.to_string(),
                p.ess.to_string(),
                p.rhat.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Long-format draws (`chain, draw, param, value`) restricted to `names`.
    pub fn write_draws_csv<W: Write>(&self, names: &[String], w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["freq", "chain", "draw", "param", "value"])?;
        let idx: Vec<(usize, &String)> =
            names.iter().filter_map(|n| self.index(n).map(|i| (i, n))).collect();
        for (c, chain) in self.draws.iter().enumerate() {
            for (d, row) in chain.iter().enumerate() {
                for (i, n) in &idx {
                    wr.write_record([
                        self.freq.to_string(),
                        c.to_string(),
                        d.to_string(),
                        (*n).clone(),
                        row[*i].to_string(),
                    ])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}
