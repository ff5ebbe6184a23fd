//! Smoothing of per-frequency hyperparameter estimates before the second phase.

use faer::Mat;
use serde::{Deserialize, Serialize};

use super::summary::PosteriorSummary;
use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::model::{HyperName, HyperParams};

/// How one hyperparameter is smoothed across frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Rule {
    /// Per-frequency posterior means unchanged.
    Raw,
    /// Average over all frequencies.
    Average,
    /// Least-squares hinge (piecewise-linear) fit in ln f with knots in Hz,
    /// using only frequencies at or below `fit_below` Hz.
    Hinge { knots: Vec<f64>, fit_below: f64 },
    /// Running median of the given odd width.
    Median { width: usize },
    /// Average of the estimates below `cutoff`.
    AverageBelow { cutoff: f64 },
    /// Isotonic fit (increasing or decreasing, whichever fits better).
    Monotone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingRules {
    pub ell_1e: Rule,
    pub omega_1e: Rule,
    pub ell_1as: Rule,
    pub omega_1as: Rule,
    pub omega_1bs: Rule,
    pub ell_ca1: Rule,
    pub omega_ca1: Rule,
    pub omega_ca2: Rule,
    /// Above this frequency the part of ω1e removed by smoothing is added to ω1a
    /// in root-sum-square.
    pub transfer_above: Option<f64>,
}

impl Default for SmoothingRules {
    fn default() -> Self {
        Self {
            ell_1e: Rule::Average,
            omega_1e: Rule::Average,
            ell_1as: Rule::Median { width: 3 },
            omega_1as: Rule::Hinge { knots: vec![0.5, 5.0, 15.0], fit_below: 15.0 },
            omega_1bs: Rule::Median { width: 3 },
            ell_ca1: Rule::AverageBelow { cutoff: 75.0 },
            omega_ca1: Rule::Monotone,
            omega_ca2: Rule::Monotone,
            transfer_above: Some(15.0),
        }
    }
}

impl SmoothingRules {
    fn rule(&self, h: HyperName) -> &Rule {
        match h {
            HyperName::Ell1e => &self.ell_1e,
            HyperName::Omega1e => &self.omega_1e,
            HyperName::Ell1as => &self.ell_1as,
            HyperName::Omega1as => &self.omega_1as,
            HyperName::Omega1bs => &self.omega_1bs,
            HyperName::EllCa1 => &self.ell_ca1,
            HyperName::OmegaCa1 => &self.omega_ca1,
            HyperName::OmegaCa2 => &self.omega_ca2,
            HyperName::Phi0 | HyperName::Tau0 => &Rule::Raw,
        }
    }
}

/// Fixed hyperparameter values per fitted frequency, interpolated in ln f between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedHyper {
    pub freqs: Vec<f64>,
    pub values: Vec<HyperParams>,
}

impl SmoothedHyper {
    /// Values at `freq`: linear in ln f, flat outside the fitted range.
    pub fn at(&self, freq: f64) -> HyperParams {
        let mut out = self.values[0];
        for h in &HyperName::ALL[..8] {
            let ys: Vec<f64> = self.values.iter().map(|v| get(v, *h)).collect();
            set(&mut out, *h, interp_ln(&self.freqs, &ys, freq));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.freqs.is_empty() || self.freqs.len() != self.values.len() {
            return Err(Error::invalid("smoothed hyperparameters need matching, non-empty frequency and value lists"));
        }
        self.values.iter().try_for_each(|v| v.validate())
    }
}

fn get(h: &HyperParams, n: HyperName) -> f64 {
    crate::model::HyperState { hyper: *h, phi0: 0.0, tau0: 0.0 }.get(n)
}

fn set(h: &mut HyperParams, n: HyperName, v: f64) {
    let mut s = crate::model::HyperState { hyper: *h, phi0: 0.0, tau0: 0.0 };
    s.set(n, v);
    *h = s.hyper;
}

/// Piecewise-linear interpolation in ln x with flat extrapolation. `xs` ascending.
pub fn interp_ln(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&v| v <= x).max(1) - 1;
    let (a, b) = (xs[k].ln(), xs[k + 1].ln());
    let t = (x.ln() - a) / (b - a);
    ys[k] + t * (ys[k + 1] - ys[k])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn running_median(v: &[f64], width: usize) -> Vec<f64> {
    let h = width / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(v.len());
            let mut w: Vec<f64> = v[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            let m = w.len();
            if m % 2 == 1 {
                w[m / 2]
            } else {
                0.5 * (w[m / 2 - 1] + w[m / 2])
            }
        })
        .collect()
}

/// Pool-adjacent-violators fit of a non-decreasing sequence.
pub fn isotonic_increasing(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

fn monotone(y: &[f64]) -> Vec<f64> {
    let inc = isotonic_increasing(y);
    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
    let dec: Vec<f64> = isotonic_increasing(&neg).into_iter().map(|v| -v).collect();
    let sse = |f: &[f64]| f.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    if sse(&inc) <= sse(&dec) {
        inc
    } else {
        dec
    }
}

/// Hinge regression on x = ln f; returns fitted values at every frequency.
fn hinge(freqs: &[f64], y: &[f64], knots: &[f64], fit_below: f64) -> Vec<f64> {
    let used: Vec<usize> = (0..freqs.len()).filter(|&i| freqs[i] <= fit_below * (1.0 + 1e-12)).collect();
    if used.len() < 2 {
        return y.to_vec();
    }
    let xs: Vec<f64> = used.iter().map(|&i| freqs[i].ln()).collect();
    let (xmin, xmax) = (xs[0], xs[xs.len() - 1]);
    let inner: Vec<f64> = knots.iter().map(|k| k.ln()).filter(|&k| k > xmin && k < xmax).collect();
    let p = (2 + inner.len()).min(used.len());
    let basis = |x: f64| -> Vec<f64> {
        let mut b = vec![1.0, x - xmin];
        b.extend(inner.iter().map(|k| (x - k).max(0.0)));
        b.truncate(p);
        b
    };
    let mut ata = Mat::<f64>::zeros(p, p);
    let mut aty = vec![0.0; p];
    for (k, &i) in used.iter().enumerate() {
        let b = basis(xs[k]);
        for r in 0..p {
            aty[r] += b[r] * y[i];
            for c in 0..p {
                ata[(r, c)] += b[r] * b[c];
            }
        }
    }
    let Ok(ch) = cholesky(&ata, 1e-10) else { return y.to_vec() };
    let beta = ch.solve(&aty);
    freqs
        .iter()
        .map(|&f| {
            let x = f.ln().clamp(xmin, xmax);
            basis(x).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Smooths phase-one posterior means. Summaries must be at distinct frequencies;
/// they are sorted by frequency. Returns the smoothed values and any warnings.
pub fn smooth_hyperparameters(
    summaries: &[PosteriorSummary],
    rules: &SmoothingRules,
) -> Result<(SmoothedHyper, Vec<String>)> {
    if summaries.len() < 3 {
        return Err(Error::invalid(format!(
            "smoothing needs at least 3 fitted frequencies, got {}",
            summaries.len()
        )));
    }
    let mut order: Vec<usize> = (0..summaries.len()).collect();
    order.sort_by(|&a, &b| summaries[a].freq.total_cmp(&summaries[b].freq));
    let freqs: Vec<f64> = order.iter().map(|&i| summaries[i].freq).collect();
    let means = |h: HyperName| -> Result<Vec<f64>> {
        order
            .iter()
            .map(|&i| {
                summaries[i].mean(h.label()).ok_or_else(|| {
                    Error::invalid(format!("summary at {} Hz lacks {}", summaries[i].freq, h.label()))
                })
            })
            .collect()
    };
    let mut warnings = Vec::new();
    let mut smoothed: Vec<(HyperName, Vec<f64>)> = Vec::new();
    for h in &HyperName::ALL[..8] {
        let y = means(*h)?;
        let out = match rules.rule(*h) {
            Rule::Raw => y.clone(),
            Rule::Average => vec![mean(&y); y.len()],
            Rule::Hinge { knots, fit_below } => hinge(&freqs, &y, knots, *fit_below),
            Rule::Median { width } => running_median(&y, (*width).max(1)),
            Rule::AverageBelow { cutoff } => {
                let below: Vec<f64> = y.iter().copied().filter(|v| v < cutoff).collect();
                if below.is_empty() {
                    let msg = format!("all {} means are at or above {cutoff}; using the mean of all frequencies", h.label());
                    log::warn!("{msg}");
                    warnings.push(msg);
                    vec![mean(&y); y.len()]
                } else {
                    vec![mean(&below); y.len()]
                }
            }
            Rule::Monotone => monotone(&y),
        };
        smoothed.push((*h, out));
    }
    if let Some(fc) = rules.transfer_above {
        let est = means(HyperName::Omega1e)?;
        let sm = smoothed[1].1.clone();
        let w1a = &mut smoothed[3].1;
        for k in 0..freqs.len() {
            if freqs[k] > fc {
                let excess = (est[k] - sm[k]).max(0.0);
                w1a[k] = w1a[k].hypot(excess);
            }
        }
    }
    let values: Vec<HyperParams> = (0..freqs.len())
        .map(|k| {
            let mut hp = HyperParams {
                ell_1e: 0.0,
                omega_1e: 0.0,
                ell_1as: 0.0,
                omega_1as: 0.0,
                omega_1bs: 0.0,
                ell_ca1: 0.0,
                omega_ca1: 0.0,
                omega_ca2: 0.0,
            };
            for (h, v) in &smoothed {
                // A fitted line can dip below zero; keep the smallest positive estimate instead.
                let floor = means(*h).map(|m| m.iter().copied().fold(f64::INFINITY, f64::min)).unwrap_or(1e-6);
                set(&mut hp, *h, if v[k] > 0.0 { v[k] } else { floor.max(1e-6) });
            }
            hp
        })
        .collect();
    let out = SmoothedHyper { freqs, values };
    out.validate()?;
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::summary::ParamSummary;

    fn summary(freq: f64, vals: &[(HyperName, f64)]) -> PosteriorSummary {
        let params = HyperName::ALL
            .iter()
            .map(|h| {
                let m = vals.iter().find(|(n, _)| n == h).map_or(1.0, |(_, v)| *v);
                ParamSummary { name: h.label().into(), mean: m, sd: 0.0, q05: m, q95: m, ess: 1e3, rhat: 1.0 }
            })
            .collect();
        PosteriorSummary { freq, params, gated: vec![], converged: true, draws: vec![] }
    }

    #[test]
    fn average_rule_uses_all_frequencies() {
        let s = vec![
            summary(0.2, &[(HyperName::Ell1e, 85.0)]),
            summary(1.0, &[(HyperName::Ell1e, 40.0)]),
            summary(5.0, &[(HyperName::Ell1e, 40.0)]),
        ];
        let (sm, _) = smooth_hyperparameters(&s, &SmoothingRules::default()).unwrap();
        assert!(sm.values.iter().all(|v| (v.ell_1e - 55.0).abs() < 1e-12));
    }

    #[test]
    fn cell_length_averages_short_estimates() {
        let s = vec![
            summary(1.0, &[(HyperName::EllCa1, 50.0)]),
            summary(2.0, &[(HyperName::EllCa1, 60.0)]),
            summary(3.0, &[(HyperName::EllCa1, 120.0)]),
        ];
        let (sm, w) = smooth_hyperparameters(&s, &SmoothingRules::default()).unwrap();
        assert!(sm.values.iter().all(|v| (v.ell_ca1 - 55.0).abs() < 1e-12));
        assert!(w.is_empty());
    }

    #[test]
    fn long_cell_lengths_fall_back_with_warning() {
        let s: Vec<_> = [80.0, 90.0, 100.0]
            .iter()
            .enumerate()
            .map(|(i, v)| summary(i as f64 + 1.0, &[(HyperName::EllCa1, *v)]))
            .collect();
        let (sm, w) = smooth_hyperparameters(&s, &SmoothingRules::default()).unwrap();
        assert!((sm.values[0].ell_ca1 - 90.0).abs() < 1e-12);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn constants_are_preserved() {
        let s: Vec<_> = [0.3, 1.0, 4.0, 12.0, 20.0].iter().map(|f| summary(*f, &[])).collect();
        let (sm, _) = smooth_hyperparameters(&s, &SmoothingRules::default()).unwrap();
        for v in &sm.values {
            for h in &HyperName::ALL[..8] {
                assert!((get(v, *h) - 1.0).abs() < 1e-9, "{h:?} {}", get(v, *h));
            }
        }
    }

    #[test]
    fn isotonic_pools_violators() {
        assert_eq!(isotonic_increasing(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn interpolation_is_flat_outside() {
        let xs = [1.0, 10.0];
        let ys = [0.0, 1.0];
        assert_eq!(interp_ln(&xs, &ys, 0.1), 0.0);
        assert_eq!(interp_ln(&xs, &ys, 100.0), 1.0);
        assert!((interp_ln(&xs, &ys, 10f64.sqrt()) - 0.5).abs() < 1e-12);
    }
}
