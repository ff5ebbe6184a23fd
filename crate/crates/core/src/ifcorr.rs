//! Inter-frequency correlation of the non-ergodic terms.
//!
//! `ρ(f_r) = tanh(A·e^(−B·f_r) + C·e^(−D·f_r))` for `f_r = |ln(f1/f2)| > 0` and
//! `ρ(0) = 1`. `B` and `D` are stored as positive magnitudes and negated on evaluation.

use std::collections::{BTreeMap, BTreeSet};

use faer::Mat;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, repair_correlation, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl CorrelationModel {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    /// `atanh ρ` for `f_r > 0`.
    pub fn z(&self, fr: f64) -> f64 {
        self.a * (-self.b * fr).exp() + self.c * (-self.d * fr).exp()
    }

    pub fn rho(&self, fr: f64) -> f64 {
        if fr == 0.0 {
            1.0
        } else {
            self.z(fr).tanh()
        }
    }
}

/// The published coefficient sets.
pub fn reference_models() -> Vec<(&'static str, CorrelationModel)> {
    vec![
        ("dc1e", CorrelationModel::new(1.94, 0.77, 0.96, 19.49)),
        ("dc1a", CorrelationModel::new(1.30, 0.92, 1.36, 30.85)),
        ("dc1b", CorrelationModel::new(1.83, 1.86, 2.77, 63.96)),
        ("c_ca", CorrelationModel::new(1.85, 0.41, 0.27, 10.00)),
    ]
}

pub fn freq_ratio(f1: f64, f2: f64) -> Result<f64> {
    if !(f1 > 0.0 && f2 > 0.0) {
        return Err(Error::invalid(format!("frequencies must be positive, got {f1} and {f2}")));
    }
    Ok((f1.ln() - f2.ln()).abs())
}

pub fn eval_correlation(m: &CorrelationModel, f1: f64, f2: f64) -> Result<f64> {
    let fr = freq_ratio(f1, f2)?;
    Ok(if f1 == f2 { 1.0 } else { m.rho(fr) })
}

/// Pearson correlation.
pub fn empirical_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 4 {
        return Err(Error::invalid(format!("need two equal-length samples of at least 4, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation undefined for a sample with zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `(atanh ρ, 1/√(n−3))`.
pub fn fisher_z(rho: f64, n: usize) -> Result<(f64, f64)> {
    if !(rho.abs() < 1.0) {
        return Err(Error::invalid(format!("Fisher z undefined for rho = {rho}")));
    }
    if n <= 3 {
        return Err(Error::invalid(format!("Fisher z standard error needs n > 3, got {n}")));
    }
    Ok((rho.atanh(), 1.0 / ((n - 3) as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrPair {
    pub f1: f64,
    pub f2: f64,
    pub rho: f64,
    pub n: usize,
    pub z: f64,
    pub sigma_z: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmpiricalCorr {
    pub pairs: Vec<CorrPair>,
}

impl EmpiricalCorr {
    /// Correlations between every pair of distinct frequencies over the term
    /// instances present at both. Pairs with n ≤ 3, zero variance or |ρ| = 1 are skipped.
    pub fn from_values(per_freq: &[(f64, BTreeMap<String, f64>)]) -> Self {
        let mut pairs = Vec::new();
        for i in 0..per_freq.len() {
            for j in (i + 1)..per_freq.len() {
                let (f1, a) = &per_freq[i];
                let (f2, b) = &per_freq[j];
                let (x, y): (Vec<f64>, Vec<f64>) =
                    a.iter().filter_map(|(k, v)| b.get(k).map(|w| (*v, *w))).unzip();
                let Ok(rho) = empirical_rho(&x, &y) else { continue };
                let Ok((z, s)) = fisher_z(rho, x.len()) else { continue };
                pairs.push(CorrPair { f1: *f1, f2: *f2, rho, n: x.len(), z, sigma_z: s });
            }
        }
        Self { pairs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFit {
    pub model: CorrelationModel,
    pub weighted_rss: f64,
    pub degenerate: bool,
    /// Weighted RSS reached from each start (NaN where the start failed).
    pub start_rss: Vec<f64>,
}

const STARTS: [[f64; 4]; 8] = [
    [1.0, 0.3, 1.0, 10.0],
    [1.0, 1.0, 1.0, 30.0],
    [2.0, 0.5, 1.0, 20.0],
    [0.5, 0.2, 2.0, 5.0],
    [1.5, 1.5, 2.5, 60.0],
    [2.0, 0.1, 0.3, 3.0],
    [0.8, 0.8, 0.5, 8.0],
    [1.2, 2.0, 1.5, 40.0],
];

/// Damped least squares on `θ = ln(A, B, C, D)` from one start.
fn lm(fr: &[f64], z: &[f64], w: &[f64], start: [f64; 4]) -> Option<([f64; 4], f64)> {
    let model = |t: &[f64; 4], x: f64| t[0].exp() * (-t[1].exp() * x).exp() + t[2].exp() * (-t[3].exp() * x).exp();
    let rss = |t: &[f64; 4]| -> f64 { fr.iter().zip(z).zip(w).map(|((x, y), wk)| wk * (y - model(t, *x)).powi(2)).sum() };
    let mut theta = start.map(f64::ln);
    let mut cur = rss(&theta);
    let mut lambda = 1e-3;
    for _ in 0..2000 {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for ((x, y), wk) in fr.iter().zip(z).zip(w) {
            let (a, b, c, d) = (theta[0].exp(), theta[1].exp(), theta[2].exp(), theta[3].exp());
            let eb = (-b * x).exp();
            let ed = (-d * x).exp();
            let jac = [a * eb, -a * b * x * eb, c * ed, -c * d * x * ed];
            let r = y - (a * eb + c * ed);
            for p in 0..4 {
                jtr[p] += wk * jac[p] * r;
                for q in 0..4 {
                    jtj[p][q] += wk * jac[p] * jac[q];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let m = Mat::from_fn(4, 4, |p, q| jtj[p][q] + if p == q { lambda * jtj[p][p].max(1e-12) } else { 0.0 });
            let Ok(ch) = cholesky(&m, 0.0) else {
                lambda *= 10.0;
                continue;
            };
            let step = ch.solve(&jtr);
            let mut next = theta;
            for p in 0..4 {
                next[p] += step[p].clamp(-5.0, 5.0);
            }
            let r = rss(&next);
            if r.is_finite() && r < cur {
                let rel = (cur - r) / cur.max(1e-300);
                theta = next;
                cur = r;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-14 {
                    return Some((theta.map(f64::exp), cur));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    cur.is_finite().then(|| (theta.map(f64::exp), cur))
}

/// Weighted fit (weights `1/σ_z²`) pooled over all frequency pairs.
pub fn fit_correlation_model(emp: &EmpiricalCorr) -> Result<CorrelationFit> {
    let pts: Vec<&CorrPair> = emp.pairs.iter().filter(|p| p.f1 != p.f2).collect();
    let fr: Vec<f64> = pts.iter().map(|p| (p.f1.ln() - p.f2.ln()).abs()).collect();
    let distinct: BTreeSet<u64> = fr.iter().map(|x| (x * 1e9).round() as u64).collect();
    if distinct.len() < 8 {
        return Err(Error::invalid(format!("correlation fit needs at least 8 distinct frequency ratios, got {}", distinct.len())));
    }
    let z: Vec<f64> = pts.iter().map(|p| p.z).collect();
    let w: Vec<f64> = pts.iter().map(|p| 1.0 / (p.sigma_z * p.sigma_z)).collect();
    let mut best: Option<([f64; 4], f64)> = None;
    let mut start_rss = Vec::new();
    for s in STARTS {
        match lm(&fr, &z, &w, s) {
            Some((t, r)) => {
                start_rss.push(r);
                if best.is_none_or(|(_, br)| r < br) {
                    best = Some((t, r));
                }
            }
            None => start_rss.push(f64::NAN),
        }
    }
    let Some((t, rss)) = best else {
        return Err(Error::Convergence(format!("correlation fit failed from every start: {start_rss:?}")));
    };
    let mut model = CorrelationModel::new(t[0], t[1], t[2], t[3]);
    if model.b > model.d {
        model = CorrelationModel::new(model.c, model.d, model.a, model.b);
    }
    let span = model.rho(0.01) - model.rho(4.0);
    let degenerate = !(span > 1e-3) || model.b < 1e-6 || !t.iter().all(|v| v.is_finite());
    if degenerate {
        log::warn!("correlation fit is degenerate (curve span {span:.2e})");
    }
    Ok(CorrelationFit { model, weighted_rss: rss, degenerate, start_rss })
}

/// Correlation matrix over `freqs`, repaired to be a valid correlation matrix.
pub fn correlation_matrix(m: &CorrelationModel, freqs: &[f64]) -> Result<Matrix> {
    let n = freqs.len();
    let mut r = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            r[(i, j)] = eval_correlation(m, freqs[i], freqs[j])?;
        }
    }
    repair_correlation(&r)
}

/// One zero-mean draw across `freqs` with marginal sds `sds`. Repeated frequencies
/// receive identical values.
pub fn sample_correlated_terms(m: &CorrelationModel, sds: &[f64], freqs: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    if sds.len() != freqs.len() {
        return Err(Error::invalid("one sd per frequency is required"));
    }
    let mut uniq: Vec<f64> = Vec::new();
    let idx: Vec<usize> = freqs
        .iter()
        .map(|f| match uniq.iter().position(|u| u == f) {
            Some(k) => k,
            None => {
                uniq.push(*f);
                uniq.len() - 1
            }
        })
        .collect();
    let r = correlation_matrix(m, &uniq)?;
    let ch = cholesky(&r, 0.0)?;
    let z: Vec<f64> = (0..uniq.len()).map(|_| StandardNormal.sample(rng)).collect();
    let u = ch.mul_l(&z);
    Ok(idx.iter().zip(sds).map(|(k, s)| u[*k] * s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_correlation() {
        let r = empirical_rho(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.6).abs() < 1e-15);
        assert!(empirical_rho(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn fisher_values() {
        let (z, s) = fisher_z(0.5, 28).unwrap();
        assert!((z - 0.549_306_144_334_054_9).abs() < 1e-12);
        assert!((s - 0.2).abs() < 1e-15);
        assert!(fisher_z(1.0, 10).is_err());
    }

    #[test]
    fn limit_and_identity() {
        let (_, m) = reference_models()[1];
        assert_eq!(eval_correlation(&m, 5.0, 5.0).unwrap(), 1.0);
        assert!((m.rho(1e-12) - 2.66f64.tanh()).abs() < 1e-9);
        assert!(eval_correlation(&m, 0.0, 1.0).is_err());
    }
}
