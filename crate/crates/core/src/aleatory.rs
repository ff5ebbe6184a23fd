//! Magnitude-dependent aleatory standard deviations smoothed across frequency.
//!
//! `τ0` is constant in magnitude. `φ0` equals `φ0M1` below M 5, `φ0M2` above
//! M 6.5 and is linear in between.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky;

pub const DEGREE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AleatoryRaw {
    pub tau0: f64,
    pub phi0_m1: f64,
    pub phi0_m2: f64,
}

/// Polynomial in `x = (ln f − center)/scale`, lowest order first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogPoly {
    pub center: f64,
    pub scale: f64,
    pub coef: Vec<f64>,
}

impl LogPoly {
    pub fn eval(&self, freq: f64) -> f64 {
        let x = (freq.ln() - self.center) / self.scale;
        self.coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    /// Least-squares fit of the given degree to `(freqs, ys)`.
    pub fn fit(freqs: &[f64], ys: &[f64], degree: usize) -> Result<Self> {
        let n = freqs.len();
        if n < degree + 1 {
            return Err(Error::invalid(format!("degree-{degree} fit needs at least {} frequencies, got {n}", degree + 1)));
        }
        if freqs.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::invalid("frequencies must be positive"));
        }
        let lx: Vec<f64> = freqs.iter().map(|f| f.ln()).collect();
        let lo = lx.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = lx.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let center = 0.5 * (lo + hi);
        let scale = (0.5 * (hi - lo)).max(1e-12);
        let p = degree + 1;
        let mut ata = Mat::<f64>::zeros(p, p);
        let mut aty = vec![0.0; p];
        for (x, y) in lx.iter().zip(ys) {
            let x = (x - center) / scale;
            let pw: Vec<f64> = (0..p).map(|k| x.powi(k as i32)).collect();
            for r in 0..p {
                aty[r] += pw[r] * y;
                for c in 0..p {
                    ata[(r, c)] += pw[r] * pw[c];
                }
            }
        }
        let ch = cholesky(&ata, 0.0)?;
        if ch.jitter > 0.0 {
            return Err(Error::invalid("polynomial fit is rank deficient (repeated frequencies?)"));
        }
        Ok(Self { center, scale, coef: ch.solve(&aty) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AleatoryModel {
    pub freqs: Vec<f64>,
    pub raw: Vec<AleatoryRaw>,
    pub tau0: LogPoly,
    pub phi0_m1: LogPoly,
    pub phi0_m2: LogPoly,
    pub mag_breaks: (f64, f64),
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl AleatoryModel {
    pub fn tau0_of_mag(&self, _mag: f64, freq: f64) -> f64 {
        self.tau0.eval(freq)
    }

    pub fn phi0_of_mag(&self, mag: f64, freq: f64) -> f64 {
        phi0_piecewise(mag, self.phi0_m1.eval(freq), self.phi0_m2.eval(freq), self.mag_breaks)
    }

    pub fn total_sigma(&self, mag: f64, freq: f64) -> f64 {
        total_sigma(self.tau0_of_mag(mag, freq), self.phi0_of_mag(mag, freq))
    }
}

/// `φ0M1` below `m1`, `φ0M2` above `m2`, linear in between.
pub fn phi0_piecewise(mag: f64, phi_m1: f64, phi_m2: f64, (m1, m2): (f64, f64)) -> f64 {
    if mag <= m1 {
        phi_m1
    } else if mag >= m2 {
        phi_m2
    } else {
        let t = (mag - m1) / (m2 - m1);
        phi_m1 * (1.0 - t) + phi_m2 * t
    }
}

pub fn total_sigma(tau0: f64, phi0: f64) -> f64 {
    tau0.hypot(phi0)
}

/// Quartic-in-ln f smoothing of raw per-frequency aleatory values.
pub fn smooth_aleatory(freqs: &[f64], raw: &[AleatoryRaw]) -> Result<AleatoryModel> {
    if freqs.len() != raw.len() {
        return Err(Error::invalid("frequency and raw value counts differ"));
    }
    if freqs.len() < DEGREE + 1 {
        return Err(Error::invalid(format!(
            "aleatory smoothing needs at least {} frequencies, got {}",
            DEGREE + 1,
            freqs.len()
        )));
    }
    let col = |f: fn(&AleatoryRaw) -> f64| raw.iter().map(f).collect::<Vec<f64>>();
    let model = AleatoryModel {
        freqs: freqs.to_vec(),
        raw: raw.to_vec(),
        tau0: LogPoly::fit(freqs, &col(|r| r.tau0), DEGREE)?,
        phi0_m1: LogPoly::fit(freqs, &col(|r| r.phi0_m1), DEGREE)?,
        phi0_m2: LogPoly::fit(freqs, &col(|r| r.phi0_m2), DEGREE)?,
        mag_breaks: (5.0, 6.5),
        warnings: vec![],
    };
    let mut warnings = Vec::new();
    for (f, r) in freqs.iter().zip(raw) {
        if r.phi0_m2 > r.phi0_m1 {
            warnings.push(format!("{f} Hz: raw phi0_m2 {} exceeds phi0_m1 {}", r.phi0_m2, r.phi0_m1));
        }
    }
    let lo = freqs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = freqs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for k in 0..=100 {
        let f = (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / 100.0).exp();
        for (name, p) in [("tau0", &model.tau0), ("phi0_m1", &model.phi0_m1), ("phi0_m2", &model.phi0_m2)] {
            if p.eval(f) <= 0.0 {
                warnings.push(format!("smoothed {name} is not positive at {f:.4} Hz"));
                break;
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(AleatoryModel { warnings, ..model })
}

/// Maximum-likelihood `(φ0M1, φ0M2)` from within-event residuals `dw` at magnitudes `mag`.
/// A side without support (no weight) takes the other side's value.
pub fn fit_phi_split(dw: &[f64], mag: &[f64], breaks: (f64, f64)) -> Result<(f64, f64)> {
    if dw.is_empty() || dw.len() != mag.len() {
        return Err(Error::invalid("within-event residuals and magnitudes must be non-empty and aligned"));
    }
    let t: Vec<f64> = mag
        .iter()
        .map(|&m| ((m - breaks.0) / (breaks.1 - breaks.0)).clamp(0.0, 1.0))
        .collect();
    let w1: f64 = t.iter().map(|v| 1.0 - v).sum();
    let w2: f64 = t.iter().sum();
    let rms = (dw.iter().map(|v| v * v).sum::<f64>() / dw.len() as f64).sqrt();
    if rms == 0.0 {
        return Ok((0.0, 0.0));
    }
    let nll = |a: f64, b: f64| -> f64 {
        dw.iter()
            .zip(&t)
            .map(|(r, ti)| {
                let s = a * (1.0 - ti) + b * ti;
                if s <= 0.0 {
                    f64::INFINITY
                } else {
                    s.ln() + 0.5 * r * r / (s * s)
                }
            })
            .sum()
    };
    let golden = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| -> f64 {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (lo, hi);
        for _ in 0..100 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    };
    let (mut a, mut b) = (rms, rms);
    for _ in 0..40 {
        if w1 > 0.0 {
            a = golden(&|x| nll(x, b), 1e-3 * rms, 10.0 * rms);
        }
        if w2 > 0.0 {
            b = golden(&|x| nll(a, x), 1e-3 * rms, 10.0 * rms);
        }
    }
    if w1 == 0.0 {
        a = b;
    }
    if w2 == 0.0 {
        b = a;
    }
    Ok((a, b))
}

/// Reference per-frequency aleatory values for regression tests.
pub fn fixture() -> (Vec<f64>, Vec<AleatoryRaw>) {
    let freqs = vec![0.13, 0.24, 0.5, 1.0, 2.0, 3.2, 5.0, 8.0, 12.6, 18.0, 24.0];
    let tau = [0.40, 0.38, 0.36, 0.35, 0.34, 0.34, 0.35, 0.36, 0.38, 0.39, 0.40];
    let m1 = [0.40, 0.41, 0.42, 0.43, 0.44, 0.45, 0.46, 0.47, 0.48, 0.49, 0.50];
    let m2 = [0.38, 0.38, 0.38, 0.385, 0.39, 0.39, 0.39, 0.395, 0.40, 0.40, 0.40];
    let raw = (0..freqs.len()).map(|i| AleatoryRaw { tau0: tau[i], phi0_m1: m1[i], phi0_m2: m2[i] }).collect();
    (freqs, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_branches() {
        let b = (5.0, 6.5);
        assert_eq!(phi0_piecewise(4.0, 0.5, 0.4, b), 0.5);
        assert_eq!(phi0_piecewise(7.0, 0.5, 0.4, b), 0.4);
        assert!((phi0_piecewise(5.75, 0.5, 0.4, b) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn three_four_five() {
        assert!((total_sigma(0.3, 0.4) - 0.5).abs() < 1e-15);
        assert_eq!(total_sigma(0.3, 0.0), 0.3);
    }

    #[test]
    fn quartic_is_reproduced() {
        let freqs: Vec<f64> = (0..8).map(|k| 0.1 * 2f64.powi(k)).collect();
        let q = |f: f64| {
            let x = f.ln();
            0.4 + 0.01 * x - 0.003 * x * x + 0.0004 * x.powi(3) + 0.00002 * x.powi(4)
        };
        let raw: Vec<AleatoryRaw> = freqs.iter().map(|&f| AleatoryRaw { tau0: q(f), phi0_m1: q(f), phi0_m2: q(f) }).collect();
        let m = smooth_aleatory(&freqs, &raw).unwrap();
        for &f in &freqs {
            assert!((m.tau0.eval(f) - q(f)).abs() < 1e-10);
        }
        assert!(smooth_aleatory(&freqs[..4], &raw[..4]).is_err());
    }

    #[test]
    fn split_fit_recovers_scales() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::Rng::seed_from_u64(4);
        let mut dw = Vec::new();
        let mut mag = Vec::new();
        for i in 0..20_000 {
            let m = 3.5 + 4.0 * (i as f64 / 20_000.0);
            let s = phi0_piecewise(m, 0.5, 0.35, (5.0, 6.5));
            dw.push(Normal::new(0.0, s).unwrap().sample(&mut rng));
            mag.push(m);
        }
        let (a, b) = fit_phi_split(&dw, &mag, (5.0, 6.5)).unwrap();
        assert!((a - 0.5).abs() < 0.01 && (b - 0.35).abs() < 0.01, "{a} {b}");
    }
}
