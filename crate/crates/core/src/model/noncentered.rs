//! Unconstrained, non-centered parameterization with an analytic gradient.
//!
//! Layout of the state vector:
//!
//! ```text
//! [δc0, δc0e_N, δc0e_S | z_1e | z_1a | z_1b | u_ca | z_B | ln θ_free]
//! ```
//!
//! `δc1e = ω1e·L(ℓ1e)·z_1e`, `δc1a = ω1a·L(ℓ1a)·z_1a`, `δc1b = ω1b·z_1b`,
//! `δB = τ0·z_B` and `c_ca = −exp(u_ca)`, where `L(ℓ)` is the Cholesky factor of
//! the jittered exponential correlation matrix.

use faer::Mat;

use super::{
    cell_cov, corr_chol, ln_normal, FreqData, HyperName, HyperParams, HyperState, ModelParams, Phase,
    Priors, LN_2PI,
};
use crate::error::{Error, Result};
use crate::kernels::{exp_correlation, JITTER_REL};
use crate::linalg::{cholesky, Chol, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct NcLayout {
    pub phase: Phase,
    pub n_eloc: usize,
    pub n_sloc: usize,
    pub n_sta: usize,
    pub n_cell: usize,
    pub n_ev: usize,
}

impl NcLayout {
    pub fn new(data: &FreqData, phase: Phase) -> Self {
        Self {
            phase,
            n_eloc: data.eq_locs.len(),
            n_sloc: data.sta_locs.len(),
            n_sta: data.n_stations(),
            n_cell: data.n_cells(),
            n_ev: data.n_events(),
        }
    }

    pub fn ze(&self) -> usize {
        3
    }
    pub fn za(&self) -> usize {
        self.ze() + self.n_eloc
    }
    pub fn zb(&self) -> usize {
        self.za() + self.n_sloc
    }
    pub fn uc(&self) -> usize {
        self.zb() + self.n_sta
    }
    pub fn zdb(&self) -> usize {
        self.uc() + self.n_cell
    }
    pub fn hyp(&self) -> usize {
        self.zdb() + self.n_ev
    }
    pub fn free(&self) -> &'static [HyperName] {
        HyperName::free(self.phase)
    }
    pub fn dim(&self) -> usize {
        self.hyp() + self.free().len()
    }
}

/// Log posterior over the unconstrained state of one frequency.
pub struct NcModel<'a> {
    pub data: &'a FreqData,
    pub layout: NcLayout,
    pub priors: Priors,
    /// Values of hyperparameters that are not free in this phase.
    pub fixed: HyperState,
}

struct Factors {
    le: Option<Chol>,
    la: Option<Chol>,
    kc: Option<Chol>,
}

fn std_normal_lp(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

impl<'a> NcModel<'a> {
    pub fn new(data: &'a FreqData, phase: Phase, priors: Priors, fixed: HyperState) -> Self {
        Self { data, layout: NcLayout::new(data, phase), priors, fixed }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn hyper_state(&self, x: &[f64]) -> HyperState {
        let mut hs = self.fixed;
        for (k, name) in self.layout.free().iter().enumerate() {
            hs.set(*name, x[self.layout.hyp() + k].exp());
        }
        hs
    }

    fn factors(&self, hs: &HyperState) -> Result<Factors> {
        let d = self.data;
        let h = &hs.hyper;
        let le = if self.layout.n_eloc > 0 { Some(corr_chol(&d.eq_dist, h.ell_1e)?) } else { None };
        let la = if self.layout.n_sloc > 0 { Some(corr_chol(&d.sta_dist, h.ell_1as)?) } else { None };
        let kc = if self.layout.n_cell > 0 {
            Some(cholesky(&cell_cov(&d.cell_dist, h.ell_ca1, h.omega_ca1, h.omega_ca2), 0.0)?)
        } else {
            None
        };
        Ok(Factors { le, la, kc })
    }

    fn params_with(&self, x: &[f64], hs: &HyperState, f: &Factors) -> ModelParams {
        let l = &self.layout;
        let h = &hs.hyper;
        let scale = |v: Vec<f64>, w: f64| v.into_iter().map(|a| a * w).collect::<Vec<f64>>();
        let dc1e = f.le.as_ref().map_or(vec![], |c| scale(c.mul_l(&x[l.ze()..l.za()]), h.omega_1e));
        let dc1a = f.la.as_ref().map_or(vec![], |c| scale(c.mul_l(&x[l.za()..l.zb()]), h.omega_1as));
        ModelParams {
            dc0: x[0],
            dc0e_north: x[1],
            dc0e_south: x[2],
            dc1e,
            dc1a,
            dc1b: x[l.zb()..l.uc()].iter().map(|z| z * h.omega_1bs).collect(),
            c_ca: x[l.uc()..l.zdb()].iter().map(|u| -u.exp()).collect(),
            db: x[l.zdb()..l.hyp()].iter().map(|z| z * hs.tau0).collect(),
            phi0: hs.phi0,
            tau0: hs.tau0,
        }
    }

    /// Model parameters and hyperparameters at state `x`.
    pub fn unpack(&self, x: &[f64]) -> Result<(ModelParams, HyperState)> {
        let hs = self.hyper_state(x);
        let f = self.factors(&hs)?;
        Ok((self.params_with(x, &hs, &f), hs))
    }

    /// Inverse of [`Self::unpack`]. Requires every cell coefficient strictly negative.
    pub fn pack(&self, p: &ModelParams, hs: &HyperState) -> Result<Vec<f64>> {
        let l = &self.layout;
        let h = &hs.hyper;
        let f = self.factors(hs)?;
        let mut x = vec![0.0; l.dim()];
        x[0] = p.dc0;
        x[1] = p.dc0e_north;
        x[2] = p.dc0e_south;
        if let Some(c) = &f.le {
            let z = c.forward(&p.dc1e);
            for (k, v) in z.iter().enumerate() {
                x[l.ze() + k] = v / h.omega_1e;
            }
        }
        if let Some(c) = &f.la {
            let z = c.forward(&p.dc1a);
            for (k, v) in z.iter().enumerate() {
                x[l.za() + k] = v / h.omega_1as;
            }
        }
        for (k, v) in p.dc1b.iter().enumerate() {
            x[l.zb() + k] = v / h.omega_1bs;
        }
        for (k, v) in p.c_ca.iter().enumerate() {
            if *v >= 0.0 {
                return Err(Error::invalid("cell coefficients must be negative to pack"));
            }
            x[l.uc() + k] = (-v).ln();
        }
        for (k, v) in p.db.iter().enumerate() {
            x[l.zdb() + k] = v / hs.tau0;
        }
        for (k, name) in l.free().iter().enumerate() {
            x[l.hyp() + k] = hs.get(*name).ln();
        }
        Ok(x)
    }

    /// ln|∂(centered)/∂x| at `x`.
    pub fn log_jacobian(&self, x: &[f64]) -> Result<f64> {
        let l = &self.layout;
        let hs = self.hyper_state(x);
        let h = &hs.hyper;
        let f = self.factors(&hs)?;
        let mut j = 0.0;
        if let Some(c) = &f.le {
            j += l.n_eloc as f64 * h.omega_1e.ln() + 0.5 * c.logdet();
        }
        if let Some(c) = &f.la {
            j += l.n_sloc as f64 * h.omega_1as.ln() + 0.5 * c.logdet();
        }
        j += l.n_sta as f64 * h.omega_1bs.ln();
        j += x[l.uc()..l.zdb()].iter().sum::<f64>();
        j += l.n_ev as f64 * hs.tau0.ln();
        j += x[l.hyp()..].iter().sum::<f64>();
        Ok(j)
    }

    pub fn logp(&self, x: &[f64]) -> f64 {
        match self.eval(x, false) {
            Ok((lp, _)) if lp.is_finite() => lp,
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn logp_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (lp, g) = self.eval(x, true)?;
        Ok((lp, g.expect("gradient requested")))
    }

    fn eval(&self, x: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let l = &self.layout;
        let d = self.data;
        if x.len() != l.dim() {
            return Err(Error::invalid(format!("state length {} != {}", x.len(), l.dim())));
        }
        let hs = self.hyper_state(x);
        let h = hs.hyper;
        let f = self.factors(&hs)?;
        let p = self.params_with(x, &hs, &f);
        let phi2 = hs.phi0 * hs.phi0;

        let n = d.n_records();
        let mut g_c0 = 0.0;
        let mut g_n = 0.0;
        let mut g_s = 0.0;
        let mut g_eloc = vec![0.0; l.n_eloc];
        let mut g_sloc = vec![0.0; l.n_sloc];
        let mut g_sta = vec![0.0; l.n_sta];
        let mut g_ev = vec![0.0; l.n_ev];
        let mut g_cell = vec![0.0; l.n_cell];
        let mut ss = 0.0;
        for i in 0..n {
            let e = d.rec_event[i];
            let s = d.rec_station[i];
            let region = d.event_dc0e[e];
            let mu = p.dc0
                + p.dc0e(region)
                + p.dc1e[d.event_loc[e]]
                + p.dc1a[d.station_loc[s]]
                + p.dc1b[s]
                + d.path_term(i, &p.c_ca);
            let r = d.y[i] - mu - p.db[e];
            ss += r * r;
            if want_grad {
                let g = r / phi2;
                g_c0 += g;
                match region {
                    Some(crate::geo::Region::North) => g_n += g,
                    Some(crate::geo::Region::South) => g_s += g,
                    None => {}
                }
                g_eloc[d.event_loc[e]] += g;
                g_sloc[d.station_loc[s]] += g;
                g_sta[s] += g;
                g_ev[e] += g;
                for &(c, dr) in &d.seg[i] {
                    g_cell[c] += g * dr;
                }
            }
        }
        let mut lp = -0.5 * ss / phi2 - n as f64 * hs.phi0.ln() - 0.5 * n as f64 * LN_2PI;

        let ze = &x[l.ze()..l.za()];
        let za = &x[l.za()..l.zb()];
        let zb = &x[l.zb()..l.uc()];
        let uc = &x[l.uc()..l.zdb()];
        let zdb = &x[l.zdb()..l.hyp()];
        lp += std_normal_lp(ze) + std_normal_lp(za) + std_normal_lp(zb) + std_normal_lp(zdb);

        let pr = &self.priors;
        lp += ln_normal(p.dc0, 0.0, pr.dc0_sd)
            + ln_normal(p.dc0e_north, 0.0, pr.dc0e_sd)
            + ln_normal(p.dc0e_south, 0.0, pr.dc0e_sd);

        // Truncated cell prior, unnormalized, plus the log-transform Jacobian.
        let mut alpha = vec![];
        if let Some(kc) = &f.kc {
            let diff: Vec<f64> = p.c_ca.iter().map(|c| c - d.c7).collect();
            alpha = kc.solve(&diff);
            let q: f64 = diff.iter().zip(&alpha).map(|(a, b)| a * b).sum();
            lp += -0.5 * q - 0.5 * kc.logdet() - 0.5 * l.n_cell as f64 * LN_2PI;
            lp += uc.iter().sum::<f64>();
        }

        for (k, name) in l.free().iter().enumerate() {
            lp += name.prior(pr).ln_density_log(x[l.hyp() + k]);
        }

        if !want_grad {
            return Ok((lp, None));
        }

        let mut grad = vec![0.0; l.dim()];
        grad[0] = g_c0 - p.dc0 / (pr.dc0_sd * pr.dc0_sd);
        grad[1] = g_n - p.dc0e_north / (pr.dc0e_sd * pr.dc0e_sd);
        grad[2] = g_s - p.dc0e_south / (pr.dc0e_sd * pr.dc0e_sd);
        let mut lt_ge = vec![];
        if let Some(c) = &f.le {
            lt_ge = c.mul_lt(&g_eloc);
            for k in 0..l.n_eloc {
                grad[l.ze() + k] = h.omega_1e * lt_ge[k] - ze[k];
            }
        }
        let mut lt_ga = vec![];
        if let Some(c) = &f.la {
            lt_ga = c.mul_lt(&g_sloc);
            for k in 0..l.n_sloc {
                grad[l.za() + k] = h.omega_1as * lt_ga[k] - za[k];
            }
        }
        for k in 0..l.n_sta {
            grad[l.zb() + k] = h.omega_1bs * g_sta[k] - zb[k];
        }
        for k in 0..l.n_cell {
            grad[l.uc() + k] = (g_cell[k] - alpha[k]) * p.c_ca[k] + 1.0;
        }
        for k in 0..l.n_ev {
            grad[l.zdb() + k] = hs.tau0 * g_ev[k] - zdb[k];
        }

        let mut kinv: Option<Matrix> = None;
        for (k, name) in l.free().iter().enumerate() {
            let v = x[l.hyp() + k];
            let mut gk = name.prior(pr).d_ln_density_log(v);
            gk += match name {
                HyperName::Omega1e => dot(&g_eloc, &p.dc1e),
                HyperName::Omega1as => dot(&g_sloc, &p.dc1a),
                HyperName::Omega1bs => dot(&g_sta, &p.dc1b),
                HyperName::Tau0 => dot(&g_ev, &p.db),
                HyperName::Phi0 => ss / phi2 - n as f64,
                HyperName::Ell1e => match &f.le {
                    Some(c) => h.omega_1e * chol_ell_term(c, &d.eq_dist, h.ell_1e, &lt_ge, ze),
                    None => 0.0,
                },
                HyperName::Ell1as => match &f.la {
                    Some(c) => h.omega_1as * chol_ell_term(c, &d.sta_dist, h.ell_1as, &lt_ga, za),
                    None => 0.0,
                },
                HyperName::EllCa1 | HyperName::OmegaCa1 | HyperName::OmegaCa2 => match &f.kc {
                    Some(kc) => {
                        let ki = kinv.get_or_insert_with(|| kc.inverse());
                        let dk = cell_cov_derivative(&d.cell_dist, &h, *name);
                        0.5 * (quad(&dk, &alpha) - trace_prod(ki, &dk))
                    }
                    None => 0.0,
                },
            };
            grad[l.hyp() + k] = gk;
        }
        Ok((lp, Some(grad)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad(m: &Matrix, v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for j in 0..n {
        let c = m.col_as_slice(j);
        let mut t = 0.0;
        for i in 0..n {
            t += c[i] * v[i];
        }
        s += t * v[j];
    }
    s
}

fn trace_prod(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for j in 0..n {
        let ca = a.col_as_slice(j);
        let cb = b.col_as_slice(j);
        for i in 0..n {
            s += ca[i] * cb[i];
        }
    }
    s
}

/// ∂K/∂ln θ for the cell covariance.
fn cell_cov_derivative(dist: &Matrix, h: &HyperParams, name: HyperName) -> Matrix {
    let n = dist.nrows();
    let w1 = h.omega_ca1 * h.omega_ca1;
    let w2 = h.omega_ca2 * h.omega_ca2;
    match name {
        HyperName::EllCa1 => {
            let r = exp_correlation(dist, h.ell_ca1);
            Mat::from_fn(n, n, |i, j| w1 * r[(i, j)] * dist[(i, j)] / h.ell_ca1)
        }
        HyperName::OmegaCa1 => {
            let r = exp_correlation(dist, h.ell_ca1);
            Mat::from_fn(n, n, |i, j| {
                2.0 * w1 * r[(i, j)] + if i == j { 2.0 * JITTER_REL * w1 } else { 0.0 }
            })
        }
        _ => Mat::from_fn(n, n, |i, j| if i == j { 2.0 * w2 * (1.0 + JITTER_REL) } else { 0.0 }),
    }
}

/// `aᵀ Φ(L⁻¹ Ṙ L⁻ᵀ) z` with `Ṙ = ∂R/∂ln ℓ`, i.e. the directional derivative of
/// `gᵀ L z` through the Cholesky factor, where `a = Lᵀ g`.
fn chol_ell_term(c: &Chol, dist: &Matrix, ell: f64, a: &[f64], z: &[f64]) -> f64 {
    let n = dist.nrows();
    let r = exp_correlation(dist, ell);
    let dr = Mat::from_fn(n, n, |i, j| r[(i, j)] * dist[(i, j)] / ell);
    let w = c.forward_mat(&dr);
    let m = c.forward_mat(&w.transpose().to_owned());
    let mut s = 0.0;
    for j in 0..n {
        s += a[j] * 0.5 * m[(j, j)] * z[j];
        for i in (j + 1)..n {
            s += a[i] * m[(i, j)] * z[j];
        }
    }
    s
}
