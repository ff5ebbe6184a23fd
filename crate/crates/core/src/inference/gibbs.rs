//! Collapsed blocked Gibbs sampler for one frequency.
//!
//! Each sweep updates four blocks:
//!
//! * event terms: `(ℓ1e, ω1e, τ0)` by slice sampling on the marginal of the
//!   per-event mean residuals, then `(δc0, δc0e, δc1e)` jointly, then `δB`;
//! * station terms: `(ℓ1a, ω1a, ω1b)` likewise, then `(δc0, δc1a)`, then `δc1b`;
//! * cell coefficients by exact HMC under the `c ≤ 0` constraint, followed by
//!   adaptive Metropolis moves on `(ℓca, ωca1, ωca2)`: one with the cells
//!   whitened against their conditional posterior, one with the cells fixed,
//!   and a joint rescaling of the cell deviations and both scales;
//! * `φ0` by slice sampling on the full residual.
//!
//! Gaussian blocks are drawn by conditioning a prior sample on the data
//! (`β = β0 + P·Xᵀ·C⁻¹·(r − X·β0 − η0)`).

use faer::Mat;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::slice::slice_step;
use super::tmvn::tmvn_step;
use crate::error::Result;
use crate::geo::Region;
use crate::kernels::JITTER_REL;
use crate::linalg::{cholesky, Chol, Matrix};
use crate::model::{cell_cov, corr_chol, FreqData, HyperName, HyperState, ModelParams, Phase, Priors, LN_2PI};
use crate::rng::Rng;

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn ln_mvn0(chol: &Chol, r: &[f64]) -> f64 {
    let w = chol.forward(r);
    -0.5 * w.iter().map(|v| v * v).sum::<f64>() - 0.5 * chol.logdet() - 0.5 * r.len() as f64 * LN_2PI
}

/// Units (events or stations) sharing an intercept, optional regional constants
/// and a GP over their locations.
struct UnitBlock<'a> {
    loc_of: &'a [usize],
    region: Option<&'a [Option<Region>]>,
    dist: &'a Matrix,
}

struct BlockDraw {
    dc0: f64,
    north: f64,
    south: f64,
    gp: Vec<f64>,
}

impl UnitBlock<'_> {
    fn n(&self) -> usize {
        self.loc_of.len()
    }

    fn region_of(&self, u: usize) -> Option<Region> {
        self.region.and_then(|r| r[u])
    }

    fn cov(&self, sd0: f64, sde: f64, omega: f64, ell: f64, diag: &[f64]) -> Matrix {
        let n = self.n();
        let w2 = omega * omega;
        let s0 = sd0 * sd0;
        let se = sde * sde;
        Mat::from_fn(n, n, |i, j| {
            let (li, lj) = (self.loc_of[i], self.loc_of[j]);
            let mut v = s0;
            if let (Some(a), Some(b)) = (self.region_of(i), self.region_of(j)) {
                if a == b {
                    v += se;
                }
            }
            let k = if li == lj { 1.0 + JITTER_REL } else { (-self.dist[(li, lj)] / ell).exp() };
            v += w2 * k;
            if i == j {
                v += diag[i];
            }
            v
        })
    }

    fn log_marginal(&self, sd0: f64, sde: f64, omega: f64, ell: f64, diag: &[f64], r: &[f64]) -> f64 {
        match cholesky(&self.cov(sd0, sde, omega, ell, diag), 0.0) {
            Ok(c) => ln_mvn0(&c, r),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Joint draw of the intercepts and the GP values given unit means `r`
    /// observed with independent noise variances `diag`.
    #[allow(clippy::too_many_arguments)]
    fn draw(
        &self,
        sd0: f64,
        sde: f64,
        omega: f64,
        ell: f64,
        diag: &[f64],
        r: &[f64],
        rng: &mut Rng,
    ) -> Result<BlockDraw> {
        let n = self.n();
        let n_loc = self.dist.nrows();
        let c = cholesky(&self.cov(sd0, sde, omega, ell, diag), 0.0)?;
        let lr = corr_chol(self.dist, ell)?;
        let dc0_0 = sd0 * normals(1, rng)[0];
        let reg0 = normals(2, rng);
        let (n0, s0) = (sde * reg0[0], sde * reg0[1]);
        let gp0: Vec<f64> = lr.mul_l(&normals(n_loc, rng)).into_iter().map(|v| v * omega).collect();
        let eta = normals(n, rng);
        let resid: Vec<f64> = (0..n)
            .map(|u| {
                let reg = match self.region_of(u) {
                    Some(Region::North) => n0,
                    Some(Region::South) => s0,
                    None => 0.0,
                };
                r[u] - (dc0_0 + reg + gp0[self.loc_of[u]] + diag[u].sqrt() * eta[u])
            })
            .collect();
        let v = c.solve(&resid);
        let mut sum0 = 0.0;
        let (mut sn, mut ss) = (0.0, 0.0);
        let mut zt = vec![0.0; n_loc];
        for u in 0..n {
            sum0 += v[u];
            match self.region_of(u) {
                Some(Region::North) => sn += v[u],
                Some(Region::South) => ss += v[u],
                None => {}
            }
            zt[self.loc_of[u]] += v[u];
        }
        let w2 = omega * omega;
        let mut gp = gp0;
        for a in 0..n_loc {
            let mut acc = zt[a] * JITTER_REL;
            for b in 0..n_loc {
                if zt[b] != 0.0 {
                    acc += (-self.dist[(a, b)] / ell).exp() * zt[b];
                }
            }
            gp[a] += w2 * acc;
        }
        Ok(BlockDraw {
            dc0: dc0_0 + sd0 * sd0 * sum0,
            north: n0 + sde * sde * sn,
            south: s0 + sde * sde * ss,
            gp,
        })
    }
}

/// Cached factorization of the cell prior covariance.
#[derive(Clone)]
struct CellPrior {
    theta: [f64; 3],
    chol: Chol,
    inv: Matrix,
}

impl CellPrior {
    fn new(d: &FreqData, theta: [f64; 3]) -> Result<Self> {
        let k = cell_cov(&d.cell_dist, theta[0], theta[1], theta[2]);
        let chol = cholesky(&k, 0.0)?;
        let inv = chol.inverse();
        Ok(Self { theta, chol, inv })
    }

    fn ln_density(&self, c: &[f64], mean: f64) -> f64 {
        let r: Vec<f64> = c.iter().map(|v| v - mean).collect();
        ln_mvn0(&self.chol, &r)
    }
}

struct CellPost {
    qc: Chol,
    mu: Vec<f64>,
    ln_m: f64,
}

/// Robbins-Monro tuned Gaussian random walk in a small log-space block.
#[derive(Clone)]
struct AdaptiveWalk {
    dim: usize,
    log_scale: f64,
    target: f64,
    n: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
}

impl AdaptiveWalk {
    fn new(dim: usize, sd: f64, target: f64) -> Self {
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            chol[i * dim + i] = 1.0;
        }
        Self { dim, log_scale: sd.ln(), target, n: 0.0, mean: vec![0.0; dim], cov: vec![0.0; dim * dim], chol }
    }

    fn propose(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let z = normals(self.dim, rng);
        let s = self.log_scale.exp();
        (0..self.dim)
            .map(|i| x[i] + s * (0..=i).map(|j| self.chol[i * self.dim + j] * z[j]).sum::<f64>())
            .collect()
    }

    fn adapt(&mut self, x: &[f64], accept_prob: f64, iter: usize) {
        let gamma = 1.0 / ((iter + 1) as f64).powf(0.6);
        self.log_scale += gamma * (accept_prob - self.target);
        self.n += 1.0;
        let d = self.dim;
        let dx: Vec<f64> = (0..d).map(|i| x[i] - self.mean[i]).collect();
        for i in 0..d {
            self.mean[i] += dx[i] / self.n;
        }
        for i in 0..d {
            for j in 0..d {
                self.cov[i * d + j] += (dx[i] * (x[j] - self.mean[j]) - self.cov[i * d + j]) / self.n;
            }
        }
        if self.n >= 50.0 && (iter % 10 == 0) {
            let m = Mat::from_fn(d, d, |i, j| self.cov[i * d + j] + if i == j { 1e-6 } else { 0.0 });
            if let Ok(c) = cholesky(&m, 0.0) {
                // Shape from the empirical covariance normalized by its mean sd; the
                // overall size stays with `log_scale`.
                let norm = (0..d).map(|i| c.l[(i, i)]).sum::<f64>() / d as f64;
                for i in 0..d {
                    for j in 0..d {
                        self.chol[i * d + j] = if j <= i { c.l[(i, j)] / norm } else { 0.0 };
                    }
                }
            }
        }
    }
}

const EVENT_HYPER: [HyperName; 3] = [HyperName::Ell1e, HyperName::Omega1e, HyperName::Tau0];
const STATION_HYPER: [HyperName; 3] = [HyperName::Ell1as, HyperName::Omega1as, HyperName::Omega1bs];

pub(crate) struct Gibbs<'a> {
    d: &'a FreqData,
    phase: Phase,
    priors: Priors,
    ev_n: Vec<f64>,
    st_n: Vec<f64>,
    ata: Matrix,
}

pub(crate) struct ChainState {
    pub p: ModelParams,
    pub hs: HyperState,
    cell: Option<CellPrior>,
    walk: AdaptiveWalk,
    white_walk: AdaptiveWalk,
    scale_walk: AdaptiveWalk,
}

impl<'a> Gibbs<'a> {
    pub fn new(d: &'a FreqData, phase: Phase, priors: Priors) -> Self {
        let mut ev_n = vec![0.0; d.n_events()];
        let mut st_n = vec![0.0; d.n_stations()];
        for i in 0..d.n_records() {
            ev_n[d.rec_event[i]] += 1.0;
            st_n[d.rec_station[i]] += 1.0;
        }
        let nc = d.n_cells();
        let mut ata = Mat::<f64>::zeros(nc, nc);
        for row in &d.seg {
            for &(a, la) in row {
                for &(b, lb) in row {
                    ata[(a, b)] += la * lb;
                }
            }
        }
        Self { d, phase, priors, ev_n, st_n, ata }
    }

    pub fn init(&self, hs: HyperState) -> Result<ChainState> {
        let mut p = ModelParams::zeros(self.d);
        let c0 = self.d.c7.min(-1e-6);
        p.c_ca.iter_mut().for_each(|c| *c = c0);
        p.phi0 = hs.phi0;
        p.tau0 = hs.tau0;
        let cell = if self.d.n_cells() > 0 { Some(self.cell_prior(&hs)?) } else { None };
        Ok(ChainState {
            p,
            hs,
            cell,
            walk: AdaptiveWalk::new(3, 0.1, 0.25),
            white_walk: AdaptiveWalk::new(3, 0.1, 0.25),
            scale_walk: AdaptiveWalk::new(1, 0.05, 0.4),
        })
    }

    fn cell_prior(&self, hs: &HyperState) -> Result<CellPrior> {
        let h = hs.hyper;
        CellPrior::new(self.d, [h.ell_ca1, h.omega_ca1, h.omega_ca2])
    }

    fn prior_log(&self, name: HyperName, v: f64) -> f64 {
        name.prior(&self.priors).ln_density_log(v)
    }

    fn free(&self, name: HyperName) -> bool {
        HyperName::free(self.phase).contains(&name)
    }

    /// One full sweep. `iter` counts from zero; adaptation happens while `adapt`.
    pub fn sweep(&self, st: &mut ChainState, iter: usize, adapt: bool, rng: &mut Rng) -> Result<()> {
        self.event_block(st, rng)?;
        self.station_block(st, rng)?;
        if self.d.n_cells() > 0 {
            let v = self.cell_target(st);
            let post = self.cell_block(st, &v, rng)?;
            if self.phase == Phase::One {
                self.cell_hyper(st, &v, post, iter, adapt, rng)?;
            }
        }
        self.phi_block(st, rng);
        st.p.phi0 = st.hs.phi0;
        st.p.tau0 = st.hs.tau0;
        Ok(())
    }

    fn event_block(&self, st: &mut ChainState, rng: &mut Rng) -> Result<()> {
        let d = self.d;
        let ne = d.n_events();
        let mut sum = vec![0.0; ne];
        for i in 0..d.n_records() {
            let s = d.rec_station[i];
            sum[d.rec_event[i]] +=
                d.y[i] - st.p.dc1a[d.station_loc[s]] - st.p.dc1b[s] - d.path_term(i, &st.p.c_ca);
        }
        let rbar: Vec<f64> = (0..ne).map(|e| sum[e] / self.ev_n[e]).collect();
        let blk = UnitBlock { loc_of: &d.event_loc, region: Some(&d.event_dc0e), dist: &d.eq_dist };
        let (sd0, sde) = (self.priors.dc0_sd, self.priors.dc0e_sd);
        let phi2 = st.hs.phi0 * st.hs.phi0;
        let diag = |tau: f64| -> Vec<f64> { self.ev_n.iter().map(|n| tau * tau + phi2 / n).collect() };
        for name in EVENT_HYPER {
            if !self.free(name) {
                continue;
            }
            let base = st.hs;
            let target = |v: f64| {
                let mut h = base;
                h.set(name, v.exp());
                let dg = diag(h.tau0);
                blk.log_marginal(sd0, sde, h.hyper.omega_1e, h.hyper.ell_1e, &dg, &rbar) + self.prior_log(name, v)
            };
            let v = slice_step(base.get(name).ln(), target, 1.0, 8, rng);
            st.hs.set(name, v.exp());
        }
        let h = st.hs;
        let bd = blk.draw(sd0, sde, h.hyper.omega_1e, h.hyper.ell_1e, &diag(h.tau0), &rbar, rng)?;
        st.p.dc0 = bd.dc0;
        st.p.dc0e_north = bd.north;
        st.p.dc0e_south = bd.south;
        st.p.dc1e = bd.gp;
        // δB given everything else.
        let mut rs = vec![0.0; ne];
        for i in 0..d.n_records() {
            let e = d.rec_event[i];
            rs[e] += d.y[i] - self.median_without_db(st, i);
        }
        let tau2 = h.tau0 * h.tau0;
        for e in 0..ne {
            let prec = 1.0 / tau2 + self.ev_n[e] / phi2;
            let mean = rs[e] / phi2 / prec;
            st.p.db[e] = mean + normals(1, rng)[0] / prec.sqrt();
        }
        Ok(())
    }

    fn station_block(&self, st: &mut ChainState, rng: &mut Rng) -> Result<()> {
        let d = self.d;
        let ns = d.n_stations();
        let mut sum = vec![0.0; ns];
        for i in 0..d.n_records() {
            let e = d.rec_event[i];
            sum[d.rec_station[i]] += d.y[i]
                - st.p.dc0e(d.event_dc0e[e])
                - st.p.dc1e[d.event_loc[e]]
                - st.p.db[e]
                - d.path_term(i, &st.p.c_ca);
        }
        let rbar: Vec<f64> = (0..ns).map(|s| sum[s] / self.st_n[s]).collect();
        let blk = UnitBlock { loc_of: &d.station_loc, region: None, dist: &d.sta_dist };
        let sd0 = self.priors.dc0_sd;
        let phi2 = st.hs.phi0 * st.hs.phi0;
        let diag = |w1b: f64| -> Vec<f64> { self.st_n.iter().map(|n| w1b * w1b + phi2 / n).collect() };
        for name in STATION_HYPER {
            if !self.free(name) {
                continue;
            }
            let base = st.hs;
            let target = |v: f64| {
                let mut h = base;
                h.set(name, v.exp());
                let hh = h.hyper;
                blk.log_marginal(sd0, 0.0, hh.omega_1as, hh.ell_1as, &diag(hh.omega_1bs), &rbar)
                    + self.prior_log(name, v)
            };
            let v = slice_step(base.get(name).ln(), target, 1.0, 8, rng);
            st.hs.set(name, v.exp());
        }
        let h = st.hs.hyper;
        let bd = blk.draw(sd0, 0.0, h.omega_1as, h.ell_1as, &diag(h.omega_1bs), &rbar, rng)?;
        st.p.dc0 = bd.dc0;
        st.p.dc1a = bd.gp;
        let mut rs = vec![0.0; ns];
        for i in 0..d.n_records() {
            let e = d.rec_event[i];
            let s = d.rec_station[i];
            rs[s] += d.y[i] - st.p.db[e] - (self.median_without_db(st, i) - st.p.dc1b[s]);
        }
        let b2 = h.omega_1bs * h.omega_1bs;
        for s in 0..ns {
            let prec = 1.0 / b2 + self.st_n[s] / phi2;
            st.p.dc1b[s] = rs[s] / phi2 / prec + normals(1, rng)[0] / prec.sqrt();
        }
        Ok(())
    }

    fn median_without_db(&self, st: &ChainState, i: usize) -> f64 {
        let d = self.d;
        let e = d.rec_event[i];
        let s = d.rec_station[i];
        st.p.dc0
            + st.p.dc0e(d.event_dc0e[e])
            + st.p.dc1e[d.event_loc[e]]
            + st.p.dc1a[d.station_loc[s]]
            + st.p.dc1b[s]
            + d.path_term(i, &st.p.c_ca)
    }

    /// Residual with everything but the path term removed.
    fn cell_target(&self, st: &ChainState) -> Vec<f64> {
        let d = self.d;
        (0..d.n_records())
            .map(|i| {
                d.y[i] - st.p.db[d.rec_event[i]] - (self.median_without_db(st, i) - d.path_term(i, &st.p.c_ca))
            })
            .collect()
    }

    fn path_sse(&self, v: &[f64], c: &[f64]) -> f64 {
        (0..v.len())
            .map(|i| {
                let r = v[i] - self.d.path_term(i, c);
                r * r
            })
            .sum()
    }

    /// Untruncated conditional posterior of the cells given `v`: the factor of
    /// `Q = K⁻¹ + AᵀA/φ²`, the mean, and the θ-dependent part of the log marginal
    /// likelihood of `v`.
    fn cell_posterior(&self, cp: &CellPrior, atr: &[f64], phi2: f64) -> Result<CellPost> {
        let nc = self.d.n_cells();
        let mut q = cp.inv.clone();
        for j in 0..nc {
            for i in 0..nc {
                q[(i, j)] += self.ata[(i, j)] / phi2;
            }
        }
        let qc = cholesky(&q, 0.0)?;
        let b: Vec<f64> = atr.iter().map(|x| x / phi2).collect();
        let delta = qc.solve(&b);
        let quad: f64 = b.iter().zip(&delta).map(|(x, y)| x * y).sum();
        let ln_m = 0.5 * quad - 0.5 * qc.logdet() - 0.5 * cp.chol.logdet();
        let mu = delta.into_iter().map(|x| x + self.d.c7).collect();
        Ok(CellPost { qc, mu, ln_m })
    }

    /// `Aᵀ(v − A·c7)`
    fn cell_atr(&self, v: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut atr = vec![0.0; d.n_cells()];
        for (i, row) in d.seg.iter().enumerate() {
            let r = v[i] - d.c7 * row.iter().map(|s| s.1).sum::<f64>();
            for &(c, l) in row {
                atr[c] += l * r;
            }
        }
        atr
    }

    fn cell_block(&self, st: &mut ChainState, v: &[f64], rng: &mut Rng) -> Result<CellPost> {
        let cp = st.cell.as_ref().expect("cell prior initialised");
        let phi2 = st.hs.phi0 * st.hs.phi0;
        let post = self.cell_posterior(cp, &self.cell_atr(v), phi2)?;
        st.p.c_ca = tmvn_step(&st.p.c_ca, &post.mu, &post.qc, rng)?;
        Ok(post)
    }

    fn cell_hyper(
        &self,
        st: &mut ChainState,
        v: &[f64],
        post: CellPost,
        iter: usize,
        adapt: bool,
        rng: &mut Rng,
    ) -> Result<()> {
        let d = self.d;
        let names = [HyperName::EllCa1, HyperName::OmegaCa1, HyperName::OmegaCa2];
        let prior_sum = |t: &[f64]| -> f64 { names.iter().zip(t).map(|(n, x)| self.prior_log(*n, *x)).sum() };
        let phi2 = st.hs.phi0 * st.hs.phi0;

        // Joint move with the posterior-whitened cells z = L_Qᵀ(c − μ) held fixed;
        // the acceptance ratio reduces to the marginal likelihood ratio.
        {
            let atr = self.cell_atr(v);
            let cur = st.cell.as_ref().expect("cell prior initialised");
            let x: Vec<f64> = cur.theta.iter().map(|t| t.ln()).collect();
            let y = st.white_walk.propose(&x, rng);
            let theta = [y[0].exp(), y[1].exp(), y[2].exp()];
            let mut acc = 0.0;
            let mut prop = None;
            if let Ok(cp) = CellPrior::new(d, theta) {
                if let Ok(np) = self.cell_posterior(&cp, &atr, phi2) {
                    let dev: Vec<f64> = st.p.c_ca.iter().zip(&post.mu).map(|(c, m)| c - m).collect();
                    let z = post.qc.mul_lt(&dev);
                    let c_new: Vec<f64> = np.qc.backward(&z).iter().zip(&np.mu).map(|(a, m)| a + m).collect();
                    if c_new.iter().all(|c| *c <= 0.0) {
                        acc = (np.ln_m - post.ln_m + prior_sum(&y) - prior_sum(&x)).min(0.0).exp();
                        prop = Some((cp, c_new));
                    }
                }
            }
            if rng.random::<f64>() < acc {
                let (cp, c_new) = prop.expect("acceptance implies a proposal");
                st.cell = Some(cp);
                st.p.c_ca = c_new;
            }
            if adapt {
                let now: Vec<f64> = st.cell.as_ref().unwrap().theta.iter().map(|t| t.ln()).collect();
                st.white_walk.adapt(&now, acc, iter);
            }
        }

        // Random walk on (ln ℓ, ln ω1, ln ω2) with the cells fixed.
        {
            let cur = st.cell.as_ref().expect("cell prior initialised");
            let x: Vec<f64> = cur.theta.iter().map(|t| t.ln()).collect();
            let lp_cur = cur.ln_density(&st.p.c_ca, d.c7) + prior_sum(&x);
            let y = st.walk.propose(&x, rng);
            let theta = [y[0].exp(), y[1].exp(), y[2].exp()];
            let (acc, prop) = match CellPrior::new(d, theta) {
                Ok(cp) => {
                    let lp = cp.ln_density(&st.p.c_ca, d.c7) + prior_sum(&y);
                    ((lp - lp_cur).min(0.0).exp(), Some(cp))
                }
                Err(_) => (0.0, None),
            };
            if rng.random::<f64>() < acc {
                st.cell = prop;
            }
            if adapt {
                let now: Vec<f64> = st.cell.as_ref().unwrap().theta.iter().map(|t| t.ln()).collect();
                st.walk.adapt(&now, acc, iter);
            }
        }

        // Joint rescaling of the cell deviations and both ω's.
        let cur = st.cell.as_ref().unwrap().clone();
        let ls = st.scale_walk.propose(&[0.0], rng)[0];
        let s = ls.exp();
        let c_new: Vec<f64> = st.p.c_ca.iter().map(|c| d.c7 + s * (c - d.c7)).collect();
        let mut acc = 0.0;
        if c_new.iter().all(|c| *c <= 0.0) {
            let dl = -(self.path_sse(v, &c_new) - self.path_sse(v, &st.p.c_ca)) / (2.0 * phi2);
            let x: Vec<f64> = cur.theta.iter().map(|t| t.ln()).collect();
            let y = [x[0], x[1] + ls, x[2] + ls];
            let dp = prior_sum(&y) - prior_sum(&x);
            acc = (dl + dp).min(0.0).exp();
            if rng.random::<f64>() < acc {
                let mut l = cur.chol.l.clone();
                for j in 0..l.ncols() {
                    for i in 0..l.nrows() {
                        l[(i, j)] *= s;
                    }
                }
                let mut inv = cur.inv.clone();
                for j in 0..inv.ncols() {
                    for i in 0..inv.nrows() {
                        inv[(i, j)] /= s * s;
                    }
                }
                st.cell = Some(CellPrior {
                    theta: [cur.theta[0], cur.theta[1] * s, cur.theta[2] * s],
                    chol: Chol { l, jitter: cur.chol.jitter * s * s },
                    inv,
                });
                st.p.c_ca = c_new;
            }
        }
        if adapt {
            st.scale_walk.adapt(&[0.0], acc, iter);
        }
        let th = st.cell.as_ref().unwrap().theta;
        st.hs.hyper.ell_ca1 = th[0];
        st.hs.hyper.omega_ca1 = th[1];
        st.hs.hyper.omega_ca2 = th[2];
        Ok(())
    }

    fn phi_block(&self, st: &mut ChainState, rng: &mut Rng) {
        let d = self.d;
        let n = d.n_records() as f64;
        let sse: f64 = (0..d.n_records())
            .map(|i| {
                let r = d.y[i] - st.p.db[d.rec_event[i]] - self.median_without_db(st, i);
                r * r
            })
            .sum();
        let target = |v: f64| -n * v - 0.5 * sse * (-2.0 * v).exp() + self.prior_log(HyperName::Phi0, v);
        st.hs.phi0 = slice_step(st.hs.phi0.ln(), target, 0.5, 8, rng).exp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::distance_matrix;
    use crate::geo::XY;
    use rand::SeedableRng;

    #[test]
    fn block_draw_matches_closed_form_posterior() {
        // Two units at distinct locations, no regions: the posterior of
        // (δc0, gp) is Gaussian; compare sample mean of δc0 with P·Xᵀ·C⁻¹·r.
        let pts = [XY::new(0.0, 0.0), XY::new(10.0, 0.0)];
        let dist = distance_matrix(&pts);
        let loc = [0usize, 1];
        let blk = UnitBlock { loc_of: &loc, region: None, dist: &dist };
        let diag = [0.04, 0.09];
        let r = [0.3, -0.1];
        let c = cholesky(&blk.cov(0.1, 0.0, 0.3, 20.0, &diag), 0.0).unwrap();
        let v = c.solve(&r);
        let expect = 0.01 * (v[0] + v[1]);
        let mut rng = Rng::seed_from_u64(9);
        let n = 40_000;
        let mut m = 0.0;
        for _ in 0..n {
            m += blk.draw(0.1, 0.0, 0.3, 20.0, &diag, &r, &mut rng).unwrap().dc0;
        }
        m /= n as f64;
        assert!((m - expect).abs() < 2e-3, "{m} vs {expect}");
    }
}
