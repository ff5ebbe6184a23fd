//! No-U-turn sampler with multinomial trajectory sampling, dual-averaging step
//! size adaptation and windowed diagonal metric adaptation.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NutsSettings {
    pub target_accept: f64,
    pub max_tree_depth: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NutsStats {
    pub step_size: f64,
    pub divergences: usize,
    pub mean_accept: f64,
    pub mean_tree_depth: f64,
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
    lp: f64,
}

struct Subtree {
    rho: Vec<f64>,
    sharp_beg: Vec<f64>,
    sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    log_w: f64,
    proposal: Point,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn no_uturn(sharp_a: &[f64], sharp_b: &[f64], rho: &[f64]) -> bool {
    dot(sharp_a, rho) > 0.0 && dot(sharp_b, rho) > 0.0
}

struct Sampler<'f, F> {
    f: &'f F,
    inv_metric: Vec<f64>,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

impl<F> Sampler<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(a, m)| a * a * m).sum::<f64>()
    }

    fn sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(a, m)| a * m).collect()
    }

    fn eval(&self, q: &[f64]) -> (f64, Vec<f64>) {
        match (self.f)(q) {
            Ok((lp, g)) if lp.is_finite() && g.iter().all(|v| v.is_finite()) => (lp, g),
            _ => (f64::NEG_INFINITY, vec![0.0; q.len()]),
        }
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        let n = z.q.len();
        for i in 0..n {
            z.p[i] += 0.5 * eps * z.g[i];
        }
        for i in 0..n {
            z.q[i] += eps * self.inv_metric[i] * z.p[i];
        }
        let (lp, g) = self.eval(&z.q);
        z.lp = lp;
        z.g = g;
        for i in 0..n {
            z.p[i] += 0.5 * eps * z.g[i];
        }
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.lp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn build(&mut self, depth: usize, z: &mut Point, eps: f64, h0: f64, rng: &mut Rng) -> Option<Subtree> {
        if depth == 0 {
            self.leapfrog(z, eps);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
                return None;
            }
            let log_w = h0 - h;
            self.sum_metro += if log_w > 0.0 { 1.0 } else { log_w.exp() };
            let s = self.sharp(&z.p);
            return Some(Subtree {
                rho: z.p.clone(),
                sharp_beg: s.clone(),
                sharp_end: s,
                p_beg: z.p.clone(),
                p_end: z.p.clone(),
                log_w,
                proposal: z.clone(),
            });
        }
        let left = self.build(depth - 1, z, eps, h0, rng)?;
        let right = self.build(depth - 1, z, eps, h0, rng)?;
        let log_w = log_add(left.log_w, right.log_w);
        let take_right = rng.random::<f64>().ln() < right.log_w - log_w;
        let rho = add(&left.rho, &right.rho);
        let mut ok = no_uturn(&left.sharp_beg, &right.sharp_end, &rho);
        ok &= no_uturn(&left.sharp_beg, &right.sharp_beg, &add(&left.rho, &right.p_beg));
        ok &= no_uturn(&left.sharp_end, &right.sharp_end, &add(&right.rho, &left.p_end));
        if !ok {
            return None;
        }
        Some(Subtree {
            rho,
            sharp_beg: left.sharp_beg,
            sharp_end: right.sharp_end,
            p_beg: left.p_beg,
            p_end: right.p_end,
            log_w,
            proposal: if take_right { right.proposal } else { left.proposal },
        })
    }

    /// One NUTS transition; returns the new point, acceptance statistic and depth.
    fn transition(&mut self, cur: &Point, eps: f64, max_depth: usize, rng: &mut Rng) -> (Point, f64, usize) {
        let n = cur.q.len();
        let mut z0 = cur.clone();
        z0.p = (0..n)
            .map(|i| {
                let x: f64 = StandardNormal.sample(rng);
                x / self.inv_metric[i].sqrt()
            })
            .collect();
        let h0 = self.hamiltonian(&z0);
        self.n_leapfrog = 0;
        self.sum_metro = 0.0;
        self.divergent = false;

        let mut fwd = z0.clone();
        let mut bck = z0.clone();
        let s0 = self.sharp(&z0.p);
        let (mut sharp_fwd, mut sharp_bck) = (s0.clone(), s0);
        let (mut p_fwd, mut p_bck) = (z0.p.clone(), z0.p.clone());
        let mut rho = z0.p.clone();
        let mut log_w = 0.0;
        let mut sample = z0;
        let mut depth = 0;
        while depth < max_depth {
            let forward = rng.random::<bool>();
            let sub = if forward {
                self.build(depth, &mut fwd, eps, h0, rng)
            } else {
                self.build(depth, &mut bck, -eps, h0, rng)
            };
            let Some(sub) = sub else { break };
            depth += 1;
            if sub.log_w > log_w || rng.random::<f64>() < (sub.log_w - log_w).exp() {
                sample = sub.proposal.clone();
            }
            log_w = log_add(log_w, sub.log_w);
            let old_rho = rho.clone();
            rho = add(&rho, &sub.rho);
            let (far_sharp, adj_sharp, adj_p) = if forward {
                (&sharp_bck, &sharp_fwd, &p_fwd)
            } else {
                (&sharp_fwd, &sharp_bck, &p_bck)
            };
            let mut ok = no_uturn(far_sharp, &sub.sharp_end, &rho);
            ok &= no_uturn(far_sharp, &sub.sharp_beg, &add(&old_rho, &sub.p_beg));
            ok &= no_uturn(adj_sharp, &sub.sharp_end, &add(&sub.rho, adj_p));
            if forward {
                sharp_fwd = sub.sharp_end;
                p_fwd = sub.p_end;
            } else {
                sharp_bck = sub.sharp_end;
                p_bck = sub.p_end;
            }
            if !ok {
                break;
            }
        }
        let accept = if self.n_leapfrog > 0 { self.sum_metro / self.n_leapfrog as f64 } else { 0.0 };
        (sample, accept, depth)
    }
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        Self { mu: (10.0 * eps).ln(), h_bar: 0.0, log_eps_bar: 0.0, t: 0.0, target }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let w = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let eta = self.t.powf(-KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_eps(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// End points (exclusive) of the slow metric-adaptation windows.
fn window_ends(warmup: usize) -> Vec<usize> {
    let (init, term, base) = if warmup < 150 {
        ((warmup as f64 * 0.15) as usize, (warmup as f64 * 0.1) as usize, 0)
    } else {
        (75, 50, 25)
    };
    let end = warmup.saturating_sub(term);
    let base = if base == 0 { end.saturating_sub(init).max(1) } else { base };
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < end {
        let mut stop = start + size;
        if stop + 2 * size > end {
            stop = end;
        }
        ends.push(stop);
        start = stop;
        size *= 2;
    }
    ends
}

fn initial_step(s: &Sampler<'_, impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>>, z: &Point, rng: &mut Rng) -> f64 {
    let n = z.q.len();
    let mut eps = 0.1;
    let p: Vec<f64> = (0..n)
        .map(|i| {
            let x: f64 = StandardNormal.sample(rng);
            x / s.inv_metric[i].sqrt()
        })
        .collect();
    let mut z0 = z.clone();
    z0.p = p;
    let h0 = s.hamiltonian(&z0);
    let mut dir = 0.0;
    for _ in 0..50 {
        let mut z1 = z0.clone();
        s.leapfrog(&mut z1, eps);
        let delta = h0 - s.hamiltonian(&z1);
        let d = if delta > (0.8f64).ln() { 1.0 } else { -1.0 };
        if dir == 0.0 {
            dir = d;
        } else if d != dir {
            break;
        }
        eps = if dir > 0.0 { eps * 2.0 } else { eps * 0.5 };
        if !(1e-8..=1e3).contains(&eps) {
            break;
        }
    }
    eps
}

/// Runs one chain from `q0`; returns the retained unconstrained draws.
pub fn run_chain<F>(
    f: &F,
    q0: Vec<f64>,
    warmup: usize,
    draws: usize,
    settings: NutsSettings,
    rng: &mut Rng,
) -> Result<(Vec<Vec<f64>>, NutsStats)>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = q0.len();
    let (lp, g) = f(&q0)?;
    if !lp.is_finite() {
        return Err(Error::invalid("initial state has non-finite log density"));
    }
    let mut s = Sampler { f, inv_metric: vec![1.0; n], n_leapfrog: 0, sum_metro: 0.0, divergent: false };
    let mut cur = Point { q: q0, p: vec![0.0; n], g, lp };
    let mut eps = initial_step(&s, &cur, rng);
    let mut da = DualAveraging::new(eps, settings.target_accept);
    let ends = window_ends(warmup);
    let mut win_start = if warmup < 150 { (warmup as f64 * 0.15) as usize } else { 75 };
    let mut wmean = vec![0.0; n];
    let mut wm2 = vec![0.0; n];
    let mut wcount = 0.0;
    let mut out = Vec::with_capacity(draws);
    let mut stats = NutsStats::default();
    for it in 0..(warmup + draws) {
        let (next, acc, depth) = s.transition(&cur, eps, settings.max_tree_depth, rng);
        cur = next;
        if s.divergent && it >= warmup {
            stats.divergences += 1;
        }
        if it < warmup {
            eps = da.update(acc);
            if it >= win_start && ends.iter().any(|&e| it < e) {
                wcount += 1.0;
                for i in 0..n {
                    let d = cur.q[i] - wmean[i];
                    wmean[i] += d / wcount;
                    wm2[i] += d * (cur.q[i] - wmean[i]);
                }
            }
            if ends.contains(&(it + 1)) && wcount > 2.0 {
                for i in 0..n {
                    let var = wm2[i] / (wcount - 1.0);
                    s.inv_metric[i] = (wcount / (wcount + 5.0)) * var + 1e-3 * (5.0 / (wcount + 5.0));
                }
                wmean.iter_mut().for_each(|v| *v = 0.0);
                wm2.iter_mut().for_each(|v| *v = 0.0);
                wcount = 0.0;
                win_start = it + 1;
                eps = initial_step(&s, &cur, rng);
                da = DualAveraging::new(eps, settings.target_accept);
            }
            if it + 1 == warmup {
                eps = da.final_eps();
            }
        } else {
            stats.mean_accept += acc;
            stats.mean_tree_depth += depth as f64;
            out.push(cur.q.clone());
        }
    }
    if draws > 0 {
        stats.mean_accept /= draws as f64;
        stats.mean_tree_depth /= draws as f64;
    }
    stats.step_size = eps;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn correlated_gaussian_moments() {
        // N(0, Σ) with Σ = [[1, .9], [.9, 1]] scaled anisotropically.
        let s = [1.0, 3.0];
        let rho: f64 = 0.9;
        let f = |q: &[f64]| -> Result<(f64, Vec<f64>)> {
            let a = q[0] / s[0];
            let b = q[1] / s[1];
            let det = 1.0 - rho * rho;
            let lp = -0.5 * (a * a - 2.0 * rho * a * b + b * b) / det;
            let ga = -(a - rho * b) / det / s[0];
            let gb = -(b - rho * a) / det / s[1];
            Ok((lp, vec![ga, gb]))
        };
        let mut rng = Rng::seed_from_u64(21);
        let settings = NutsSettings { target_accept: 0.8, max_tree_depth: 8 };
        let (d, st) = run_chain(&f, vec![0.5, -0.5], 500, 4000, settings, &mut rng).unwrap();
        let n = d.len() as f64;
        let m1 = d.iter().map(|x| x[1]).sum::<f64>() / n;
        let v1 = d.iter().map(|x| (x[1] - m1).powi(2)).sum::<f64>() / n;
        let c01 = d.iter().map(|x| x[0] * x[1]).sum::<f64>() / n;
        assert!(m1.abs() < 0.3, "mean {m1}");
        assert!((v1 / 9.0 - 1.0).abs() < 0.15, "var {v1}");
        assert!((c01 / 2.7 - 1.0).abs() < 0.2, "cov {c01}");
        assert_eq!(st.divergences, 0);
        assert!(st.mean_accept > 0.6);
    }

    #[test]
    fn windows_fit_inside_warmup() {
        for w in [10, 100, 150, 1000] {
            let e = window_ends(w);
            assert!(e.iter().all(|&x| x <= w));
            assert!(e.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
