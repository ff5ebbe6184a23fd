//! Exact Hamiltonian Monte Carlo for a Gaussian truncated to the negative orthant.
//!
//! The target is `N(μ, Q⁻¹)` restricted to `x ≤ 0`. Trajectories are the exact
//! elliptical orbits `x(t) = μ + a·cos t + b·sin t`; on hitting a wall the velocity
//! is reflected in the metric of the covariance.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Chol;
use crate::rng::Rng;

const MAX_BOUNCES: usize = 100_000;

/// One trajectory of length `π/2` from the feasible point `x0`.
/// `q_chol` factors the precision `Q`.
pub fn tmvn_step(x0: &[f64], mu: &[f64], q_chol: &Chol, rng: &mut Rng) -> Result<Vec<f64>> {
    let n = x0.len();
    if x0.iter().any(|&v| v > 0.0) {
        return Err(Error::invalid("truncated sampler started outside the feasible set"));
    }
    let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut b = q_chol.backward(&xi);
    let mut a: Vec<f64> = x0.iter().zip(mu).map(|(x, m)| x - m).collect();
    let mut remaining = std::f64::consts::FRAC_PI_2;
    let mut sdiag: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut last_wall: Option<usize> = None;

    for _ in 0..MAX_BOUNCES {
        let mut hit: Option<(f64, usize)> = None;
        for j in 0..n {
            let r = a[j].hypot(b[j]);
            if r == 0.0 || -mu[j] > r {
                continue;
            }
            let phase = b[j].atan2(a[j]);
            let delta = (-mu[j] / r).clamp(-1.0, 1.0).acos();
            for cand in [phase + delta, phase - delta] {
                let mut t = cand.rem_euclid(std::f64::consts::TAU);
                let tiny = if last_wall == Some(j) { 1e-9 } else { 1e-14 };
                if t <= tiny {
                    t += std::f64::consts::TAU;
                }
                if t >= remaining {
                    continue;
                }
                let vel = -a[j] * t.sin() + b[j] * t.cos();
                if vel <= 0.0 {
                    continue;
                }
                if hit.is_none_or(|(th, _)| t < th) {
                    hit = Some((t, j));
                }
            }
        }
        match hit {
            None => {
                let (s, c) = remaining.sin_cos();
                return Ok((0..n).map(|i| (mu[i] + a[i] * c + b[i] * s).min(0.0)).collect());
            }
            Some((t, j)) => {
                let (s, c) = t.sin_cos();
                let mut pos: Vec<f64> = (0..n).map(|i| a[i] * c + b[i] * s).collect();
                let mut vel: Vec<f64> = (0..n).map(|i| -a[i] * s + b[i] * c).collect();
                pos[j] = -mu[j];
                let col = sdiag[j].get_or_insert_with(|| q_chol.inverse_col(j));
                let k = 2.0 * vel[j] / col[j];
                for i in 0..n {
                    vel[i] -= k * col[i];
                }
                a = pos;
                b = vel;
                remaining -= t;
                last_wall = Some(j);
            }
        }
    }
    Err(Error::Convergence("truncated sampler exceeded the bounce limit".into()))
}
