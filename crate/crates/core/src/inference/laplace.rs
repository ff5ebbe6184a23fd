//! Posterior mode by L-BFGS and a Gaussian approximation from a finite-difference Hessian.

use faer::Mat;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, symmetrize, Chol};
use crate::rng::Rng;

const MEMORY: usize = 8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f` (log density with gradient) from `x0`.
pub fn maximize<F>(f: &F, x0: Vec<f64>, max_iter: usize, gtol: f64) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let (lp, g) = f(&x)?;
    if !lp.is_finite() {
        return Err(Error::invalid("optimizer started at a non-finite log density"));
    }
    let mut fx = -lp;
    let mut gx: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    for _ in 0..max_iter {
        let gnorm = gx.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gnorm < gtol {
            return Ok((x, -fx));
        }
        // Two-loop recursion.
        let mut q = gx.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for j in 0..n {
                q[j] -= alpha[i] * y_hist[i][j];
            }
        }
        let gamma = if k > 0 { dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]) } else { 1.0 / gnorm.max(1.0) };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for j in 0..n {
                q[j] += (alpha[i] - beta) * s_hist[i][j];
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &gx);
        if slope >= 0.0 {
            dir = gx.iter().map(|v| -v).collect();
            slope = dot(&dir, &gx);
            s_hist.clear();
            y_hist.clear();
        }
        // Backtracking Armijo line search.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Ok((lpn, gn)) = f(&xn) {
                let fnew = -lpn;
                if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fnew, gn.iter().map(|v| -v).collect::<Vec<f64>>()));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            return Ok((x, -fx));
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&gx).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let converged = (fx - fnew).abs() < 1e-12 * fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        gx = gnew;
        if converged {
            break;
        }
    }
    Ok((x, -fx))
}

/// Factor of the negative Hessian at `x` by central differences of the gradient.
pub fn neg_hessian_chol<F>(f: &F, x: &[f64]) -> Result<Chol>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x.len();
    let mut h = Mat::<f64>::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let step = 1e-5 * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let (_, gp) = f(&xp)?;
        xp[j] = x[j] - step;
        let (_, gm) = f(&xp)?;
        xp[j] = x[j];
        for i in 0..n {
            h[(i, j)] = -(gp[i] - gm[i]) / (2.0 * step);
        }
    }
    symmetrize(&mut h);
    cholesky(&h, 0.0)
}

/// Draws from `N(mode, H⁻¹)` given the factor of `H`.
pub fn gaussian_draws(mode: &[f64], h: &Chol, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..mode.len()).map(|_| StandardNormal.sample(rng)).collect();
            let d = h.backward(&z);
            mode.iter().zip(d).map(|(m, v)| m + v).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_mode_and_curvature() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let lp = -0.5 * (4.0 * (x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2));
            Ok((lp, vec![-4.0 * (x[0] - 1.0), -(x[1] + 2.0)]))
        };
        let (m, _) = maximize(&f, vec![0.0, 0.0], 200, 1e-10).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-8 && (m[1] + 2.0).abs() < 1e-8);
        let h = neg_hessian_chol(&f, &m).unwrap();
        assert!((h.l[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((h.l[(1, 1)] - 1.0).abs() < 1e-6);
    }
}
