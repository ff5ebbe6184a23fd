//! Univariate slice sampling with stepping out and shrinkage.

use rand::Rng as _;

use crate::rng::Rng;

/// One slice update of `x0` under the unnormalized log density `logf`.
/// `w` is the initial bracket width; at most `max_steps` expansions per side.
pub fn slice_step(x0: f64, logf: impl Fn(f64) -> f64, w: f64, max_steps: usize, rng: &mut Rng) -> f64 {
    let f0 = logf(x0);
    if !f0.is_finite() {
        return x0;
    }
    let level = f0 + rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
    let u: f64 = rng.random();
    let mut lo = x0 - w * u;
    let mut hi = lo + w;
    let j = rng.random_range(0..max_steps.max(1));
    let mut k = max_steps.max(1) - 1 - j;
    let mut j = j;
    while j > 0 && logf(lo) > level {
        lo -= w;
        j -= 1;
    }
    while k > 0 && logf(hi) > level {
        hi += w;
        k -= 1;
    }
    for _ in 0..200 {
        let x1 = lo + rng.random::<f64>() * (hi - lo);
        if logf(x1) > level {
            return x1;
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
        if hi - lo < 1e-12 * w {
            break;
        }
    }
    x0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn samples_standard_normal() {
        let mut rng = Rng::seed_from_u64(3);
        let mut x = 0.0;
        let mut s = 0.0;
        let mut s2 = 0.0;
        let n = 20_000;
        for _ in 0..n {
            x = slice_step(x, |v| -0.5 * v * v, 1.0, 20, &mut rng);
            s += x;
            s2 += x * x;
        }
        let m = s / n as f64;
        let v = s2 / n as f64 - m * m;
        assert!(m.abs() < 0.05, "mean {m}");
        assert!((v - 1.0).abs() < 0.06, "var {v}");
    }
}
