//! Split-R̂, effective sample size and quantiles for multi-chain draws.

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Potential scale reduction on chains split in half.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        let h = c.len() / 2;
        if h < 2 {
            return f64::NAN;
        }
        halves.push(&c[..h]);
        halves.push(&c[c.len() - h..]);
    }
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let w = halves.iter().map(|c| var(c)).sum::<f64>() / halves.len() as f64;
    let b = n * var(&means);
    if w <= 0.0 {
        // Constant chains: agree only if their means agree.
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let vhat = (n - 1.0) / n * w + b / n;
    (vhat / w).sqrt()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    if m == 0 {
        return 0.0;
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 4 {
        return n as f64 * m as f64;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within: Vec<f64> = chains.iter().map(|c| var(c)).collect();
    let w = mean(&within);
    let b_over_n = if m > 1 { var(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return (n * m) as f64;
    }
    let autocov = |lag: usize| -> f64 {
        let mut s = 0.0;
        for (c, mu) in chains.iter().zip(&means) {
            let mut acc = 0.0;
            for t in 0..(n - lag) {
                acc += (c[t] - mu) * (c[t + lag] - mu);
            }
            s += acc / n as f64;
        }
        s / m as f64
    };
    let rho = |lag: usize| 1.0 - (w - autocov(lag)) / var_plus;
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let r0 = if t == 0 { 1.0 } else { rho(t) };
        let r1 = rho(t + 1);
        let mut pair = r0 + r1;
        if pair < 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        prev_pair = pair;
        sum_pairs += pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / ((n * m) as f64).log10().max(1.0));
    ((n * m) as f64 / tau).min((n * m) as f64 * (n * m) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert!((quantile(&s, 0.05) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn rhat_of_shifted_chains_is_large() {
        let a: Vec<f64> = (0..200).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 5.0).collect();
        assert!(split_rhat(&[a.clone(), b]) > 2.0);
        assert!(split_rhat(&[a.clone(), a]) < 1.05);
    }

    #[test]
    fn ess_of_strongly_autocorrelated_chain_is_small() {
        let mut x = 0.0;
        let mut lcg: u64 = 12345;
        let mut c = Vec::new();
        for _ in 0..2000 {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (lcg >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            x = 0.95 * x + u;
            c.push(x);
        }
        let e = ess(&[c]);
        // AR(1) with ρ = 0.95: ESS ≈ n(1−ρ)/(1+ρ) ≈ 51
        assert!(e > 20.0 && e < 120.0, "ess {e}");
    }
}
