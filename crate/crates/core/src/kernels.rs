//! Spatial covariance functions.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::XY;
use crate::linalg::Matrix;

/// Relative diagonal jitter applied before factorization.
pub const JITTER_REL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Exponential,
    ExponentialPlusNugget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub omega: f64,
    pub ell: f64,
    #[serde(default)]
    pub omega_nugget: f64,
}

impl KernelSpec {
    pub fn exponential(omega: f64, ell: f64) -> Self {
        Self { family: KernelFamily::Exponential, omega, ell, omega_nugget: 0.0 }
    }

    pub fn cell(omega1: f64, ell: f64, omega2: f64) -> Self {
        Self { family: KernelFamily::ExponentialPlusNugget, omega: omega1, ell, omega_nugget: omega2 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.omega >= 0.0
            && self.ell > 0.0
            && self.omega_nugget >= 0.0
            && self.omega.is_finite()
            && self.ell.is_finite()
            && self.omega_nugget.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid kernel {self:?}")))
        }
    }

    fn nugget2(&self) -> f64 {
        match self.family {
            KernelFamily::Exponential => 0.0,
            KernelFamily::ExponentialPlusNugget => self.omega_nugget * self.omega_nugget,
        }
    }

    /// Marginal variance at a single location.
    pub fn variance(&self) -> f64 {
        self.omega * self.omega + self.nugget2()
    }

    pub fn jitter(&self) -> f64 {
        JITTER_REL * self.variance()
    }

    /// Covariance at separation `d`; `same` marks an identical location (or cell),
    /// which also receives the factorization jitter.
    pub fn at(&self, d: f64, same: bool) -> f64 {
        let base = self.omega * self.omega * (-d / self.ell).exp();
        if same {
            base + self.nugget2() + self.jitter()
        } else {
            base
        }
    }
}

/// ω² · exp(−‖a−b‖/ℓ)
pub fn cov_exponential(spec: &KernelSpec, a: XY, b: XY) -> f64 {
    spec.omega * spec.omega * (-a.dist(&b) / spec.ell).exp()
}

/// ω₁² · exp(−‖a−b‖/ℓ) + ω₂² · [same cell]
pub fn cov_cell(spec: &KernelSpec, a: XY, b: XY, same_cell: bool) -> f64 {
    let nug = if same_cell { spec.omega_nugget * spec.omega_nugget } else { 0.0 };
    spec.omega * spec.omega * (-a.dist(&b) / spec.ell).exp() + nug
}

/// Gram matrix without jitter. Distinct list entries are distinct locations, so
/// the nugget sits on the diagonal only.
pub fn cov_matrix(spec: &KernelSpec, pts: &[XY]) -> Result<Matrix> {
    spec.validate()?;
    if pts.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("non-finite coordinate in covariance input"));
    }
    let n = pts.len();
    let nug = spec.nugget2();
    let w2 = spec.omega * spec.omega;
    let mut k = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = w2 + nug;
        for i in (j + 1)..n {
            let v = w2 * (-pts[i].dist(&pts[j]) / spec.ell).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Gram matrix with the factorization jitter on the diagonal.
pub fn gram(spec: &KernelSpec, pts: &[XY]) -> Result<Matrix> {
    let mut k = cov_matrix(spec, pts)?;
    let jit = spec.jitter();
    for i in 0..pts.len() {
        k[(i, i)] += jit;
    }
    Ok(k)
}

/// Pairwise distances.
pub fn distance_matrix(pts: &[XY]) -> Matrix {
    let n = pts.len();
    let mut d = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = pts[i].dist(&pts[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// exp(−D/ℓ) elementwise.
pub fn exp_correlation(dist: &Matrix, ell: f64) -> Matrix {
    let n = dist.nrows();
    let mut r = Mat::<f64>::zeros(n, n);
    let inv = 1.0 / ell;
    for j in 0..n {
        r[(j, j)] = (-dist[(j, j)] * inv).exp();
        for i in (j + 1)..n {
            let v = (-dist[(i, j)] * inv).exp();
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_values() {
        let s = KernelSpec::exponential(1.0, 10.0);
        let a = XY::new(0.0, 0.0);
        assert_eq!(cov_exponential(&s, a, a), 1.0);
        assert!((cov_exponential(&s, a, XY::new(6.0, 8.0)) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(cov_exponential(&s, a, XY::new(1e6, 0.0)), 0.0);
    }

    #[test]
    fn cell_values() {
        let s = KernelSpec::cell(1.0, 20.0, 0.5);
        let a = XY::new(0.0, 0.0);
        assert_eq!(cov_cell(&s, a, a, true), 1.25);
        assert!((cov_cell(&s, a, XY::new(20.0, 0.0), false) - (-1.0f64).exp()).abs() < 1e-15);
        let pure = KernelSpec::cell(0.0, 20.0, 0.5);
        assert_eq!(cov_cell(&pure, a, XY::new(1.0, 0.0), false), 0.0);
        assert_eq!(cov_cell(&pure, a, a, true), 0.25);
    }

    #[test]
    fn single_point_gram() {
        let s = KernelSpec::cell(0.3, 20.0, 0.4);
        let k = cov_matrix(&s, &[XY::new(1.0, 2.0)]).unwrap();
        assert!((k[(0, 0)] - 0.25).abs() < 1e-15);
        assert!(cov_matrix(&s, &[XY::new(f64::NAN, 0.0)]).is_err());
    }
}
