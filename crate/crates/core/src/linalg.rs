//! Dense symmetric linear algebra on top of faer.

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Mat, Par, Side};

use crate::error::{Error, Result};

pub type Matrix = Mat<f64>;

const MAX_JITTER_STEPS: usize = 8;

/// Lower Cholesky factor with the diagonal jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct Chol {
    pub l: Matrix,
    pub jitter: f64,
}

/// Factorizes `a + jitter·I`, escalating the jitter tenfold on failure.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<Chol> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Factorization(format!("non-square {}x{}", n, a.ncols())));
    }
    if n == 0 {
        return Ok(Chol { l: Mat::zeros(0, 0), jitter });
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut jit = jitter;
    for _ in 0..=MAX_JITTER_STEPS {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jit;
        }
        if let Ok(llt) = b.as_ref().llt(Side::Lower) {
            let l = llt.L().to_owned();
            if (0..n).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0) {
                return Ok(Chol { l, jitter: jit });
            }
        }
        jit = if jit > 0.0 { jit * 10.0 } else { 1e-12 * scale };
    }
    Err(Error::Factorization(format!("matrix of size {n} not positive definite (jitter up to {jit:.3e})")))
}

impl Chol {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn logdet(&self) -> f64 {
        (0..self.dim()).map(|i| 2.0 * self.l[(i, i)].ln()).sum()
    }

    /// L⁻¹ b
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut m = col(b);
        solve_lower_triangular_in_place(self.l.as_ref(), m.as_mut(), Par::Seq);
        to_vec(&m)
    }

    /// L⁻ᵀ b
    pub fn backward(&self, b: &[f64]) -> Vec<f64> {
        let mut m = col(b);
        solve_upper_triangular_in_place(self.l.transpose(), m.as_mut(), Par::Seq);
        to_vec(&m)
    }

    /// A⁻¹ b
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut m = col(b);
        solve_lower_triangular_in_place(self.l.as_ref(), m.as_mut(), Par::Seq);
        solve_upper_triangular_in_place(self.l.transpose(), m.as_mut(), Par::Seq);
        to_vec(&m)
    }

    /// A⁻¹ B
    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        let mut m = b.clone();
        solve_lower_triangular_in_place(self.l.as_ref(), m.as_mut(), Par::Seq);
        solve_upper_triangular_in_place(self.l.transpose(), m.as_mut(), Par::Seq);
        m
    }

    /// L⁻¹ B
    pub fn forward_mat(&self, b: &Matrix) -> Matrix {
        let mut m = b.clone();
        solve_lower_triangular_in_place(self.l.as_ref(), m.as_mut(), Par::Seq);
        m
    }

    /// L z
    pub fn mul_l(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            let c = self.l.col_as_slice(j);
            for i in j..n {
                out[i] += c[i] * zj;
            }
        }
        out
    }

    /// Lᵀ z
    pub fn mul_lt(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|j| {
                let c = self.l.col_as_slice(j);
                (j..n).map(|i| c[i] * z[i]).sum()
            })
            .collect()
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut m = Mat::<f64>::identity(n, n);
        solve_lower_triangular_in_place(self.l.as_ref(), m.as_mut(), Par::Seq);
        solve_upper_triangular_in_place(self.l.transpose(), m.as_mut(), Par::Seq);
        symmetrize(&mut m);
        m
    }

    /// Column `j` of A⁻¹.
    pub fn inverse_col(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.dim()];
        e[j] = 1.0;
        self.solve(&e)
    }
}

pub fn col(b: &[f64]) -> Matrix {
    Mat::from_fn(b.len(), 1, |i, _| b[i])
}

pub fn to_vec(m: &Matrix) -> Vec<f64> {
    m.col_as_slice(0).to_vec()
}

pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn matvec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let c = a.col_as_slice(j);
        for (o, v) in out.iter_mut().zip(c) {
            *o += v * xj;
        }
    }
    out
}

pub fn matvec_t(a: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..a.ncols()).map(|j| dot(a.col_as_slice(j), x)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigen-decomposition of a symmetric matrix; eigenvalues ascending.
pub fn sym_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let evd = a
        .as_ref()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Factorization(format!("eigen-decomposition failed: {e:?}")))?;
    let n = a.nrows();
    let vals = (0..n).map(|i| evd.S()[i]).collect();
    Ok((vals, evd.U().to_owned()))
}

pub fn sym_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    a.as_ref()
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Factorization(format!("eigenvalue solve failed: {e:?}")))
}

fn rebuild(vals: &[f64], vecs: &Matrix) -> Matrix {
    let n = vals.len();
    let mut out = Mat::<f64>::zeros(n, n);
    for k in 0..n {
        let v = vecs.col_as_slice(k);
        let lam = vals[k];
        for j in 0..n {
            let s = lam * v[j];
            if s == 0.0 {
                continue;
            }
            let oc = out.col_as_slice_mut(j);
            for i in 0..n {
                oc[i] += v[i] * s;
            }
        }
    }
    symmetrize(&mut out);
    out
}

/// Symmetrizes and floors eigenvalues at zero; PSD input comes back unchanged.
pub fn floor_psd(a: &Matrix) -> Result<Matrix> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let (vals, vecs) = sym_eigen(&s)?;
    if vals.first().is_none_or(|&v| v >= 0.0) {
        return Ok(s);
    }
    let clipped: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
    Ok(rebuild(&clipped, &vecs))
}

/// Nearest-valid correlation repair: clip eigenvalues at 1e-8 and rescale to unit
/// diagonal. Matrices with no negative eigenvalue are returned as given.
pub fn repair_correlation(a: &Matrix) -> Result<Matrix> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let (vals, vecs) = sym_eigen(&s)?;
    if vals.first().is_none_or(|&v| v >= 0.0) {
        return Ok(s);
    }
    let clipped: Vec<f64> = vals.iter().map(|&v| v.max(1e-8)).collect();
    let mut r = rebuild(&clipped, &vecs);
    let n = r.nrows();
    let d: Vec<f64> = (0..n).map(|i| r[(i, i)].sqrt()).collect();
    for j in 0..n {
        for i in 0..n {
            r[(i, j)] /= d[i] * d[j];
        }
    }
    for i in 0..n {
        r[(i, i)] = 1.0;
    }
    Ok(r)
}
