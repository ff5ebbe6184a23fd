//! WebAssembly bindings for the static demo page in `www/`. The `ops` module holds
//! the plain Rust versions, which also run natively.

use wasm_bindgen::prelude::*;

pub mod ops {
    use negmm::cells::{build_grid, segment_ray, Ray3};
    use negmm::geo::XY;
    use negmm::ifcorr::{reference_models, CorrelationModel};
    use negmm::kernels::KernelSpec;
    use negmm::predict::{condition_marginal, CoefficientField, Term};
    use negmm::{Error, Result};

    /// Segments the ray from `(x0, y0)` at depth `depth0` to the surface point
    /// `(x1, y1)` through an `nx` × `ny` grid of `cell_km` cells anchored at the origin.
    pub fn segments(x0: f64, y0: f64, depth0: f64, x1: f64, y1: f64, nx: usize, ny: usize, cell_km: f64) -> Result<Vec<(usize, f64)>> {
        let hi = XY::new(nx as f64 * cell_km, ny as f64 * cell_km);
        let grid = build_grid((XY::new(0.0, 0.0), hi), cell_km, cell_km)?;
        segment_ray(&grid, &Ray3::new(XY::new(x0, y0), depth0, XY::new(x1, y1), 0.0), 0)
    }

    pub fn reference_model(term: &str) -> Result<CorrelationModel> {
        reference_models()
            .into_iter()
            .find(|(t, _)| *t == term)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::invalid(format!("unknown term {term}")))
    }

    /// ρ at `n` evenly spaced ln-frequency ratios on `[0, fr_max]`.
    pub fn curve(m: &CorrelationModel, fr_max: f64, n: usize) -> Vec<f64> {
        let step = if n > 1 { fr_max / (n - 1) as f64 } else { 0.0 };
        (0..n).map(|i| m.rho(i as f64 * step)).collect()
    }

    /// Conditioned mean and sd of an exponential-kernel field on an `nx` × `ny`
    /// lattice spanning `width` × `height` km. `known` is flat `[x, y, value, sd, ...]`.
    pub fn lattice(known: &[f64], omega: f64, ell: f64, width: f64, height: f64, nx: usize, ny: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if known.len() % 4 != 0 {
            return Err(Error::invalid("known points come in groups of four: x, y, value, sd"));
        }
        let field = CoefficientField {
            term: Term::Dc1a,
            known: known.chunks(4).map(|k| XY::new(k[0], k[1])).collect(),
            mean: known.chunks(4).map(|k| k[2]).collect(),
            sd: known.chunks(4).map(|k| k[3]).collect(),
            kernel: KernelSpec::exponential(omega, ell),
            prior_mean: 0.0,
        };
        let dx = if nx > 1 { width / (nx - 1) as f64 } else { 0.0 };
        let dy = if ny > 1 { height / (ny - 1) as f64 } else { 0.0 };
        let pts: Vec<XY> = (0..ny).flat_map(|j| (0..nx).map(move |i| XY::new(i as f64 * dx, j as f64 * dy))).collect();
        let (mean, var) = condition_marginal(&field, &pts)?;
        Ok((mean, var.into_iter().map(|v| v.max(0.0).sqrt()).collect()))
    }
}

fn js_err(e: negmm::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Flat `[cell, length, cell, length, ...]` for the ray.
#[wasm_bindgen]
pub fn segment_ray(x0: f64, y0: f64, depth0: f64, x1: f64, y1: f64, nx: usize, ny: usize, cell_km: f64) -> Result<Vec<f64>, JsError> {
    let seg = ops::segments(x0, y0, depth0, x1, y1, nx, ny, cell_km).map_err(js_err)?;
    Ok(seg.into_iter().flat_map(|(c, l)| [c as f64, l]).collect())
}

/// 3-D length of the same ray.
#[wasm_bindgen]
pub fn ray_length(x0: f64, y0: f64, depth0: f64, x1: f64, y1: f64) -> f64 {
    use negmm::{cells::Ray3, geo::XY};
    Ray3::new(XY::new(x0, y0), depth0, XY::new(x1, y1), 0.0).length()
}

/// Reference coefficients `[A, B, C, D]` of `term`.
#[wasm_bindgen]
pub fn correlation_coefficients(term: &str) -> Result<Vec<f64>, JsError> {
    let m = ops::reference_model(term).map_err(js_err)?;
    Ok(vec![m.a, m.b, m.c, m.d])
}

#[wasm_bindgen]
pub fn correlation_curve(a: f64, b: f64, c: f64, d: f64, fr_max: f64, n: usize) -> Vec<f64> {
    ops::curve(&negmm::ifcorr::CorrelationModel::new(a, b, c, d), fr_max, n)
}

/// `[mean..., sd...]` over the lattice.
#[wasm_bindgen]
pub fn condition_lattice(known: &[f64], omega: f64, ell: f64, width: f64, height: f64, nx: usize, ny: usize) -> Result<Vec<f64>, JsError> {
    let (m, s) = ops::lattice(known, omega, ell, width, height, nx, ny).map_err(js_err)?;
    Ok(m.into_iter().chain(s).collect())
}
