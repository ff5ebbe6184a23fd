//! Attenuation cell grid and ray segmentation.
//!
//! Cells are vertical prisms over a regular map-view grid. A source-to-site
//! ray is walked cell by cell in its horizontal footprint; each in-prism
//! piece contributes its 3-D length.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::XY;

const MIN_SEGMENT_KM: f64 = 1e-12;
const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub origin: XY,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
}

impl CellGrid {
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn ij(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    pub fn midpoint(&self, cell: usize) -> XY {
        let (ix, iy) = self.ij(cell);
        XY::new(
            self.origin.x + (ix as f64 + 0.5) * self.dx,
            self.origin.y + (iy as f64 + 0.5) * self.dy,
        )
    }

    pub fn midpoints(&self) -> Vec<XY> {
        (0..self.n_cells()).map(|c| self.midpoint(c)).collect()
    }

    pub fn upper_corner(&self) -> XY {
        XY::new(
            self.origin.x + self.nx as f64 * self.dx,
            self.origin.y + self.ny as f64 * self.dy,
        )
    }

    pub fn contains(&self, p: XY) -> bool {
        let u = (p.x - self.origin.x) / self.dx;
        let v = (p.y - self.origin.y) / self.dy;
        u >= -EDGE_TOL && v >= -EDGE_TOL && u <= self.nx as f64 + EDGE_TOL && v <= self.ny as f64 + EDGE_TOL
    }

    /// Cell containing `p`, if any. Points on an interior edge go to the upper/right cell.
    pub fn cell_of(&self, p: XY) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let ix = ((p.x - self.origin.x) / self.dx).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = ((p.y - self.origin.y) / self.dy).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        Some(self.index(ix, iy))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dx.is_finite() && self.dy.is_finite()) {
            return Err(Error::invalid("cell size must be positive"));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::invalid("grid must have at least one cell"));
        }
        if !self.origin.is_finite() {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["cell_id", "x_mid", "y_mid"])?;
        for c in 0..self.n_cells() {
            let m = self.midpoint(c);
            wtr.write_record([c.to_string(), m.x.to_string(), m.y.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Smallest grid of `dx`×`dy` cells anchored at the bbox's southwest corner that covers it.
pub fn build_grid(bbox: (XY, XY), dx: f64, dy: f64) -> Result<CellGrid> {
    if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
        return Err(Error::invalid(format!("cell size must be positive, got {dx}×{dy}")));
    }
    let (a, b) = bbox;
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::invalid("bbox must be finite"));
    }
    let (x0, x1) = (a.x.min(b.x), a.x.max(b.x));
    let (y0, y1) = (a.y.min(b.y), a.y.max(b.y));
    let axis = |lo: f64, hi: f64, d: f64| -> (f64, usize) {
        let w = hi - lo;
        if w <= 0.0 {
            (lo - d / 2.0, 1)
        } else {
            (lo, ((w / d) - 1e-9).ceil().max(1.0) as usize)
        }
    };
    let (ox, nx) = axis(x0, x1, dx);
    let (oy, ny) = axis(y0, y1, dy);
    Ok(CellGrid { origin: XY::new(ox, oy), dx, dy, nx, ny })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray3 {
    pub start: XY,
    pub start_depth: f64,
    pub end: XY,
    pub end_depth: f64,
}

impl Ray3 {
    pub fn new(start: XY, start_depth: f64, end: XY, end_depth: f64) -> Self {
        Self { start, start_depth, end, end_depth }
    }

    pub fn length(&self) -> f64 {
        let dx = self.end.x - self.start.x;
        let dy = self.end.y - self.start.y;
        let dz = self.end_depth - self.start_depth;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.end, self.end_depth, self.start, self.start_depth)
    }
}

fn start_cell(u0: f64, du: f64, n: usize) -> i64 {
    let mut i = u0.floor() as i64;
    if du < 0.0 && u0 == u0.floor() {
        i -= 1;
    }
    i.clamp(0, n as i64 - 1)
}

/// Per-cell 3-D lengths of `ray` in traversal order. `ray_id` is only used in errors.
pub fn segment_ray(grid: &CellGrid, ray: &Ray3, ray_id: usize) -> Result<Vec<(usize, f64)>> {
    for p in [ray.start, ray.end] {
        if !p.is_finite() || !grid.contains(p) {
            return Err(Error::RayOutsideGrid { ray: ray_id, x: p.x, y: p.y });
        }
    }
    let len = ray.length();
    if !len.is_finite() {
        return Err(Error::invalid(format!("ray {ray_id} has non-finite length")));
    }
    let u0 = (ray.start.x - grid.origin.x) / grid.dx;
    let v0 = (ray.start.y - grid.origin.y) / grid.dy;
    let du = (ray.end.x - ray.start.x) / grid.dx;
    let dv = (ray.end.y - ray.start.y) / grid.dy;
    let mut ix = start_cell(u0, du, grid.nx);
    let mut iy = start_cell(v0, dv, grid.ny);

    let (step_x, mut t_max_x, t_delta_x) = axis_setup(u0, du, ix);
    let (step_y, mut t_max_y, t_delta_y) = axis_setup(v0, dv, iy);

    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut t = 0.0;
    loop {
        let t_next = t_max_x.min(t_max_y).min(1.0).max(t);
        let seg = (t_next - t) * len;
        let cell = grid.index(ix as usize, iy as usize);
        if seg > MIN_SEGMENT_KM {
            match out.last_mut() {
                Some((c, l)) if *c == cell => *l += seg,
                _ => out.push((cell, seg)),
            }
        }
        if t_next >= 1.0 {
            break;
        }
        t = t_next;
        let cross_x = t_max_x <= t_max_y;
        let cross_y = t_max_y <= t_max_x;
        if cross_x {
            ix += step_x;
            t_max_x += t_delta_x;
        }
        if cross_y {
            iy += step_y;
            t_max_y += t_delta_y;
        }
        if ix < 0 || iy < 0 || ix >= grid.nx as i64 || iy >= grid.ny as i64 {
            // Rounding at the far endpoint; the remainder belongs to the last cell.
            ix = ix.clamp(0, grid.nx as i64 - 1);
            iy = iy.clamp(0, grid.ny as i64 - 1);
            let rest = (1.0 - t) * len;
            if rest > MIN_SEGMENT_KM {
                let cell = grid.index(ix as usize, iy as usize);
                match out.last_mut() {
                    Some((c, l)) if *c == cell => *l += rest,
                    _ => out.push((cell, rest)),
                }
            }
            break;
        }
    }
    if out.is_empty() && len > 0.0 {
        // Ray shorter than the pruning threshold.
        let cell = grid.index(ix as usize, iy as usize);
        out.push((cell, len));
    }
    Ok(out)
}

fn axis_setup(u0: f64, du: f64, i: i64) -> (i64, f64, f64) {
    if du > 0.0 {
        (1, ((i + 1) as f64 - u0) / du, 1.0 / du)
    } else if du < 0.0 {
        (-1, (i as f64 - u0) / du, -1.0 / du)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    }
}

/// Sparse record×cell matrix of in-cell path lengths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentMatrix {
    pub n_cells: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageStats {
    pub count: Vec<usize>,
    pub length: Vec<f64>,
}

impl SegmentMatrix {
    pub fn new(n_cells: usize) -> Self {
        Self { n_cells, rows: Vec::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, l)| l).sum()
    }

    pub fn coverage_stats(&self) -> CoverageStats {
        let mut count = vec![0usize; self.n_cells];
        let mut length = vec![0.0; self.n_cells];
        for row in &self.rows {
            let mut seen: Vec<usize> = Vec::with_capacity(row.len());
            for &(c, l) in row {
                if l > 0.0 && !seen.contains(&c) {
                    seen.push(c);
                    count[c] += 1;
                }
                length[c] += l;
            }
        }
        CoverageStats { count, length }
    }

    /// Cells with at least one nonzero entry, ascending.
    pub fn crossed_cells(&self) -> Vec<usize> {
        let mut hit = vec![false; self.n_cells];
        for row in &self.rows {
            for &(c, l) in row {
                if l > 0.0 {
                    hit[c] = true;
                }
            }
        }
        (0..self.n_cells).filter(|&c| hit[c]).collect()
    }

    pub fn write_triplets<W: Write>(&self, record_ids: &[String], w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["record_id", "cell_id", "dR_km"])?;
        for (i, row) in self.rows.iter().enumerate() {
            let rid = record_ids.get(i).cloned().unwrap_or_else(|| i.to_string());
            for &(c, l) in row {
                wtr.write_record([rid.clone(), c.to_string(), l.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid4() -> CellGrid {
        build_grid((XY::new(0.0, 0.0), XY::new(100.0, 100.0)), 25.0, 25.0).unwrap()
    }

    #[test]
    fn tiling_and_outward_expansion() {
        let g = grid4();
        assert_eq!((g.nx, g.ny), (4, 4));
        let g = build_grid((XY::new(0.0, 0.0), XY::new(101.0, 99.0)), 25.0, 25.0).unwrap();
        assert_eq!((g.nx, g.ny), (5, 4));
        let p = XY::new(3.0, 4.0);
        let g = build_grid((p, p), 25.0, 25.0).unwrap();
        assert_eq!(g.n_cells(), 1);
        assert!(g.contains(p));
        assert!(build_grid((XY::new(0.0, 0.0), XY::new(1.0, 1.0)), 0.0, 1.0).is_err());
    }

    #[test]
    fn axis_aligned_split() {
        let g = grid4();
        let r = Ray3::new(XY::new(25.0, 10.0), 0.0, XY::new(75.0, 10.0), 0.0);
        let s = segment_ray(&g, &r, 0).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].0, g.index(1, 0));
        assert!((s[0].1 - 25.0).abs() < 1e-12 && (s[1].1 - 25.0).abs() < 1e-12);
    }

    #[test]
    fn ray_inside_one_cell() {
        let g = grid4();
        let r = Ray3::new(XY::new(30.0, 30.0), 8.0, XY::new(40.0, 45.0), 0.0);
        let s = segment_ray(&g, &r, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].1 - r.length()).abs() < 1e-12);
    }

    #[test]
    fn boundary_start_going_negative() {
        let g = grid4();
        let r = Ray3::new(XY::new(50.0, 10.0), 0.0, XY::new(10.0, 10.0), 0.0);
        let s = segment_ray(&g, &r, 0).unwrap();
        assert_eq!(s.iter().map(|p| p.0).collect::<Vec<_>>(), vec![g.index(1, 0), g.index(0, 0)]);
    }

    #[test]
    fn vertical_ray() {
        let g = grid4();
        let r = Ray3::new(XY::new(60.0, 60.0), 12.0, XY::new(60.0, 60.0), 0.0);
        let s = segment_ray(&g, &r, 0).unwrap();
        assert_eq!(s, vec![(g.index(2, 2), 12.0)]);
    }

    #[test]
    fn outside_endpoint_is_named() {
        let g = grid4();
        let r = Ray3::new(XY::new(10.0, 10.0), 0.0, XY::new(150.0, 10.0), 0.0);
        match segment_ray(&g, &r, 7) {
            Err(Error::RayOutsideGrid { ray, x, .. }) => {
                assert_eq!(ray, 7);
                assert_eq!(x, 150.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coverage_of_empty_and_single_ray() {
        let g = grid4();
        let mut m = SegmentMatrix::new(g.n_cells());
        assert!(m.coverage_stats().count.iter().all(|&c| c == 0));
        let r = Ray3::new(XY::new(10.0, 10.0), 0.0, XY::new(70.0, 10.0), 0.0);
        m.rows.push(segment_ray(&g, &r, 0).unwrap());
        let cov = m.coverage_stats();
        assert_eq!(cov.count.iter().sum::<usize>(), 3);
        for c in [g.index(0, 0), g.index(1, 0), g.index(2, 0)] {
            assert_eq!(cov.count[c], 1);
        }
    }
}
