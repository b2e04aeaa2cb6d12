//! North-polar Lambert azimuthal equal-area projection and bilinear
//! regridding from regular latitude-longitude grids.
//!
//! The projection is the spherical form with radius 6,371,228 m, an
//! approximation of the ellipsoidal equal-area grid definition that is well
//! within a 25 km cell.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_228.0;

/// `(lat, lon)` in degrees to `(x, y)` in metres; the pole maps to the origin
/// and longitude 0 points along negative y.
pub fn laea_project(lat: f64, lon: f64) -> Result<(f64, f64)> {
    if !(lat > 0.0 && lat <= 90.0) {
        return Err(Error::invalid("latitude", format!("{lat} is outside the northern hemisphere (0, 90]")));
    }
    let phi = lat.to_radians();
    let lam = lon.to_radians();
    let rho = 2.0 * EARTH_RADIUS_M * (FRAC_PI_4 - phi / 2.0).sin();
    Ok((rho * lam.sin(), -rho * lam.cos()))
}

/// Inverse of [`laea_project`]; longitude in (-180, 180].
pub fn laea_inverse(x: f64, y: f64) -> (f64, f64) {
    let rho = x.hypot(y);
    let ratio = (rho / (2.0 * EARTH_RADIUS_M)).min(1.0);
    let lat = (FRAC_PI_2 - 2.0 * ratio.asin()).to_degrees();
    let lon = if rho == 0.0 { 0.0 } else { x.atan2(-y).to_degrees() };
    (lat, lon)
}

/// Area of the spherical cap poleward of `lat` degrees.
pub fn spherical_cap_area(lat: f64) -> f64 {
    2.0 * std::f64::consts::PI * EARTH_RADIUS_M * EARTH_RADIUS_M * (1.0 - lat.to_radians().sin())
}

/// Regular projected grid, rows running from the top edge downward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetGrid {
    pub rows: usize,
    pub cols: usize,
    /// Left edge x (m).
    pub x0: f64,
    /// Top edge y (m).
    pub y0: f64,
    pub cell_m: f64,
}

impl TargetGrid {
    /// 448 × 304 cells of 25 km covering the Arctic basin.
    pub fn arctic_25km() -> Self {
        TargetGrid { rows: 448, cols: 304, x0: -3_850_000.0, y0: 5_850_000.0, cell_m: 25_000.0 }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x0 + (j as f64 + 0.5) * self.cell_m, self.y0 - (i as f64 + 0.5) * self.cell_m)
    }

    pub fn cell_area_km2(&self) -> f64 {
        self.cell_m * self.cell_m / 1e6
    }

    /// Distance of each cell centre from the pole, in metres.
    pub fn pole_distance(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| {
            let (x, y) = self.cell_center(i, j);
            x.hypot(y)
        })
    }

    /// `(lat, lon)` of each cell centre.
    pub fn cell_latlon(&self) -> Array2<(f64, f64)> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| {
            let (x, y) = self.cell_center(i, j);
            laea_inverse(x, y)
        })
    }
}

/// A field on a regular latitude-longitude grid:
/// `data[[r, c]]` sits at `(lat0 + r·dlat, lon0 + c·dlon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatLonField {
    pub lat0: f64,
    pub dlat: f64,
    pub lon0: f64,
    pub dlon: f64,
    pub data: Array2<f64>,
}

impl LatLonField {
    /// True when the columns wrap around the full circle.
    pub fn is_global_in_lon(&self) -> bool {
        ((self.data.ncols() as f64) * self.dlon.abs() - 360.0).abs() < 1e-9
    }

    /// Bilinear value at `(lat, lon)`, or `None` outside coverage.
    pub fn sample(&self, lat: f64, lon: f64) -> Option<f64> {
        let (nr, nc) = self.data.dim();
        let fr = (lat - self.lat0) / self.dlat;
        if !(fr >= 0.0 && fr <= (nr - 1) as f64) {
            return None;
        }
        let mut fc = (lon - self.lon0) / self.dlon;
        let global = self.is_global_in_lon();
        if global {
            fc = fc.rem_euclid(nc as f64);
        } else if !(fc >= 0.0 && fc <= (nc - 1) as f64) {
            return None;
        }
        let r0 = (fr.floor() as usize).min(nr.saturating_sub(2));
        let tr = fr - r0 as f64;
        let c0 = (fc.floor() as usize).min(if global { nc - 1 } else { nc.saturating_sub(2) });
        let tc = fc - c0 as f64;
        let c1 = if global { (c0 + 1) % nc } else { (c0 + 1).min(nc - 1) };
        let r1 = (r0 + 1).min(nr - 1);
        let v = |r: usize, c: usize| self.data[[r, c]];
        let top = v(r0, c0) * (1.0 - tc) + v(r0, c1) * tc;
        let bottom = v(r1, c0) * (1.0 - tc) + v(r1, c1) * tc;
        Some(top * (1.0 - tr) + bottom * tr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regridded {
    pub field: Array2<f64>,
    /// Cells outside source coverage, filled from the nearest covered cell.
    pub filled: Array2<bool>,
}

/// Bilinear interpolation of `src` at every target cell centre.
pub fn regrid_bilinear(src: &LatLonField, target: &TargetGrid) -> Result<Regridded> {
    if src.data.nrows() < 2 || src.data.ncols() < 2 {
        return Err(Error::shape("regrid_bilinear", "source grid needs at least 2x2 points"));
    }
    let coords = target.cell_latlon();
    let mut field = Array2::from_elem((target.rows, target.cols), f64::NAN);
    let mut filled = Array2::from_elem((target.rows, target.cols), false);
    for ((i, j), &(lat, lon)) in coords.indexed_iter() {
        match src.sample(lat, lon) {
            Some(v) => field[[i, j]] = v,
            None => filled[[i, j]] = true,
        }
    }
    fill_nearest(&mut field, &filled)?;
    Ok(Regridded { field, filled })
}

/// Breadth-first fill of `missing` cells from their nearest valid cells
/// (8-connected steps; ties resolved in scan order).
pub fn fill_nearest(field: &mut Array2<f64>, missing: &Array2<bool>) -> Result<()> {
    let (h, w) = field.dim();
    let mut done = missing.mapv(|m| !m);
    let mut queue: VecDeque<(usize, usize)> = done.indexed_iter().filter(|(_, &d)| d).map(|(ix, _)| ix).collect();
    if queue.is_empty() && h * w > 0 {
        return Err(Error::invalid("regrid", "no target cell lies inside the source coverage"));
    }
    while let Some((i, j)) = queue.pop_front() {
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let ix = (ni as usize, nj as usize);
                if !done[ix] {
                    field[ix] = field[[i, j]];
                    done[ix] = true;
                    queue.push_back(ix);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pole_maps_to_origin_and_longitude_wraps() {
        for lon in [-120.0, 0.0, 45.0] {
            let (x, y) = laea_project(90.0, lon).unwrap();
            assert!(x.abs() < 1e-9 && y.abs() < 1e-9);
        }
        let a = laea_project(60.0, 180.0).unwrap();
        let b = laea_project(60.0, -180.0).unwrap();
        assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
        assert!(laea_project(-10.0, 0.0).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        for &(lat, lon) in &[(45.0, 10.0), (70.0, -150.0), (88.5, 179.0)] {
            let (x, y) = laea_project(lat, lon).unwrap();
            let (la, lo) = laea_inverse(x, y);
            assert!((la - lat).abs() < 1e-9 && (lo - lon).abs() < 1e-9);
        }
    }

    #[test]
    fn arctic_grid_corners_reach_low_latitudes() {
        let g = TargetGrid::arctic_25km();
        let ll = g.cell_latlon();
        let min_lat = ll.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        assert!(min_lat > 20.0 && min_lat < 30.0, "{min_lat}");
        assert_eq!(g.cell_area_km2(), 625.0);
    }
}
