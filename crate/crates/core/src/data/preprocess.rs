//! Masks, pole-hole filling, climatologies, normalization and detrending.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calendar::{Month, MonthRange};
use crate::data::grid::GridSeries;
use crate::error::{Error, Result};

/// Pole-hole radius in km of the passive-microwave instrument active in
/// `month`.
pub fn pole_hole_radius_km(month: Month) -> f64 {
    if month <= Month::new(1987, 6) {
        611.0
    } else if month <= Month::new(2007, 12) {
        311.0
    } else {
        94.0
    }
}

/// Cells whose centres lie within `radius_m` of the pole, given per-cell
/// projected distances from the pole.
pub fn pole_hole_mask(distance_m: &Array2<f64>, radius_m: f64) -> Array2<bool> {
    distance_m.mapv(|d| d <= radius_m)
}

/// Sets land cells to zero.
pub fn apply_land_mask(field: &mut Array2<f32>, land: &Array2<bool>) {
    Zip::from(field).and(land).for_each(|v, &l| {
        if l {
            *v = 0.0;
        }
    });
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Fills hole cells with the mean of valid (non-hole, non-land) cells among
/// their eight neighbours, sweeping inward ring by ring. Cells filled in one
/// sweep become valid for the next.
pub fn fill_pole_hole(field: ArrayView2<f32>, hole: &Array2<bool>, land: &Array2<bool>) -> Result<Array2<f32>> {
    let (h, w) = field.dim();
    if hole.dim() != (h, w) || land.dim() != (h, w) {
        return Err(Error::shape("fill_pole_hole", "mask extents differ from the field"));
    }
    let mut out = field.to_owned();
    let mut valid = Array2::from_shape_fn((h, w), |ix| !hole[ix] && !land[ix]);
    let mut pending: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&ix| hole[ix] && !land[ix])
        .collect();
    while !pending.is_empty() {
        let mut filled = Vec::new();
        for &(i, j) in &pending {
            let (mut sum, mut n) = (0.0f64, 0usize);
            for (di, dj) in NEIGHBOURS {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let ix = (ni as usize, nj as usize);
                if valid[ix] {
                    sum += out[ix] as f64;
                    n += 1;
                }
            }
            if n > 0 {
                filled.push(((i, j), (sum / n as f64) as f32));
            }
        }
        if filled.is_empty() {
            return Err(Error::invalid("pole hole", format!("{} hole cells border only land or other hole cells", pending.len())));
        }
        for &(ix, v) in &filled {
            out[ix] = v;
            valid[ix] = true;
        }
        pending.retain(|ix| !valid[*ix]);
    }
    Ok(out)
}

/// Clamping to [0, 1], pole-hole filling and land zeroing of a SIC series. A
/// per-series pole mask takes precedence over `era_mask`, which maps a month
/// to the hole of the instrument active then.
pub fn clean_sic(series: &GridSeries, era_mask: Option<&dyn Fn(Month) -> Array2<bool>>) -> Result<GridSeries> {
    let mut out = series.clone();
    for (t, &m) in series.months.iter().enumerate() {
        let mut field = series.data.index_axis(Axis(0), t).mapv(|v| v.clamp(0.0, 1.0));
        let hole = match (&series.pole_hole, era_mask) {
            (Some(mask), _) => Some(mask.clone()),
            (None, Some(f)) => Some(f(m)),
            (None, None) => None,
        };
        if let Some(hole) = hole {
            field = fill_pole_hole(field.view(), &hole, &series.land_mask)?;
        }
        apply_land_mask(&mut field, &series.land_mask);
        out.data.index_axis_mut(Axis(0), t).assign(&field);
    }
    Ok(out)
}

/// Per-calendar-month mean fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    /// `[12, H, W]`, index 0 = January.
    pub fields: Array3<f32>,
    pub window: MonthRange,
}

impl Climatology {
    /// Means over the months of `series` inside `window`, accumulated in f64.
    pub fn fit(series: &GridSeries, window: MonthRange) -> Result<Self> {
        let (h, w) = series.grid_shape();
        let mut sums = Array3::<f64>::zeros((12, h, w));
        let mut counts = [0usize; 12];
        for (t, &m) in series.months.iter().enumerate() {
            if !window.contains(m) {
                continue;
            }
            let c = m.calendar_index();
            counts[c] += 1;
            let mut slot = sums.index_axis_mut(Axis(0), c);
            Zip::from(&mut slot).and(series.data.index_axis(Axis(0), t)).for_each(|s, &v| *s += v as f64);
        }
        if let Some(missing) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InsufficientHistory(format!(
                "no {} sample of {} within {window}",
                month_name(missing),
                series.variable
            )));
        }
        let mut fields = Array3::zeros((12, h, w));
        for c in 0..12 {
            let n = counts[c] as f64;
            Zip::from(fields.index_axis_mut(Axis(0), c))
                .and(sums.index_axis(Axis(0), c))
                .for_each(|f, &s| *f = (s / n) as f32);
        }
        Ok(Climatology { fields, window })
    }

    pub fn for_month(&self, m: Month) -> ArrayView2<'_, f32> {
        self.fields.index_axis(Axis(0), m.calendar_index())
    }

    pub fn anomalies(&self, series: &GridSeries) -> GridSeries {
        let mut out = series.clone();
        for (t, &m) in series.months.iter().enumerate() {
            let mut slot = out.data.index_axis_mut(Axis(0), t);
            slot -= &self.for_month(m);
        }
        out
    }

    pub fn reconstruct(&self, anomalies: &GridSeries) -> GridSeries {
        let mut out = anomalies.clone();
        for (t, &m) in anomalies.months.iter().enumerate() {
            let mut slot = out.data.index_axis_mut(Axis(0), t);
            slot += &self.for_month(m);
        }
        out
    }

    /// As a 12-month series (year 1) for storage in IMGR files.
    pub fn to_series(&self, variable: &str, units: &str, land: &Array2<bool>) -> Result<GridSeries> {
        let months = (1..=12).map(|m| Month::new(1, m)).collect();
        GridSeries::new(variable, units, months, self.fields.clone(), land.clone())
    }

    pub fn from_series(series: &GridSeries, window: MonthRange) -> Result<Self> {
        if series.len() != 12 {
            return Err(Error::HeaderMismatch(format!("climatology needs 12 fields, found {}", series.len())));
        }
        Ok(Climatology { fields: series.data.clone(), window })
    }
}

pub fn month_name(index0: usize) -> &'static str {
    ["January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November", "December"]
        [index0 % 12]
}

/// Climatology fitted on `window` and the anomaly series it implies.
pub fn climatology_and_anomaly(series: &GridSeries, window: MonthRange) -> Result<(Climatology, GridSeries)> {
    let clim = Climatology::fit(series, window)?;
    let anom = clim.anomalies(series);
    Ok((clim, anom))
}

/// Normalization statistics of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub variable: String,
    /// Subtracted after any climatology, when `normalize` is set.
    pub mean: f64,
    pub std: f64,
    pub normalize: bool,
    pub climatology: Option<Climatology>,
    pub fit_window: MonthRange,
}

impl NormStats {
    /// Fits on the months of `series` inside `window` only.
    pub fn fit(series: &GridSeries, window: MonthRange, anomaly: bool, normalize: bool) -> Result<Self> {
        let climatology = if anomaly { Some(Climatology::fit(series, window)?) } else { None };
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for (t, &m) in series.months.iter().enumerate() {
            if !window.contains(m) {
                continue;
            }
            let field = series.data.index_axis(Axis(0), t);
            let clim = climatology.as_ref().map(|c| c.for_month(m));
            for (ix, &v) in field.indexed_iter() {
                let v = v as f64 - clim.as_ref().map_or(0.0, |c| c[ix] as f64);
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InsufficientHistory(format!("{} has no data in {window}", series.variable)));
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        Ok(NormStats { variable: series.variable.clone(), mean, std, normalize, climatology, fit_window: window })
    }

    /// Content digest; two applications with equal ids used equal statistics.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.variable.as_bytes());
        h.update(self.mean.to_le_bytes());
        h.update(self.std.to_le_bytes());
        h.update([self.normalize as u8]);
        h.update(self.fit_window.to_string().as_bytes());
        if let Some(c) = &self.climatology {
            for v in c.fields.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Applies anomaly removal and `(x - mean) / std` as configured by `stats`.
pub fn normalize(series: &GridSeries, stats: &NormStats) -> Result<GridSeries> {
    let mut out = match &stats.climatology {
        Some(c) => c.anomalies(series),
        None => series.clone(),
    };
    if stats.normalize {
        if !(stats.std > 0.0) {
            return Err(Error::ZeroStd(stats.variable.clone()));
        }
        let (mean, std) = (stats.mean, stats.std);
        out.data.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
    }
    Ok(out)
}

/// One entry of the statistics manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub mean: f64,
    pub std: f64,
    pub normalize: bool,
    /// IMGR file holding the 12 climatology fields, relative to the manifest.
    pub climatology_file: Option<String>,
    pub fit_window: MonthRange,
    pub id: String,
}

/// `variable → statistics`, stored as JSON beside per-variable climatology
/// IMGR files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsManifest(pub BTreeMap<String, StatsEntry>);

impl StatsManifest {
    /// Digest over all entry ids.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for (k, e) in &self.0 {
            h.update(k.as_bytes());
            h.update(e.id.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn save(&self, dir: &Path, stats: &[NormStats], land: &Array2<bool>) -> Result<StatsManifest> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = StatsManifest::default();
        for s in stats {
            let climatology_file = match &s.climatology {
                Some(c) => {
                    let name = format!("{}_climatology.imgr", s.variable);
                    c.to_series(&s.variable, "", land)?.save(dir.join(&name))?;
                    Some(name)
                }
                None => None,
            };
            manifest.0.insert(
                s.variable.clone(),
                StatsEntry {
                    mean: s.mean,
                    std: s.std,
                    normalize: s.normalize,
                    climatology_file,
                    fit_window: s.fit_window,
                    id: s.id(),
                },
            );
        }
        std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(StatsManifest, Vec<NormStats>)> {
        let manifest: StatsManifest = serde_json::from_slice(&std::fs::read(dir.join("stats.json"))?)?;
        let mut stats = Vec::new();
        for (var, e) in &manifest.0 {
            let climatology = match &e.climatology_file {
                Some(f) => Some(Climatology::from_series(&GridSeries::load(dir.join(f))?, e.fit_window)?),
                None => None,
            };
            let s = NormStats {
                variable: var.clone(),
                mean: e.mean,
                std: e.std,
                normalize: e.normalize,
                climatology,
                fit_window: e.fit_window,
            };
            if s.id() != e.id {
                return Err(Error::HeaderMismatch(format!("statistics for {var} do not match their recorded id")));
            }
            stats.push(s);
        }
        Ok((manifest, stats))
    }
}

/// Least-squares line through `(t, y)`, returned as `(slope, intercept)`.
pub fn fit_line(t: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = t.len() as f64;
    if t.len() != y.len() || t.is_empty() {
        return Err(Error::shape("fit_line", format!("{} times, {} values", t.len(), y.len())));
    }
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let stt: f64 = t.iter().map(|v| (v - tm) * (v - tm)).sum();
    if stt == 0.0 {
        return Err(Error::invalid("time axis", "all time points coincide"));
    }
    let sty: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let slope = sty / stt;
    Ok((slope, ym - slope * tm))
}

/// Residuals of `y` about its least-squares line in `t`.
pub fn detrend_values(t: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if t.len() < 3 {
        return Err(Error::InsufficientHistory(format!("detrending needs 3 time points, got {}", t.len())));
    }
    let (slope, icept) = fit_line(t, y)?;
    Ok(t.iter().zip(y).map(|(ti, yi)| yi - (slope * ti + icept)).collect())
}

/// Removes each cell's least-squares linear trend in time.
pub fn detrend_linear(series: &GridSeries) -> Result<GridSeries> {
    let t: Vec<f64> = series.months.iter().map(|m| m.since(series.months[0]) as f64).collect();
    if t.len() < 3 {
        return Err(Error::InsufficientHistory(format!("detrending needs 3 time points, got {}", t.len())));
    }
    let mut out = series.clone();
    let (_, h, w) = series.data.dim();
    for i in 0..h {
        for j in 0..w {
            let y: Vec<f64> = series.data.slice(ndarray::s![.., i, j]).iter().map(|&v| v as f64).collect();
            let r = detrend_values(&t, &y)?;
            for (k, v) in r.into_iter().enumerate() {
                out.data[[k, i, j]] = v as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn series(values: &[f32], first: Month) -> GridSeries {
        let months = (0..values.len()).map(|i| first.offset(i as i32)).collect();
        let data = Array3::from_shape_vec((values.len(), 1, 1), values.to_vec()).unwrap();
        GridSeries::new("x", "1", months, data, Array2::from_elem((1, 1), false)).unwrap()
    }

    #[test]
    fn ring_mean_fill() {
        let mut f = Array2::from_elem((3, 3), 0.8f32);
        for j in 0..3 {
            f[[0, j]] = 1.0;
        }
        f[[1, 0]] = 1.0;
        f[[1, 1]] = -5.0;
        let mut hole = Array2::from_elem((3, 3), false);
        hole[[1, 1]] = true;
        let land = Array2::from_elem((3, 3), false);
        let out = fill_pole_hole(f.view(), &hole, &land).unwrap();
        assert!((out[[1, 1]] - 0.9).abs() < 1e-6);

        let empty = Array2::from_elem((3, 3), false);
        assert_eq!(fill_pole_hole(f.view(), &empty, &land).unwrap(), f);
    }

    #[test]
    fn hole_surrounded_by_land_is_rejected() {
        let f = Array2::from_elem((3, 3), 0.5f32);
        let mut hole = Array2::from_elem((3, 3), false);
        hole[[1, 1]] = true;
        let land = Array2::from_shape_fn((3, 3), |ix| ix != (1, 1));
        assert!(fill_pole_hole(f.view(), &hole, &land).is_err());
    }

    #[test]
    fn pole_hole_eras() {
        assert_eq!(pole_hole_radius_km(Month::new(1980, 1)), 611.0);
        assert_eq!(pole_hole_radius_km(Month::new(1987, 7)), 311.0);
        assert_eq!(pole_hole_radius_km(Month::new(2008, 1)), 94.0);
    }

    #[test]
    fn january_climatology_example() {
        let mut values = vec![0.0f32; 24];
        values[0] = 0.2;
        values[12] = 0.4;
        let s = series(&values, Month::new(2000, 1));
        let (clim, anom) = climatology_and_anomaly(&s, MonthRange::years(2000, 2001)).unwrap();
        assert!((clim.fields[[0, 0, 0]] - 0.3).abs() < 1e-7);
        assert!((anom.data[[0, 0, 0]] + 0.1).abs() < 1e-7);
        assert!((anom.data[[12, 0, 0]] - 0.1).abs() < 1e-7);
        assert!(Climatology::fit(&s, MonthRange::new(Month::new(2000, 1), Month::new(2000, 6))).is_err());
    }

    #[test]
    fn normalization_example_and_zero_std() {
        let s = series(&[4.0], Month::new(2000, 1));
        let stats = NormStats {
            variable: "x".into(),
            mean: 2.0,
            std: 2.0,
            normalize: true,
            climatology: None,
            fit_window: MonthRange::years(2000, 2000),
        };
        assert_eq!(normalize(&s, &stats).unwrap().data[[0, 0, 0]], 1.0);
        let flat = NormStats { std: 0.0, ..stats };
        assert!(matches!(normalize(&s, &flat), Err(Error::ZeroStd(v)) if v == "x"));
    }

    #[test]
    fn least_squares_detrend_example() {
        let (slope, icept) = fit_line(&[0.0, 1.0, 2.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((slope - 1.5).abs() < 1e-15 && (icept - 5.0 / 6.0).abs() < 1e-15);
        let r = detrend_values(&[0.0, 1.0, 2.0], &[1.0, 2.0, 4.0]).unwrap();
        for (a, b) in r.iter().zip([1.0 / 6.0, -1.0 / 3.0, 1.0 / 6.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let lin = series(&[1.0, 3.0, 5.0, 7.0], Month::new(2000, 1));
        assert!(detrend_linear(&lin).unwrap().data.iter().all(|v| v.abs() < 1e-6));
        assert!(detrend_linear(&series(&[1.0, 2.0], Month::new(2000, 1))).is_err());
    }

    #[test]
    fn land_zeroing() {
        let mut f = array![[0.5f32, 0.7]];
        apply_land_mask(&mut f, &array![[true, false]]);
        assert_eq!(f, array![[0.0, 0.7]]);
    }
}
