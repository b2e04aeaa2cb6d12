//! Seeded synthetic sea-ice world for desk-scale experiments.
//!
//! SIC is a latitude-banded seasonal cycle with a linear decline plus a
//! spatially smooth AR(1) anomaly, clamped to [0, 1]. Three covariates come
//! with it: one that reveals the anomaly two months ahead, one of pure red
//! noise, and one that is a linear ramp in time.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calendar::Month;
use crate::data::grid::GridSeries;
use crate::data::sample::SeriesSet;
use crate::data::variables::Variable;
use crate::error::{Error, Result};

pub const SYNTHETIC_START_YEAR: i32 = 1979;
/// Shortest record the generator produces.
pub const MIN_SYNTHETIC_YEARS: usize = 15;

/// Generator constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    /// Lag-1 autocorrelation of the SIC anomaly.
    pub rho: f64,
    /// Stationary standard deviation of the SIC anomaly.
    pub anomaly_std: f64,
    /// SIC lost per year.
    pub trend_per_year: f64,
    /// Box-blur radius (cells) for spatial smoothing.
    pub smooth_radius: usize,
    /// Noise added to the standardized leading covariate.
    pub causal_noise: f64,
    /// How many months the causal covariate leads the anomaly.
    pub lead_months: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            rho: 0.7,
            anomaly_std: 0.08,
            trend_per_year: 0.004,
            smooth_radius: 3,
            causal_noise: 0.3,
            lead_months: 2,
        }
    }
}

/// Corners beyond the inscribed circle plus one interior island.
pub fn synthetic_land_mask(h: usize, w: usize) -> Array2<bool> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let half = h.min(w) as f64 / 2.0;
    let (iy, ix, ir) = (0.22 * h as f64, 0.7 * w as f64, 0.07 * h.min(w) as f64);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let r = ((i as f64 - cy).hypot(j as f64 - cx)) / half;
        let island = (i as f64 - iy).hypot(j as f64 - ix) <= ir;
        r > 1.05 || island
    })
}

fn radius(h: usize, w: usize) -> Array2<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let half = h.min(w) as f64 / 2.0;
    Array2::from_shape_fn((h, w), |(i, j)| (i as f64 - cy).hypot(j as f64 - cx) / half)
}

/// Spatially smoothed white noise rescaled to unit variance.
fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: usize) -> Array2<f64> {
    let white: Array2<f64> = Array2::from_shape_fn((h, w), |_| StandardNormal.sample(rng));
    let mut out = Array2::zeros((h, w));
    let r = radius as isize;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut s, mut n) = (0.0, 0.0);
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if a >= 0 && b >= 0 && a < h as isize && b < w as isize {
                        s += white[[a as usize, b as usize]];
                        n += 1.0;
                    }
                }
            }
            out[[i as usize, j as usize]] = s / n;
        }
    }
    let var = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
    out.mapv_inplace(|v| v / var.sqrt().max(1e-12));
    out
}

fn ar1_fields(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, rho: f64, std: f64, radius: usize) -> Vec<Array2<f64>> {
    let innov = std * (1.0 - rho * rho).sqrt();
    let mut fields = Vec::with_capacity(t);
    let mut cur = smooth_noise(rng, h, w, radius) * std;
    for _ in 0..t {
        fields.push(cur.clone());
        let e = smooth_noise(rng, h, w, radius);
        cur = cur * rho + e * innov;
    }
    fields
}

/// SIC plus the three synthetic covariates over `years` years from 1979.
pub fn generate_synthetic(h: usize, w: usize, years: usize, seed: u64) -> Result<SeriesSet> {
    generate_synthetic_with(h, w, years, seed, &SyntheticParams::default())
}

pub fn generate_synthetic_with(h: usize, w: usize, years: usize, seed: u64, p: &SyntheticParams) -> Result<SeriesSet> {
    if years < MIN_SYNTHETIC_YEARS {
        return Err(Error::invalid("synthetic length", format!("{years} years; at least {MIN_SYNTHETIC_YEARS} are needed")));
    }
    if h < 4 || w < 4 {
        return Err(Error::invalid("synthetic grid", format!("{h}x{w} is too small")));
    }
    let t = years * 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let land = synthetic_land_mask(h, w);
    let r = radius(h, w);
    let anomaly = ar1_fields(&mut rng, t + p.lead_months, h, w, p.rho, p.anomaly_std, p.smooth_radius);
    let noise_cov = ar1_fields(&mut rng, t, h, w, p.rho, 1.0, p.smooth_radius);
    let months: Vec<Month> = (0..t).map(|i| Month::new(SYNTHETIC_START_YEAR, 1).offset(i as i32)).collect();

    let mut sic = Array3::<f32>::zeros((t, h, w));
    let mut causal = Array3::<f32>::zeros((t, h, w));
    let mut noise = Array3::<f32>::zeros((t, h, w));
    let mut ramp = Array3::<f32>::zeros((t, h, w));
    for (k, m) in months.iter().enumerate() {
        let phase = 2.0 * std::f64::consts::PI * (m.calendar() as f64 - 2.0) / 12.0;
        let years_in = k as f64 / 12.0;
        let jitter = smooth_noise(&mut rng, h, w, p.smooth_radius);
        Zip::indexed(sic.index_axis_mut(Axis(0), k)).for_each(|(i, j), v| {
            let rr = r[[i, j]];
            let base = 0.85 - 0.6 * rr;
            let amp = 0.08 + 0.25 * rr;
            let x = base + amp * phase.cos() - p.trend_per_year * years_in + anomaly[k][[i, j]];
            *v = if land[[i, j]] { 0.0 } else { x.clamp(0.0, 1.0) as f32 };
        });
        let ahead = &anomaly[k + p.lead_months];
        Zip::indexed(causal.index_axis_mut(Axis(0), k)).for_each(|(i, j), v| {
            *v = (ahead[[i, j]] / p.anomaly_std + p.causal_noise * jitter[[i, j]]) as f32;
        });
        noise.index_axis_mut(Axis(0), k).assign(&noise_cov[k].mapv(|v| v as f32));
        let level = k as f64 / (t - 1) as f64;
        Zip::indexed(ramp.index_axis_mut(Axis(0), k)).for_each(|(i, j), v| {
            *v = (level * (0.5 + 0.5 * (1.0 - r[[i, j]]).max(0.0))) as f32;
        });
    }
    let mut set = SeriesSet::new();
    let mut put = |var: Variable, data: Array3<f32>| -> Result<()> {
        set.insert(var, GridSeries::new(var.id(), var.units(), months.clone(), data, land.clone())?);
        Ok(())
    };
    put(Variable::Siconc, sic)?;
    put(Variable::SynCausal, causal)?;
    put(Variable::SynNoise, noise)?;
    put(Variable::SynTrend, ramp)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = generate_synthetic(16, 16, 15, 3).unwrap();
        let b = generate_synthetic(16, 16, 15, 3).unwrap();
        assert_eq!(a, b);
        let sic = &a[&Variable::Siconc];
        assert!(sic.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(sic.len(), 180);
        assert!(generate_synthetic(16, 16, 10, 3).is_err());
    }
}
