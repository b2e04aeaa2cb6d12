//! Reference forecasts: anomaly persistence, damped persistence and trend
//! climatology.
//!
//! Every baseline reads only months strictly before the initialization
//! month, works per cell in f64, clamps to [0, 1] and zeroes land.

use ndarray::{Array2, Array3, Axis, Zip};

use crate::calendar::{Month, MonthRange};
use crate::data::grid::GridSeries;
use crate::data::preprocess::{fit_line, month_name};
use crate::error::{Error, Result};
use crate::forecast::ForecastSet;

/// Years in the sliding climatology window.
pub const CLIMATOLOGY_YEARS: usize = 10;
/// Same-calendar pairs needed to estimate a damping coefficient.
pub const MIN_DAMPING_PAIRS: usize = 10;
/// Prior samples of the target calendar month needed for a trend fit.
pub const MIN_TREND_SAMPLES: usize = 3;

/// Per-calendar-month means over the `CLIMATOLOGY_YEARS` years that end
/// just before `init`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimatologyWindow {
    pub window: MonthRange,
    /// `[12, H, W]`, index 0 = January.
    pub means: Array3<f64>,
}

impl ClimatologyWindow {
    pub fn preceding(series: &GridSeries, init: Month) -> Result<Self> {
        let months = (CLIMATOLOGY_YEARS * 12) as i32;
        let window = MonthRange::new(init.offset(-months), init.offset(-1));
        let (h, w) = series.grid_shape();
        let mut means = Array3::<f64>::zeros((12, h, w));
        for m in window.iter() {
            let field = series.field(m).ok_or_else(|| {
                Error::InsufficientHistory(format!("climatology window {window} needs {m} of {}", series.variable))
            })?;
            Zip::from(means.index_axis_mut(Axis(0), m.calendar_index()))
                .and(field)
                .for_each(|acc, &v| *acc += v as f64);
        }
        means.mapv_inplace(|v| v / CLIMATOLOGY_YEARS as f64);
        Ok(ClimatologyWindow { window, means })
    }

    pub fn for_month(&self, m: Month) -> ndarray::ArrayView2<'_, f64> {
        self.means.index_axis(Axis(0), m.calendar_index())
    }
}

fn last_observed(series: &GridSeries, init: Month) -> Result<Array2<f64>> {
    let last = init.offset(-1);
    let f = series
        .field(last)
        .ok_or_else(|| Error::InsufficientHistory(format!("{} has no observation at {last}", series.variable)))?;
    Ok(f.mapv(|v| v as f64))
}

fn finish(init: Month, leads: Vec<Array2<f64>>, land: &Array2<bool>) -> ForecastSet {
    let (h, w) = land.dim();
    let mut maps = Array3::<f32>::zeros((leads.len(), h, w));
    for (l, field) in leads.iter().enumerate() {
        Zip::from(maps.index_axis_mut(Axis(0), l)).and(field).and(land).for_each(|out, &v, &is_land| {
            *out = if is_land { 0.0 } else { v.clamp(0.0, 1.0) as f32 };
        });
    }
    ForecastSet { init, maps }
}

fn check_leads(leads: usize) -> Result<()> {
    if leads == 0 {
        return Err(Error::invalid("lead count", "must be at least 1"));
    }
    Ok(())
}

/// Target-month climatology plus `damping[lead] ·` the last observed
/// anomaly, for each lead.
fn persist(
    series: &GridSeries,
    init: Month,
    leads: usize,
    damping: impl Fn(usize) -> Option<Array2<f64>>,
) -> Result<ForecastSet> {
    check_leads(leads)?;
    let clim = ClimatologyWindow::preceding(series, init)?;
    let last = last_observed(series, init)?;
    let anomaly = &last - &clim.for_month(init.offset(-1));
    let fields = (1..=leads)
        .map(|lead| {
            let target = init.offset(lead as i32 - 1);
            let mut f = clim.for_month(target).to_owned();
            match damping(lead) {
                Some(r) => f += &(&r * &anomaly),
                None => f += &anomaly,
            }
            f
        })
        .collect();
    Ok(finish(init, fields, &series.land_mask))
}

/// Climatology of each target month plus the undamped anomaly of the month
/// before `init`.
pub fn anomaly_persistence(series: &GridSeries, init: Month, leads: usize) -> Result<ForecastSet> {
    persist(series, init, leads, |_| None)
}

/// Per-cell correlation, clipped to [0, 1], between a calendar month and the
/// month `lead` months later, over every such pair observed before `init`.
///
/// Cells with no variability in either month get 0.
pub fn damping_coefficients(series: &GridSeries, init: Month, lead: usize) -> Result<Array2<f64>> {
    let base = init.offset(-1);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut m = base;
    loop {
        let later = m.offset(lead as i32);
        if later < init {
            match (series.index_of(m), series.index_of(later)) {
                (Some(a), Some(b)) => pairs.push((a, b)),
                _ => break,
            }
        }
        m = m.offset(-12);
        if m < series.months[0] {
            break;
        }
    }
    if pairs.len() < MIN_DAMPING_PAIRS {
        return Err(Error::InsufficientHistory(format!(
            "damping at lead {lead} needs {MIN_DAMPING_PAIRS} {} pairs before {init}, found {}",
            month_name(base.calendar_index()),
            pairs.len()
        )));
    }
    let (h, w) = series.grid_shape();
    let n = pairs.len() as f64;
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let xs: Vec<f64> = pairs.iter().map(|&(a, _)| series.data[[a, i, j]] as f64).collect();
        let ys: Vec<f64> = pairs.iter().map(|&(_, b)| series.data[[b, i, j]] as f64).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        if sxx <= 0.0 || syy <= 0.0 {
            0.0
        } else {
            (sxy / (sxx * syy).sqrt()).clamp(0.0, 1.0)
        }
    }))
}

/// Anomaly persistence with the anomaly scaled by the per-cell lagged
/// correlation of historical anomalies.
pub fn damped_persistence(series: &GridSeries, init: Month, leads: usize) -> Result<ForecastSet> {
    check_leads(leads)?;
    let coefficients = (1..=leads).map(|l| damping_coefficients(series, init, l)).collect::<Result<Vec<_>>>()?;
    persist(series, init, leads, |l| Some(coefficients[l - 1].clone()))
}

/// Per-cell least-squares line through every earlier year of the target
/// calendar month, evaluated at the target year.
pub fn trend_climatology(series: &GridSeries, init: Month, leads: usize) -> Result<ForecastSet> {
    check_leads(leads)?;
    let (h, w) = series.grid_shape();
    let mut fields = Vec::with_capacity(leads);
    for lead in 1..=leads {
        let target = init.offset(lead as i32 - 1);
        let idx: Vec<usize> = (0..series.len())
            .filter(|&t| series.months[t] < init && series.months[t].calendar() == target.calendar())
            .collect();
        if idx.len() < MIN_TREND_SAMPLES {
            return Err(Error::InsufficientHistory(format!(
                "trend for {} needs {MIN_TREND_SAMPLES} earlier years before {init}, found {}",
                month_name(target.calendar_index()),
                idx.len()
            )));
        }
        let years: Vec<f64> = idx.iter().map(|&t| series.months[t].year() as f64).collect();
        let mut field = Array2::<f64>::zeros((h, w));
        for ((i, j), out) in field.indexed_iter_mut() {
            let ys: Vec<f64> = idx.iter().map(|&t| series.data[[t, i, j]] as f64).collect();
            let (slope, icept) = fit_line(&years, &ys)?;
            *out = slope * target.year() as f64 + icept;
        }
        fields.push(field);
    }
    Ok(finish(init, fields, &series.land_mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Baseline {
    AnomalyPersistence,
    DampedPersistence,
    TrendClimatology,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::AnomalyPersistence, Baseline::DampedPersistence, Baseline::TrendClimatology];

    pub fn id(self) -> &'static str {
        match self {
            Baseline::AnomalyPersistence => "anomaly_persistence",
            Baseline::DampedPersistence => "damped_persistence",
            Baseline::TrendClimatology => "trend_climatology",
        }
    }

    pub fn forecast(self, series: &GridSeries, init: Month, leads: usize) -> Result<ForecastSet> {
        match self {
            Baseline::AnomalyPersistence => anomaly_persistence(series, init, leads),
            Baseline::DampedPersistence => damped_persistence(series, init, leads),
            Baseline::TrendClimatology => trend_climatology(series, init, leads),
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.id() == s)
            .ok_or_else(|| Error::invalid("baseline", format!("unknown id `{s}`")))
    }
}
