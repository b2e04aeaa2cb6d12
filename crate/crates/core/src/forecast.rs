//! Forecast sets and the direct and autoregressive forecasting drivers.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};

use crate::calendar::Month;
use crate::data::grid::GridSeries;
use crate::data::sample::Sample;
use crate::data::variables::SIC_LAGS;
use crate::error::{Error, Result};
use crate::model::Forecaster;

/// SIC maps for leads `1..=k` from one initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    /// Target month of lead 1.
    pub init: Month,
    /// `[k, H, W]`, values in [0, 1], land 0.
    pub maps: Array3<f32>,
}

impl ForecastSet {
    pub fn lead_count(&self) -> usize {
        self.maps.dim().0
    }

    /// Month verified by lead `lead` (1-based).
    pub fn target_month(&self, lead: usize) -> Month {
        self.init.offset(lead as i32 - 1)
    }

    pub fn map(&self, lead: usize) -> ArrayView2<'_, f32> {
        self.maps.index_axis(Axis(0), lead - 1)
    }

    /// Checks the value range and that land cells are exactly zero.
    pub fn validate(&self, land: &Array2<bool>) -> Result<()> {
        let (_, h, w) = self.maps.dim();
        if land.dim() != (h, w) {
            return Err(Error::shape("forecast set", format!("land mask {:?} for maps {h}x{w}", land.dim())));
        }
        for ((l, i, j), &v) in self.maps.indexed_iter() {
            let ok = if land[[i, j]] { v == 0.0 } else { (0.0..=1.0).contains(&v) };
            if !ok {
                return Err(Error::invalid("forecast value", format!("{v} at lead {}, cell ({i}, {j})", l + 1)));
            }
        }
        Ok(())
    }

    /// The maps as a series indexed by target month.
    pub fn to_series(&self, variable: &str, land: &Array2<bool>) -> Result<GridSeries> {
        let months = (1..=self.lead_count()).map(|l| self.target_month(l)).collect();
        GridSeries::new(variable, "1", months, self.maps.clone(), land.clone())
    }

    pub fn from_series(init: Month, series: &GridSeries) -> Result<Self> {
        let expected: Vec<Month> = (0..series.len()).map(|l| init.offset(l as i32)).collect();
        if series.months != expected {
            return Err(Error::HeaderMismatch(format!("forecast file does not start at {init} with consecutive months")));
        }
        Ok(ForecastSet { init, maps: series.data.clone() })
    }
}

/// Clamps head output to [0, 1] and zeroes land cells.
pub fn head_to_sic(mut raw: Array3<f32>, land: &Array2<bool>) -> Array3<f32> {
    for mut map in raw.outer_iter_mut() {
        Zip::from(&mut map).and(land).for_each(|v, &is_land| {
            *v = if is_land { 0.0 } else { v.clamp(0.0, 1.0) };
        });
    }
    raw
}

fn check_input(model: &dyn Forecaster, input: &Array3<f32>, land: &Array2<bool>) -> Result<()> {
    let (c, h, w) = input.dim();
    if c != model.input_channels() {
        return Err(Error::shape("forecast", format!("sample has {c} channels, model expects {}", model.input_channels())));
    }
    if land.dim() != (h, w) {
        return Err(Error::shape("forecast", format!("land mask {:?} for a {h}x{w} sample", land.dim())));
    }
    Ok(())
}

/// All leads of the model in one pass.
pub fn forecast_direct(model: &dyn Forecaster, sample: &Sample) -> Result<ForecastSet> {
    check_input(model, &sample.input, &sample.land)?;
    let raw = model.predict(&sample.input)?;
    Ok(ForecastSet { init: sample.init, maps: head_to_sic(raw, &sample.land) })
}

/// Rolls a one-month, SIC-only model forward `horizon` months, feeding each
/// prediction back as the newest lag.
///
/// `history` holds the last twelve observed months in lag order (channel 0
/// is the month before `init`).
pub fn forecast_autoregressive(
    model: &dyn Forecaster,
    history: &Array3<f32>,
    land: &Array2<bool>,
    init: Month,
    horizon: usize,
) -> Result<ForecastSet> {
    if model.lead_count() != 1 {
        return Err(Error::invalid("autoregressive model", format!("needs one lead, model has {}", model.lead_count())));
    }
    if model.input_channels() != SIC_LAGS {
        return Err(Error::invalid(
            "autoregressive model",
            format!("needs {SIC_LAGS} SIC-only channels, model has {}; other inputs cannot be fed back", model.input_channels()),
        ));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    check_input(model, history, land)?;
    let (_, h, w) = history.dim();
    let mut window = history.clone();
    let mut maps = Array3::zeros((horizon, h, w));
    for step in 0..horizon {
        let next = head_to_sic(model.predict(&window)?, land);
        let next = next.index_axis(Axis(0), 0);
        maps.index_axis_mut(Axis(0), step).assign(&next);
        let older = window.slice(s![..SIC_LAGS - 1, .., ..]).to_owned();
        window.slice_mut(s![1.., .., ..]).assign(&older);
        window.index_axis_mut(Axis(0), 0).assign(&next);
    }
    Ok(ForecastSet { init, maps })
}

/// Writes one IMGR file per forecast set plus `index.csv` with one row per
/// (initialization, lead).
pub fn write_forecasts(dir: &Path, name: &str, sets: &[ForecastSet], land: &Array2<bool>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = csv::Writer::from_path(dir.join("index.csv"))?;
    index.write_record(["init_month", "lead", "target_month", "path"])?;
    for set in sets {
        let file = format!("{name}_{}.imgr", set.init);
        set.to_series("siconc", land)?.save(dir.join(&file))?;
        for lead in 1..=set.lead_count() {
            index
                .write_record([set.init.to_string(), lead.to_string(), set.target_month(lead).to_string(), file.clone()])
                ?;
        }
    }
    index.flush()?;
    Ok(())
}

/// Reads back the sets listed in `dir/index.csv`.
pub fn read_forecasts(dir: &Path) -> Result<Vec<ForecastSet>> {
    let mut reader = csv::Reader::from_path(dir.join("index.csv"))?;
    let mut files: Vec<(Month, String)> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let init: Month = row.get(0).unwrap_or_default().parse().map_err(|e: String| Error::invalid("month", e))?;
        let path = row.get(3).unwrap_or_default().to_string();
        if !files.iter().any(|(m, p)| *m == init && *p == path) {
            files.push((init, path));
        }
    }
    files.into_iter().map(|(init, path)| ForecastSet::from_series(init, &GridSeries::load(dir.join(path))?)).collect()
}
