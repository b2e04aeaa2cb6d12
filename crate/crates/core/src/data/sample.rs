//! Channel-fused input stacks and the datasets that produce them.
//!
//! A sample initialized at month `m` forecasts months `m, m+1, …, m+k-1`
//! (lead 1 is `m` itself) from observations of months before `m`: lag `ℓ`
//! of a variable is its field at `m - ℓ`.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};

use crate::calendar::{Month, MonthRange};
use crate::data::grid::GridSeries;
use crate::data::preprocess::{clean_sic, normalize, NormStats};
use crate::data::variables::{Variable, VariableSpec};
use crate::error::{Error, Result};

pub type SeriesSet = BTreeMap<Variable, GridSeries>;

/// Ordered variable specs; SIC with its twelve lags always comes first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleLayout {
    specs: Vec<VariableSpec>,
}

impl SampleLayout {
    /// `extra` lists the non-SIC variables in channel order.
    pub fn new(extra: Vec<VariableSpec>) -> Result<Self> {
        let mut specs = vec![VariableSpec::siconc()];
        for s in extra {
            s.validate()?;
            if specs.iter().any(|p| p.variable == s.variable) {
                return Err(Error::invalid("sample layout", format!("{} listed twice", s.variable)));
            }
            specs.push(s);
        }
        Ok(SampleLayout { specs })
    }

    pub fn sic_only() -> Self {
        SampleLayout { specs: vec![VariableSpec::siconc()] }
    }

    pub fn specs(&self) -> &[VariableSpec] {
        &self.specs
    }

    pub fn channels(&self) -> usize {
        self.specs.iter().map(|s| s.lag_count).sum()
    }

    pub fn is_sic_only(&self) -> bool {
        self.specs.len() == 1
    }

    /// `(variable, lag)` of every channel, in order.
    pub fn labels(&self) -> Vec<(Variable, usize)> {
        self.specs.iter().flat_map(|s| (1..=s.lag_count).map(move |l| (s.variable, l))).collect()
    }

    pub fn channel(&self, variable: Variable, lag: usize) -> Option<usize> {
        self.labels().iter().position(|&(v, l)| v == variable && l == lag)
    }

    /// Earliest month read by a sample initialized at `init`.
    pub fn earliest_input(&self, init: Month) -> Month {
        let max_lag = self.specs.iter().map(|s| s.lag_count).max().unwrap_or(0);
        init.offset(-(max_lag as i32))
    }
}

/// Stacks the lagged fields of every variable for initialization `init`.
pub fn assemble_sample(init: Month, layout: &SampleLayout, series: &SeriesSet) -> Result<Array3<f32>> {
    let first = series
        .get(&Variable::Siconc)
        .ok_or_else(|| Error::MissingMonth { variable: "siconc".into(), month: init.offset(-1) })?;
    let (h, w) = first.grid_shape();
    let mut out = Array3::zeros((layout.channels(), h, w));
    for (c, (var, lag)) in layout.labels().into_iter().enumerate() {
        let month = init.offset(-(lag as i32));
        let s = series.get(&var).ok_or_else(|| Error::MissingMonth { variable: var.id().into(), month })?;
        if s.grid_shape() != (h, w) {
            return Err(Error::shape("assemble_sample", format!("{var} grid {:?} differs from {h}x{w}", s.grid_shape())));
        }
        out.index_axis_mut(Axis(0), c).assign(&s.require(month)?);
    }
    Ok(out)
}

/// One model input with its optional verifying observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub init: Month,
    /// `[C, H, W]`
    pub input: Array3<f32>,
    /// `[k, H, W]` observed SIC at leads `1..=k`.
    pub target: Option<Array3<f32>>,
    pub land: Arc<Array2<bool>>,
}

/// Preprocessed inputs plus cleaned SIC targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub layout: SampleLayout,
    pub lead_count: usize,
    pub inputs: SeriesSet,
    /// Cleaned SIC in [0, 1], land 0.
    pub sic: GridSeries,
    pub land: Arc<Array2<bool>>,
    pub stats: Vec<NormStats>,
}

impl Dataset {
    /// Cleans SIC, fits statistics on `fit_window` only, and applies them to
    /// every month.
    pub fn prepare(raw: &SeriesSet, layout: SampleLayout, lead_count: usize, fit_window: MonthRange) -> Result<Self> {
        let mut stats = Vec::new();
        for spec in layout.specs() {
            if spec.variable != Variable::Siconc && (spec.anomaly || spec.normalize) {
                let series = raw
                    .get(&spec.variable)
                    .ok_or_else(|| Error::invalid("dataset", format!("no series for {}", spec.variable)))?;
                stats.push(NormStats::fit(series, fit_window, spec.anomaly, spec.normalize)?);
            }
        }
        Self::with_stats(raw, layout, lead_count, stats)
    }

    /// Cleans SIC and applies previously fitted `stats`, which must cover
    /// exactly the variables the layout standardizes or converts to
    /// anomalies, with matching options.
    pub fn with_stats(raw: &SeriesSet, layout: SampleLayout, lead_count: usize, stats: Vec<NormStats>) -> Result<Self> {
        if lead_count == 0 {
            return Err(Error::invalid("lead count", "must be at least 1"));
        }
        let sic_raw = raw
            .get(&Variable::Siconc)
            .ok_or_else(|| Error::invalid("dataset", "siconc series is required"))?;
        let sic = clean_sic(sic_raw, None)?;
        let land = Arc::new(sic.land_mask.clone());
        let mut inputs = SeriesSet::new();
        let mut used = Vec::new();
        for spec in layout.specs() {
            let series = if spec.variable == Variable::Siconc {
                &sic
            } else {
                raw.get(&spec.variable)
                    .ok_or_else(|| Error::invalid("dataset", format!("no series for {}", spec.variable)))?
            };
            if series.grid_shape() != sic.grid_shape() {
                return Err(Error::shape("dataset", format!("{} grid differs from siconc", spec.variable)));
            }
            if spec.variable != Variable::Siconc && (spec.anomaly || spec.normalize) {
                let s = stats
                    .iter()
                    .find(|s| s.variable == spec.variable.id())
                    .ok_or_else(|| Error::invalid("statistics", format!("none for {}", spec.variable)))?;
                if s.normalize != spec.normalize || s.climatology.is_some() != spec.anomaly {
                    return Err(Error::invalid("statistics", format!("options for {} differ from the layout", spec.variable)));
                }
                inputs.insert(spec.variable, normalize(series, s)?);
                used.push(s.clone());
            } else {
                inputs.insert(spec.variable, series.clone());
            }
        }
        if used.len() != stats.len() {
            return Err(Error::invalid("statistics", "entries for variables outside the layout"));
        }
        Ok(Dataset { layout, lead_count, inputs, sic, land, stats: used })
    }

    /// Identifier of the fitted statistics.
    pub fn stats_id(&self) -> String {
        let ids: Vec<String> = self.stats.iter().map(|s| s.id()).collect();
        if ids.is_empty() {
            "none".into()
        } else {
            ids.join("-")
        }
    }

    pub fn months(&self) -> MonthRange {
        MonthRange::new(self.sic.months[0], *self.sic.months.last().expect("nonempty"))
    }

    pub fn target(&self, init: Month) -> Result<Array3<f32>> {
        let (h, w) = self.sic.grid_shape();
        let mut out = Array3::zeros((self.lead_count, h, w));
        for l in 0..self.lead_count {
            out.index_axis_mut(Axis(0), l).assign(&self.sic.require(init.offset(l as i32))?);
        }
        Ok(out)
    }

    /// Sample at `init`; the target is attached when observations exist.
    pub fn sample(&self, init: Month) -> Result<Sample> {
        let input = assemble_sample(init, &self.layout, &self.inputs)?;
        let target = self.target(init).ok();
        Ok(Sample { init, input, target, land: self.land.clone() })
    }

    pub fn samples(&self, inits: &[Month]) -> Result<Vec<Sample>> {
        inits.iter().map(|&m| self.sample(m)).collect()
    }
}
