//! Train-then-evaluate runs over a split, shared by the command line, the
//! explainability drivers and the acceptance harness.

use rayon::prelude::*;

use crate::baselines::Baseline;
use crate::calendar::Month;
use crate::data::preprocess::Climatology;
use crate::data::sample::{Dataset, Sample, SampleLayout, SeriesSet};
use crate::data::splits::{init_months, Splits};
use crate::error::{Error, Result};
use crate::forecast::{forecast_direct, ForecastSet};
use crate::metrics::MetricTable;
use crate::model::{build_model, Model, ModelConfig};
use crate::train::{train_loop, EpochRecord, TrainConfig, TrainReport};

/// Cell area of the 25 km grid, in km².
pub const CELL_AREA_KM2: f64 = 625.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub layout: SampleLayout,
    pub lead_count: usize,
    pub splits: Splits,
    /// `input_channels` and `lead_count` are overwritten from the layout.
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
}

/// Initializations of each split under the self-containment rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitInits {
    pub train: Vec<Month>,
    pub valid: Vec<Month>,
    pub test: Vec<Month>,
}

impl SplitInits {
    pub fn new(splits: &Splits, layout: &SampleLayout, lead_count: usize) -> Result<Self> {
        let max_lag = layout.specs().iter().map(|s| s.lag_count).max().unwrap_or(0);
        let s = SplitInits {
            train: init_months(splits.train, max_lag, lead_count),
            valid: init_months(splits.valid, max_lag, lead_count),
            test: init_months(splits.test, max_lag, lead_count),
        };
        for (name, v) in [("training", &s.train), ("validation", &s.valid), ("test", &s.test)] {
            if v.is_empty() {
                return Err(Error::invalid("split", format!("the {name} period holds no complete sample")));
            }
        }
        Ok(s)
    }
}

pub struct TrainedRun {
    pub model: Model<f32>,
    pub data: Dataset,
    pub report: TrainReport,
    pub inits: SplitInits,
    /// Climatology of the training years, for anomaly correlation.
    pub climatology: Climatology,
}

/// Prepares the data on the training years, builds and trains the model.
pub fn train_experiment(series: &SeriesSet, spec: &ExperimentSpec, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainedRun> {
    let data = Dataset::prepare(series, spec.layout.clone(), spec.lead_count, spec.splits.train)?;
    let inits = SplitInits::new(&spec.splits, &spec.layout, spec.lead_count)?;
    let cfg = ModelConfig { input_channels: spec.layout.channels(), lead_count: spec.lead_count, ..spec.model.clone() };
    let mut model = build_model::<f32>(&cfg, spec.model_seed)?;
    model.stats_id = Some(data.stats_id());
    let report = train_loop(&mut model, &data, &inits.train, &inits.valid, &spec.train, on_epoch)?;
    let climatology = Climatology::fit(&data.sic, spec.splits.train)?;
    Ok(TrainedRun { model, data, report, inits, climatology })
}

impl TrainedRun {
    pub fn test_samples(&self) -> Result<Vec<Sample>> {
        self.data.samples(&self.inits.test)
    }

    pub fn model_forecasts(&self) -> Result<Vec<ForecastSet>> {
        self.test_samples()?.par_iter().map(|s| forecast_direct(&self.model, s)).collect()
    }

    pub fn baseline_forecasts(&self, baseline: Baseline) -> Result<Vec<ForecastSet>> {
        self.inits.test.iter().map(|&m| baseline.forecast(&self.data.sic, m, self.data.lead_count)).collect()
    }

    /// Scores over non-land cells, with ACC against the training climatology.
    pub fn score(&self, forecasts: &[ForecastSet]) -> Result<MetricTable> {
        let mut table = MetricTable::new("non_land", CELL_AREA_KM2);
        for f in forecasts {
            table.evaluate(f, &self.data.sic, None, Some(&self.climatology))?;
        }
        Ok(table)
    }
}
