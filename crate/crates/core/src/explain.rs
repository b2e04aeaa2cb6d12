//! Permute-and-predict channel importance and the detrended retraining
//! experiment.
//!
//! A channel's fields are shuffled across the test initializations (whole
//! 2D fields move between samples) and the change in masked MAE is recorded
//! by lead and by target month, averaged over permutation seeds.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::preprocess::detrend_linear;
use crate::data::sample::{Sample, SampleLayout, SeriesSet};
use crate::data::variables::Variable;
use crate::error::{Error, Result};
use crate::experiment::{train_experiment, ExperimentSpec, TrainedRun};
use crate::forecast::{forecast_direct, ForecastSet};
use crate::metrics::{masked_error, ErrorKind, MetricTable};
use crate::model::Forecaster;

pub const DEFAULT_PERMUTATION_SEEDS: usize = 10;

/// `count` permutation seeds derived from `master`.
pub fn permutation_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.gen()).collect()
}

/// Mean and population standard deviation over permutation seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedStat {
    pub mean: f64,
    pub std: f64,
}

impl SeedStat {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(SeedStat { mean, std: var.sqrt() })
    }
}

/// ΔMAE (percent) of one `(variable, lag)` channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImportance {
    pub variable: Variable,
    pub lag: usize,
    /// Index `lead - 1`.
    pub by_lead: Vec<Option<SeedStat>>,
    /// Index `calendar month - 1` of the target.
    pub by_target_month: [Option<SeedStat>; 12],
    /// Over every (sample, lead) pair.
    pub overall: SeedStat,
    /// Unpermuted MAE by lead.
    pub baseline_by_lead: Vec<f64>,
    /// Unpermuted MAE by target month.
    pub baseline_by_target_month: [Option<f64>; 12],
}

impl ChannelImportance {
    pub fn label(&self) -> String {
        channel_label(self.variable, self.lag)
    }
}

/// Row label with the lag in brackets, e.g. `siconc (12)`.
pub fn channel_label(variable: Variable, lag: usize) -> String {
    format!("{variable} ({lag})")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub seeds: Vec<u64>,
    pub lead_count: usize,
    pub entries: Vec<ChannelImportance>,
}

/// Per-sample, per-lead masked MAE matrix `[samples, leads]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadErrors {
    pub inits: Vec<crate::calendar::Month>,
    pub values: Array2<f64>,
}

fn sample_errors(forecast: &ForecastSet, sample: &Sample, mask: &Array2<bool>) -> Result<Vec<f64>> {
    let target = sample
        .target
        .as_ref()
        .ok_or_else(|| Error::MissingMonth { variable: "siconc".into(), month: sample.init })?;
    (0..forecast.lead_count())
        .map(|l| masked_error(forecast.maps.index_axis(Axis(0), l), target.index_axis(Axis(0), l), mask, ErrorKind::Mae))
        .collect()
}

/// Masked MAE of direct forecasts for every sample and lead.
pub fn lead_errors(model: &dyn Forecaster, samples: &[Sample]) -> Result<LeadErrors> {
    let k = model.lead_count();
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| sample_errors(&forecast_direct(model, s)?, s, &s.land.mapv(|l| !l)))
        .collect::<Result<_>>()?;
    let mut values = Array2::zeros((samples.len(), k));
    for (i, errs) in rows.into_iter().enumerate() {
        values.row_mut(i).assign(&ndarray::Array1::from(errs));
    }
    Ok(LeadErrors { inits: samples.iter().map(|s| s.init).collect(), values })
}

/// Inputs with channel `channel` of sample `i` replaced by that of sample
/// `perm[i]`; every other channel is left untouched.
pub fn permuted_inputs(samples: &[Sample], channel: usize, perm: &[usize]) -> Vec<Array3<f32>> {
    samples
        .iter()
        .zip(perm)
        .map(|(s, &src)| {
            let mut input = s.input.clone();
            input.index_axis_mut(Axis(0), channel).assign(&samples[src].input.index_axis(Axis(0), channel));
            input
        })
        .collect()
}

/// Seeded permutation of `0..n`.
pub fn permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// ΔMAE of permuting `(variable, lag)` across `samples`, one permutation per
/// seed.
pub fn permute_importance(
    model: &dyn Forecaster,
    layout: &SampleLayout,
    samples: &[Sample],
    baseline: &LeadErrors,
    variable: Variable,
    lag: usize,
    seeds: &[u64],
) -> Result<ChannelImportance> {
    let channel = layout
        .channel(variable, lag)
        .ok_or_else(|| Error::invalid("channel", format!("{} is not in the sample layout", channel_label(variable, lag))))?;
    if samples.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("permutation", "needs at least one sample and one seed"));
    }
    if baseline.values.dim() != (samples.len(), model.lead_count()) {
        return Err(Error::shape("permute_importance", "baseline errors do not match the samples"));
    }
    let k = model.lead_count();
    let months: Vec<Vec<usize>> =
        samples.iter().map(|s| (0..k).map(|l| s.init.offset(l as i32).calendar_index()).collect()).collect();
    let mut per_lead: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut per_month: [Vec<f64>; 12] = Default::default();
    let mut overall = Vec::new();
    for &seed in seeds {
        let perm = permutation(seed, samples.len());
        let inputs = permuted_inputs(samples, channel, &perm);
        let moved: Vec<Option<Vec<f64>>> = samples
            .par_iter()
            .zip(inputs)
            .enumerate()
            .map(|(i, (s, input))| {
                if perm[i] == i || s.input.index_axis(Axis(0), channel) == input.index_axis(Axis(0), channel) {
                    return Ok(None);
                }
                let moved = Sample { input, ..s.clone() };
                sample_errors(&forecast_direct(model, &moved)?, s, &s.land.mapv(|l| !l)).map(Some)
            })
            .collect::<Result<_>>()?;
        let mut delta = Array2::<f64>::zeros((samples.len(), k));
        for (i, errs) in moved.iter().enumerate() {
            if let Some(errs) = errs {
                for l in 0..k {
                    delta[[i, l]] = errs[l] - baseline.values[[i, l]];
                }
            }
        }
        for (l, slot) in per_lead.iter_mut().enumerate() {
            slot.push(delta.column(l).mean().expect("nonempty"));
        }
        let mut month_sum = [(0.0f64, 0usize); 12];
        for i in 0..samples.len() {
            for l in 0..k {
                let m = months[i][l];
                month_sum[m].0 += delta[[i, l]];
                month_sum[m].1 += 1;
            }
        }
        for m in 0..12 {
            if month_sum[m].1 > 0 {
                per_month[m].push(month_sum[m].0 / month_sum[m].1 as f64);
            }
        }
        overall.push(delta.mean().expect("nonempty"));
    }
    let mut base_month = [(0.0f64, 0usize); 12];
    for i in 0..samples.len() {
        for l in 0..k {
            base_month[months[i][l]].0 += baseline.values[[i, l]];
            base_month[months[i][l]].1 += 1;
        }
    }
    Ok(ChannelImportance {
        variable,
        lag,
        by_lead: per_lead.iter().map(|v| SeedStat::of(v)).collect(),
        by_target_month: std::array::from_fn(|m| SeedStat::of(&per_month[m])),
        overall: SeedStat::of(&overall).expect("at least one seed"),
        baseline_by_lead: (0..k).map(|l| baseline.values.column(l).mean().expect("nonempty")).collect(),
        baseline_by_target_month: std::array::from_fn(|m| {
            (base_month[m].1 > 0).then(|| base_month[m].0 / base_month[m].1 as f64)
        }),
    })
}

/// Importance of every channel in `channels` (all layout channels when
/// `None`).
pub fn importance_table(
    model: &dyn Forecaster,
    layout: &SampleLayout,
    samples: &[Sample],
    channels: Option<&[(Variable, usize)]>,
    seeds: &[u64],
) -> Result<ImportanceTable> {
    let baseline = lead_errors(model, samples)?;
    let all = layout.labels();
    let channels = channels.unwrap_or(&all);
    let entries = channels
        .iter()
        .map(|&(v, l)| permute_importance(model, layout, samples, &baseline, v, l, seeds))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceTable { seeds: seeds.to_vec(), lead_count: model.lead_count(), entries })
}

/// Rows of labelled values; `None` marks a missing entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledGrid {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl ImportanceTable {
    pub fn get(&self, variable: Variable, lag: usize) -> Option<&ChannelImportance> {
        self.entries.iter().find(|e| e.variable == variable && e.lag == lag)
    }

    /// Overall ΔMAE averaged over every listed lag of `variable`.
    pub fn variable_mean(&self, variable: Variable) -> Option<f64> {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.variable == variable).map(|e| e.overall.mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `importance.csv`: variable, lag, axis (`lead`, `target_month` or
    /// `all`), axis value, mean ΔMAE in percent, seed standard deviation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variable", "lag", "axis", "axis_value", "delta_mae_percent", "seed_std"])?;
        let mut row = |e: &ChannelImportance, axis: &str, value: String, stat: Option<SeedStat>| -> Result<()> {
            let (m, s) = stat.map_or(("NA".to_string(), "NA".to_string()), |st| (format!("{}", st.mean), format!("{}", st.std)));
            w.write_record([e.variable.id().to_string(), e.lag.to_string(), axis.to_string(), value, m, s])?;
            Ok(())
        };
        for e in &self.entries {
            for (l, st) in e.by_lead.iter().enumerate() {
                row(e, "lead", (l + 1).to_string(), *st)?;
            }
            for (m, st) in e.by_target_month.iter().enumerate() {
                row(e, "target_month", (m + 1).to_string(), *st)?;
            }
            row(e, "all", "all".into(), Some(e.overall))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Grid A (rows × leads) and grid B (rows × target months), one row per
/// layout channel in layout order.
pub fn importance_heatmaps(table: &ImportanceTable, layout: &SampleLayout) -> (LabelledGrid, LabelledGrid) {
    let labels = layout.labels();
    let rows: Vec<String> = labels.iter().map(|&(v, l)| channel_label(v, l)).collect();
    let by_lead = labels
        .iter()
        .map(|&(v, l)| match table.get(v, l) {
            Some(e) => e.by_lead.iter().map(|s| s.map(|s| s.mean)).collect(),
            None => vec![None; table.lead_count],
        })
        .collect();
    let by_month = labels
        .iter()
        .map(|&(v, l)| match table.get(v, l) {
            Some(e) => e.by_target_month.iter().map(|s| s.map(|s| s.mean)).collect(),
            None => vec![None; 12],
        })
        .collect();
    (
        LabelledGrid {
            rows: rows.clone(),
            columns: (1..=table.lead_count).map(|l| format!("lead_{l}")).collect(),
            values: by_lead,
        },
        LabelledGrid { rows, columns: (1..=12).map(|m| format!("month_{m}")).collect(), values: by_month },
    )
}

impl LabelledGrid {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["channel".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (label, vals) in self.rows.iter().zip(&self.values) {
            let mut row = vec![label.clone()];
            row.extend(vals.iter().map(|v| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Results of one arm of the detrending experiment.
pub struct ExperimentArm {
    /// `raw` or `detrended`.
    pub id: &'static str,
    pub run: TrainedRun,
    pub importance: ImportanceTable,
    pub metrics: MetricTable,
}

pub struct DetrendExperiment {
    pub variable: Variable,
    pub raw: ExperimentArm,
    pub detrended: ExperimentArm,
}

impl DetrendExperiment {
    /// Relative drop of the variable's mean ΔMAE, `1 - detrended / raw`.
    pub fn importance_drop(&self) -> Option<f64> {
        let raw = self.raw.importance.variable_mean(self.variable)?;
        let det = self.detrended.importance.variable_mean(self.variable)?;
        (raw > 0.0).then(|| 1.0 - det / raw)
    }

    /// Rows `experiment, metric, units, value` with test-period means.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["experiment", "metric", "units", "value"])?;
        for arm in [&self.raw, &self.detrended] {
            for m in crate::metrics::Metric::ALL {
                if let Some(v) = arm.metrics.mean(m) {
                    w.write_record([arm.id.to_string(), m.id().to_string(), m.units().to_string(), format!("{v}")])?;
                }
            }
            if let Some(v) = arm.importance.variable_mean(self.variable) {
                w.write_record([arm.id.to_string(), format!("delta_mae_{}", self.variable), "percent".into(), format!("{v}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn run_arm(
    id: &'static str,
    series: &SeriesSet,
    spec: &ExperimentSpec,
    channels: Option<&[(Variable, usize)]>,
    seeds: &[u64],
) -> Result<ExperimentArm> {
    let run = train_experiment(series, spec, |_| {})?;
    let samples = run.test_samples()?;
    let importance = importance_table(&run.model, &spec.layout, &samples, channels, seeds)?;
    let metrics = run.score(&run.model_forecasts()?)?;
    Ok(ExperimentArm { id, run, importance, metrics })
}

/// Trains twice with identical configuration and seeds, once on the raw
/// series and once with `variable` linearly detrended over its whole record,
/// and scores importance and test metrics for both.
pub fn detrended_retrain_experiment(
    series: &SeriesSet,
    spec: &ExperimentSpec,
    variable: Variable,
    channels: Option<&[(Variable, usize)]>,
    seeds: &[u64],
) -> Result<DetrendExperiment> {
    if variable == Variable::Siconc {
        return Err(Error::invalid("detrend variable", "siconc is the forecast target and cannot be detrended"));
    }
    let target = series
        .get(&variable)
        .ok_or_else(|| Error::invalid("detrend variable", format!("no series for {variable}")))?;
    let mut detrended = series.clone();
    detrended.insert(variable, detrend_linear(target)?);
    Ok(DetrendExperiment {
        variable,
        raw: run_arm("raw", series, spec, channels, seeds)?,
        detrended: run_arm("detrended", &detrended, spec, channels, seeds)?,
    })
}
