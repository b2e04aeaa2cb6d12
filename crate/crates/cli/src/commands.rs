//! One function per subcommand. Each returns the lines to print and the
//! files it read and wrote, which go into the run manifest.

use std::path::{Path, PathBuf};

use icemamba::baselines::Baseline;
use icemamba::data::preprocess::{clean_sic, Climatology, StatsManifest};
use icemamba::data::sample::{assemble_sample, Dataset, Sample, SampleLayout, SeriesSet};
use icemamba::data::splits::{init_months, make_splits, SplitMode};
use icemamba::data::{generate_synthetic, GridSeries, Variable, VariableSpec};
use icemamba::experiment::{ExperimentSpec, CELL_AREA_KM2};
use icemamba::explain::{detrended_retrain_experiment, importance_heatmaps, importance_table, permutation_seeds};
use icemamba::forecast::{forecast_autoregressive, forecast_direct, read_forecasts, write_forecasts, ForecastSet};
use icemamba::metrics::{acc, iiee, masked_error, variability_mask, ErrorKind, Metric, MetricTable};
use icemamba::train::{train_loop, TrainConfig};
use icemamba::{build_model, Forecaster, Model, ModelConfig, Month, MonthRange};
use rayon::prelude::*;

use crate::config::{ConfigError, ForecastMode, RunConfig};

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration: exit 1.
    Usage(String),
    /// Missing or malformed data: exit 2.
    Data(String),
    /// NaN or infinity during computation: exit 3.
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Data(_) => "data",
            Failure::Numeric(_) => "numeric",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<icemamba::Error> for Failure {
    fn from(e: icemamba::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// What a command did.
#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: Vec<u64>,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn layout(cfg: &RunConfig) -> Result<SampleLayout> {
    SampleLayout::new(cfg.variables.clone()).map_err(|e| usage(e.to_string()))
}

/// Loads `<variable>.imgr` for SIC and every configured variable.
fn load_series(dir: &Path, specs: &[VariableSpec]) -> Result<(SeriesSet, Vec<PathBuf>)> {
    let mut set = SeriesSet::new();
    let mut paths = Vec::new();
    for var in std::iter::once(Variable::Siconc).chain(specs.iter().map(|s| s.variable)) {
        let path = dir.join(format!("{var}.imgr"));
        if !path.exists() {
            return Err(Failure::Data(format!("missing input file {}", path.display())));
        }
        let series = GridSeries::load(&path)?;
        if series.variable != var.id() {
            return Err(Failure::Data(format!("{} holds `{}`, expected `{var}`", path.display(), series.variable)));
        }
        set.insert(var, series);
        paths.push(path);
    }
    Ok((set, paths))
}

/// Inits whose `k` targets lie in `test` and whose lagged inputs lie in the
/// record. Inputs may precede the test period: they are observations
/// available at forecast time.
fn forecast_inits(record: MonthRange, test: MonthRange, max_lag: usize, k: usize) -> Vec<Month> {
    let first = test.start.max(record.start.offset(max_lag as i32));
    let last = test.end.min(record.end).offset(1 - k as i32);
    if last < first {
        Vec::new()
    } else {
        MonthRange::new(first, last).iter().collect()
    }
}

fn max_lag(layout: &SampleLayout) -> usize {
    layout.specs().iter().map(|s| s.lag_count).max().unwrap_or(0)
}

fn nonempty(inits: Vec<Month>, what: &str) -> Result<Vec<Month>> {
    if inits.is_empty() {
        Err(usage(format!("the {what} period holds no complete sample")))
    } else {
        Ok(inits)
    }
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(files_under(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

fn model_config(cfg: &RunConfig, layout: &SampleLayout) -> ModelConfig {
    ModelConfig { input_channels: layout.channels(), ..cfg.model.clone() }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig { seed: cfg.seed, ..cfg.train.clone() }
}

fn print_epoch(r: &icemamba::train::EpochRecord) {
    eprintln!("epoch {} lr={} train_loss={:.6} valid_loss={:.6}", r.epoch, r.lr, r.train_loss, r.valid_loss);
}

pub fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let (h, w, years) = cfg.synth;
    let set = generate_synthetic(h, w, years, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut out = Outcome { seeds: vec![cfg.seed], ..Default::default() };
    for (var, series) in &set {
        let path = cfg.out.join(format!("{var}.imgr"));
        series.save(&path)?;
        out.outputs.push(path);
    }
    out.lines.push(format!("synth: {} series, {} months on a {h}x{w} grid", set.len(), years * 12));
    Ok(out)
}

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let layout = layout(cfg)?;
    let splits = cfg.split_ranges()?;
    let (series, inputs) = load_series(cfg.data_dir()?, &cfg.variables)?;
    let k = cfg.model.lead_count;
    let train_inits = nonempty(init_months(splits.train, max_lag(&layout), k), "training")?;
    let valid_inits = nonempty(init_months(splits.valid, max_lag(&layout), k), "validation")?;
    let data = Dataset::prepare(&series, layout.clone(), k, splits.train)?;
    let mut model = build_model::<f32>(&model_config(cfg, &layout), cfg.seed)?;
    model.stats_id = Some(data.stats_id());
    let report = train_loop(&mut model, &data, &train_inits, &valid_inits, &train_config(cfg), print_epoch)?;

    std::fs::create_dir_all(&cfg.out)?;
    let ckpt = cfg.out.join("model.imck");
    model.save(&ckpt)?;
    let history = cfg.out.join("history.csv");
    report.write_history(&history)?;
    let manifest = StatsManifest::default().save(&cfg.out, &data.stats, &data.land)?;
    let mut outputs = vec![ckpt.clone(), icemamba::model::sidecar_path(&ckpt), history, cfg.out.join("stats.json")];
    outputs.extend(manifest.0.values().filter_map(|e| e.climatology_file.as_ref()).map(|f| cfg.out.join(f)));
    Ok(Outcome {
        lines: vec![format!(
            "train: {} epochs, best epoch {}, best validation loss {:.6}, {} parameters, splits {} / {}",
            report.history.len(),
            report.best_epoch,
            report.best_valid_loss,
            model.num_parameters(),
            splits.train,
            splits.valid
        )],
        inputs,
        outputs,
        seeds: vec![cfg.seed],
    })
}

/// A checkpoint and a dataset normalized with the statistics saved beside it.
struct Loaded {
    model: Model<f32>,
    layout: SampleLayout,
    series: SeriesSet,
    inputs: Vec<PathBuf>,
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Loaded> {
    let ckpt = cfg.checkpoint()?;
    let layout = layout(cfg)?;
    let model = Model::<f32>::load(&ckpt)?;
    if model.input_channels() != layout.channels() {
        return Err(usage(format!(
            "checkpoint expects {} input channels but the configured variables give {}",
            model.input_channels(),
            layout.channels()
        )));
    }
    let (series, mut inputs) = load_series(cfg.data_dir()?, &cfg.variables)?;
    inputs.push(ckpt.clone());
    Ok(Loaded { model, layout, series, inputs })
}

fn dataset_for(loaded: &Loaded, ckpt_dir: &Path, k: usize) -> Result<Dataset> {
    let (_, stats) = StatsManifest::load(ckpt_dir)?;
    let data = Dataset::with_stats(&loaded.series, loaded.layout.clone(), k, stats)?;
    if loaded.model.stats_id.as_deref() != Some(data.stats_id().as_str()) {
        return Err(Failure::Data("normalization statistics do not match the checkpoint".into()));
    }
    Ok(data)
}

fn ckpt_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let ckpt = cfg.checkpoint()?;
    Ok(ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf))
}

fn test_samples(cfg: &RunConfig, data: &Dataset, k: usize) -> Result<Vec<Sample>> {
    let splits = cfg.split_ranges()?;
    let inits = nonempty(forecast_inits(data.months(), splits.test, max_lag(&data.layout), k), "test")?;
    Ok(data.samples(&inits)?)
}

pub fn forecast(cfg: &RunConfig) -> Result<Outcome> {
    let loaded = load_checkpoint(cfg)?;
    let sets: Vec<ForecastSet> = match cfg.forecast_mode {
        ForecastMode::Direct => {
            let data = dataset_for(&loaded, &ckpt_dir(cfg)?, loaded.model.lead_count())?;
            let samples = test_samples(cfg, &data, loaded.model.lead_count())?;
            samples.par_iter().map(|s| forecast_direct(&loaded.model, s)).collect::<icemamba::Result<_>>()?
        }
        ForecastMode::Autoregressive => {
            if !loaded.layout.is_sic_only() || loaded.model.lead_count() != 1 {
                return Err(usage("autoregressive forecasts need a one-lead checkpoint trained on SIC alone"));
            }
            let horizon = cfg.model.lead_count;
            let data = dataset_for(&loaded, &ckpt_dir(cfg)?, horizon)?;
            let samples = test_samples(cfg, &data, horizon)?;
            samples
                .par_iter()
                .map(|s| forecast_autoregressive(&loaded.model, &s.input, &data.land, s.init, horizon))
                .collect::<icemamba::Result<_>>()?
        }
    };
    let land = loaded.series[&Variable::Siconc].land_mask.clone();
    let dir = cfg.out.join("forecasts");
    write_forecasts(&dir, "icemamba", &sets, &land)?;
    Ok(Outcome {
        lines: vec![format!("forecast: {} initializations, {} leads each, written to {}", sets.len(), sets[0].lead_count(), dir.display())],
        inputs: loaded.inputs,
        outputs: files_under(&dir)?,
        seeds: vec![loaded.model.seed],
    })
}

fn load_sic(cfg: &RunConfig) -> Result<(GridSeries, Vec<PathBuf>)> {
    let (mut set, paths) = load_series(cfg.data_dir()?, &[])?;
    let raw = set.remove(&Variable::Siconc).expect("siconc is always loaded");
    Ok((clean_sic(&raw, None)?, paths))
}

pub fn baseline(cfg: &RunConfig) -> Result<Outcome> {
    let (sic, inputs) = load_sic(cfg)?;
    let splits = cfg.split_ranges()?;
    let k = cfg.model.lead_count;
    let record = MonthRange::new(sic.months[0], *sic.months.last().expect("validated series are nonempty"));
    let inits = nonempty(forecast_inits(record, splits.test, icemamba::data::variables::SIC_LAGS, k), "test")?;
    let mut out = Outcome { inputs, ..Default::default() };
    for b in Baseline::ALL {
        let sets = inits.par_iter().map(|&m| b.forecast(&sic, m, k)).collect::<icemamba::Result<Vec<_>>>()?;
        let dir = cfg.out.join("baselines").join(b.id());
        write_forecasts(&dir, b.id(), &sets, &sic.land_mask)?;
        out.outputs.extend(files_under(&dir)?);
    }
    out.lines.push(format!("baseline: {} initializations x {} leads for {} reference forecasts", inits.len(), k, Baseline::ALL.len()));
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn evaluate(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.forecasts_dir()?;
    let (obs, mut inputs) = load_sic(cfg)?;
    let sets = read_forecasts(&dir)?;
    if sets.is_empty() {
        return Err(Failure::Data(format!("no forecasts in {}", dir.display())));
    }
    inputs.extend(files_under(&dir)?);
    let clim = if cfg.acc { Some(Climatology::fit(&obs, cfg.split_ranges()?.train)?) } else { None };
    let mut table = MetricTable::new("non_land", CELL_AREA_KM2);
    table.threshold = cfg.threshold;
    for f in &sets {
        table.evaluate(f, &obs, None, clim.as_ref())?;
    }
    std::fs::create_dir_all(&cfg.out)?;
    let paths = [cfg.out.join("metrics.csv"), cfg.out.join("heatmap.csv"), cfg.out.join("seasonal.csv")];
    table.write_entries(&paths[0])?;
    table.write_heatmaps(&paths[1], table.max_lead())?;
    table.write_seasonal(&paths[2])?;
    let lines = Metric::ALL
        .iter()
        .filter(|m| **m != Metric::Acc || cfg.acc)
        .map(|&m| format!("evaluate: mean {} = {} {}", m.id(), fmt_opt(table.mean(m)), m.units()))
        .collect();
    Ok(Outcome { lines, inputs, outputs: paths.to_vec(), seeds: Vec::new() })
}

/// September targets scored from initializations on June 1 to September 1.
const BENCHMARK_TARGET_MONTH: u32 = 9;
const BENCHMARK_FIRST_INIT: u32 = 6;

pub fn benchmark(cfg: &RunConfig) -> Result<Outcome> {
    let layout = layout(cfg)?;
    let k = cfg.model.lead_count;
    let longest = (BENCHMARK_TARGET_MONTH - BENCHMARK_FIRST_INIT + 1) as usize;
    if k < longest {
        return Err(usage(format!("benchmark needs at least {longest} leads to reach September from June, got {k}")));
    }
    let (series, inputs) = load_series(cfg.data_dir()?, &cfg.variables)?;
    std::fs::create_dir_all(cfg.out.join("models"))?;
    let mut out = Outcome { inputs, seeds: vec![cfg.seed], ..Default::default() };
    let path = cfg.out.join("benchmark.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Data(e.to_string()))?;
    w.write_record(["target_year", "forecaster", "init_month", "lead", "rmse", "acc", "iiee", "units"])
        .map_err(|e| Failure::Data(e.to_string()))?;
    let (first, last) = cfg.benchmark_years;
    for year in first..=last {
        let splits = make_splits(SplitMode::Rolling, Some(year)).map_err(|e| usage(e.to_string()))?;
        out.lines.push(format!("benchmark {year}: train {}, valid {}, test {}", splits.train, splits.valid, splits.test));
        let train_inits = nonempty(init_months(splits.train, max_lag(&layout), k), "training")?;
        let valid_inits = nonempty(init_months(splits.valid, max_lag(&layout), k), "validation")?;
        let data = Dataset::prepare(&series, layout.clone(), k, splits.train)?;
        let mut model = build_model::<f32>(&model_config(cfg, &layout), cfg.seed)?;
        model.stats_id = Some(data.stats_id());
        let report = train_loop(&mut model, &data, &train_inits, &valid_inits, &train_config(cfg), print_epoch)?;
        let ckpt = cfg.out.join("models").join(format!("{year}.imck"));
        model.save(&ckpt)?;
        let history = cfg.out.join("models").join(format!("{year}_history.csv"));
        report.write_history(&history)?;
        out.outputs.extend([ckpt.clone(), icemamba::model::sidecar_path(&ckpt), history]);

        let target = Month::new(year, BENCHMARK_TARGET_MONTH);
        let obs = data.sic.require(target)?;
        let clim = Climatology::fit(&data.sic, splits.train)?;
        let c = clim.for_month(target);
        let training_sic = data.sic.slice_months(splits.train.start, splits.train.end);
        let vmask = variability_mask(&training_sic, BENCHMARK_TARGET_MONTH, cfg.variability_threshold)?;
        if !vmask.iter().any(|&v| v) {
            return Err(Failure::Data(format!(
                "no cell of September SIC varies by more than {} over {}",
                cfg.variability_threshold, splits.train
            )));
        }
        let sea = data.land.mapv(|l| !l);
        let mut scores = Vec::new();
        for m in BENCHMARK_FIRST_INIT..=BENCHMARK_TARGET_MONTH {
            let init = Month::new(year, m);
            let lead = (BENCHMARK_TARGET_MONTH - m + 1) as usize;
            let input = assemble_sample(init, &layout, &data.inputs)?;
            let sample = Sample { init, input, target: None, land: data.land.clone() };
            let mut forecasts = vec![("icemamba", forecast_direct(&model, &sample)?)];
            for b in Baseline::ALL {
                forecasts.push((b.id(), b.forecast(&data.sic, init, lead)?));
            }
            for (name, f) in forecasts {
                let p = f.map(lead);
                let rmse = masked_error(p, obs, &vmask, ErrorKind::Rmse)?;
                let (pa, oa) = (&p - &c, &obs - &c);
                let a = acc(pa.view(), oa.view(), &vmask)?;
                let e = iiee(p, obs, &sea, cfg.threshold, CELL_AREA_KM2)?;
                scores.push((name, rmse));
                w.write_record([
                    year.to_string(),
                    name.to_string(),
                    init.to_string(),
                    lead.to_string(),
                    format!("{rmse}"),
                    format!("{a}"),
                    format!("{}", e.iiee),
                    "percent,dimensionless,km2".to_string(),
                ])
                .map_err(|e| Failure::Data(e.to_string()))?;
            }
        }
        let mean = |n: &str| {
            let v: Vec<f64> = scores.iter().filter(|s| s.0 == n).map(|s| s.1).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        out.lines.push(format!(
            "benchmark {year}: September RMSE on the variability mask, mean over June-September inits: icemamba {:.4}, {} {:.4}",
            mean("icemamba"),
            Baseline::AnomalyPersistence.id(),
            mean(Baseline::AnomalyPersistence.id())
        ));
    }
    w.flush()?;
    out.outputs.push(path);
    Ok(out)
}

pub fn explain(cfg: &RunConfig) -> Result<Outcome> {
    let loaded = load_checkpoint(cfg)?;
    let k = loaded.model.lead_count();
    let data = dataset_for(&loaded, &ckpt_dir(cfg)?, k)?;
    let samples = test_samples(cfg, &data, k)?;
    let seeds = permutation_seeds(cfg.seed, cfg.permutation_seeds);
    let table = importance_table(&loaded.model, &loaded.layout, &samples, None, &seeds)?;
    let (by_lead, by_month) = importance_heatmaps(&table, &loaded.layout);
    std::fs::create_dir_all(&cfg.out)?;
    let paths = [cfg.out.join("importance.csv"), cfg.out.join("importance_by_lead.csv"), cfg.out.join("importance_by_month.csv")];
    table.write_csv(&paths[0])?;
    by_lead.write_csv(&paths[1])?;
    by_month.write_csv(&paths[2])?;
    let mut out = Outcome { inputs: loaded.inputs.clone(), outputs: paths.to_vec(), seeds: seeds.clone(), ..Default::default() };
    for v in loaded.layout.specs().iter().map(|s| s.variable) {
        if let Some(m) = table.variable_mean(v) {
            out.lines.push(format!("explain: {v} mean delta MAE {m:.6} percent"));
        }
    }

    if let Some(var) = cfg.detrend {
        let spec = ExperimentSpec {
            layout: loaded.layout.clone(),
            lead_count: cfg.model.lead_count,
            splits: cfg.split_ranges()?,
            model: model_config(cfg, &loaded.layout),
            model_seed: cfg.seed,
            train: train_config(cfg),
        };
        let x = detrended_retrain_experiment(&loaded.series, &spec, var, None, &seeds)?;
        let path = cfg.out.join("detrend.csv");
        x.write_metrics_csv(&path)?;
        for arm in [&x.raw, &x.detrended] {
            let p = cfg.out.join(format!("importance_{}.csv", arm.id));
            arm.importance.write_csv(&p)?;
            out.outputs.push(p);
        }
        out.outputs.push(path);
        out.lines.push(format!("explain: detrending {var} changes its importance by a factor of {}", fmt_opt(x.importance_drop().map(|d| 1.0 - d))));
    }
    Ok(out)
}
