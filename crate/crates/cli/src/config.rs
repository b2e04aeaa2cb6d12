//! Run configuration: an INI-style file of `[section]` headers and
//! `key = value` lines, with command-line flags applied on top.
//!
//! Precedence, lowest first: built-in defaults, the configuration file, flags.
//! Relative paths in the file resolve against the file's directory; relative
//! paths given as flags resolve against the working directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use icemamba::data::splits::{make_splits, SplitMode, Splits};
use icemamba::data::{Variable, VariableSpec};
use icemamba::train::TrainConfig;
use icemamba::ModelConfig;
use ini::Ini;

/// A configuration problem; reported as a usage error.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("unknown config section `[{0}]`")]
    UnknownSection(String),
    #[error("bad value for `{key}`: {detail}")]
    Value { key: String, detail: String },
    #[error("path for `{key}` does not exist: {path}")]
    MissingPath { key: String, path: String },
    #[error("`{0}` must be set for this command")]
    Required(&'static str),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Recognised keys per section.
const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed", "out"]),
    ("data", &["dir", "variables"]),
    ("splits", &["mode", "target_year", "train", "valid", "test"]),
    ("model", &["preset", "embed_channels", "depths", "state_size", "patch_size", "leads"]),
    ("train", &["learning_rate", "decay_factor", "decay_every", "patience", "max_epochs"]),
    ("forecast", &["mode", "checkpoint"]),
    ("metrics", &["threshold", "acc", "variability_threshold", "forecasts"]),
    ("explain", &["seeds", "detrend"]),
    ("benchmark", &["years"]),
    ("synth", &["height", "width", "years"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastMode {
    Direct,
    Autoregressive,
}

impl FromStr for ForecastMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "direct" => Ok(ForecastMode::Direct),
            "autoregressive" => Ok(ForecastMode::Autoregressive),
            _ => Err(format!("`{s}` (expected direct or autoregressive)")),
        }
    }
}

impl ForecastMode {
    fn as_str(self) -> &'static str {
        match self {
            ForecastMode::Direct => "direct",
            ForecastMode::Autoregressive => "autoregressive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitChoice {
    Fixed,
    Rolling(Option<i32>),
    Custom { train: (i32, i32), valid: (i32, i32), test: (i32, i32) },
}

/// Values given on the command line; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<ForecastMode>,
    pub target_year: Option<i32>,
    pub leads: Option<usize>,
    pub out: Option<PathBuf>,
    pub detrend: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data_dir: Option<PathBuf>,
    /// Non-SIC inputs in channel order.
    pub variables: Vec<VariableSpec>,
    pub splits: SplitChoice,
    /// `input_channels` is filled in from the layout when a model is built.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub forecast_mode: ForecastMode,
    pub checkpoint: Option<PathBuf>,
    pub threshold: f64,
    pub acc: bool,
    pub variability_threshold: f64,
    pub forecasts: Option<PathBuf>,
    pub permutation_seeds: usize,
    pub detrend: Option<Variable>,
    pub benchmark_years: (i32, i32),
    pub synth: (usize, usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data_dir: None,
            variables: Vec::new(),
            splits: SplitChoice::Fixed,
            model: ModelConfig::mini(1, 6),
            train: TrainConfig::default(),
            forecast_mode: ForecastMode::Direct,
            checkpoint: None,
            threshold: icemamba::metrics::ICE_EDGE_THRESHOLD,
            acc: true,
            variability_threshold: icemamba::metrics::VARIABILITY_THRESHOLD,
            forecasts: None,
            permutation_seeds: icemamba::explain::DEFAULT_PERMUTATION_SEEDS,
            detrend: None,
            benchmark_years: (2001, 2020),
            synth: (64, 64, 30),
        }
    }
}

fn value<V: FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e: V::Err| ConfigError::Value { key: key.into(), detail: e.to_string() })
}

fn year_range(key: &str, raw: &str) -> Result<(i32, i32)> {
    let bad = || ConfigError::Value { key: key.into(), detail: format!("`{raw}` (expected FIRST-LAST years)") };
    let (a, b) = raw.trim().split_once('-').ok_or_else(bad)?;
    let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}

/// `"syn_causal:3, t2m:1"`; a missing lag count means three lags.
fn variable_list(key: &str, raw: &str) -> Result<Vec<VariableSpec>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (name, lags) = item.split_once(':').unwrap_or((item, "3"));
            let var: Variable = value(key, name)?;
            if var == Variable::Siconc {
                return Err(ConfigError::Value { key: key.into(), detail: "siconc is always included".into() });
            }
            VariableSpec::default_for(var)
                .with_lags(value(key, lags)?)
                .map_err(|e| ConfigError::Value { key: key.into(), detail: e.to_string() })
        })
        .collect()
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = PathBuf::from(raw.trim());
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults when `None`) and applies `flags`.
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.apply_text(&text, base)?;
        }
        cfg.apply_flags(flags)?;
        Ok(cfg)
    }

    /// Applies a configuration text whose relative paths resolve against
    /// `base`.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(ConfigError::UnknownKey(k.to_string()));
                }
                continue;
            };
            let keys = SCHEMA
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, k)| *k)
                .ok_or_else(|| ConfigError::UnknownSection(section.to_string()))?;
            // The preset is applied first so explicit model keys refine it.
            if let Some(p) = props.get("preset").filter(|_| section == "model") {
                self.model = match p.trim() {
                    "mini" => ModelConfig::mini(1, self.model.lead_count),
                    "full" => ModelConfig::full(1, self.model.lead_count),
                    other => {
                        return Err(ConfigError::Value { key: "model.preset".into(), detail: format!("`{other}` (expected mini or full)") })
                    }
                };
            }
            for (k, raw) in props.iter() {
                let key = format!("{section}.{k}");
                if !keys.contains(&k) {
                    return Err(ConfigError::UnknownKey(key));
                }
                self.set(&key, raw, base)?;
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, raw: &str, base: &Path) -> Result<()> {
        match key {
            "run.seed" => self.seed = value(key, raw)?,
            "run.out" => self.out = resolve(base, raw),
            "data.dir" => self.data_dir = Some(resolve(base, raw)),
            "data.variables" => self.variables = variable_list(key, raw)?,
            "splits.mode" => {
                self.splits = match raw.trim() {
                    "fixed" => SplitChoice::Fixed,
                    "rolling" => SplitChoice::Rolling(match self.splits {
                        SplitChoice::Rolling(y) => y,
                        _ => None,
                    }),
                    "custom" => SplitChoice::Custom { train: (0, 0), valid: (0, 0), test: (0, 0) },
                    other => {
                        return Err(ConfigError::Value { key: key.into(), detail: format!("`{other}` (expected fixed, rolling or custom)") })
                    }
                }
            }
            "splits.target_year" => {
                let y = value(key, raw)?;
                if let SplitChoice::Rolling(slot) = &mut self.splits {
                    *slot = Some(y);
                } else {
                    self.splits = SplitChoice::Rolling(Some(y));
                }
            }
            "splits.train" | "splits.valid" | "splits.test" => {
                let r = year_range(key, raw)?;
                if !matches!(self.splits, SplitChoice::Custom { .. }) {
                    self.splits = SplitChoice::Custom { train: (0, 0), valid: (0, 0), test: (0, 0) };
                }
                if let SplitChoice::Custom { train, valid, test } = &mut self.splits {
                    *match key {
                        "splits.train" => train,
                        "splits.valid" => valid,
                        _ => test,
                    } = r;
                }
            }
            "model.preset" => {}
            "model.embed_channels" => self.model.embed_channels = value(key, raw)?,
            "model.depths" => {
                self.model.depths = raw.split(',').map(|d| value(key, d)).collect::<Result<_>>()?;
            }
            "model.state_size" => self.model.state_size = value(key, raw)?,
            "model.patch_size" => self.model.patch_size = value(key, raw)?,
            "model.leads" => self.model.lead_count = value(key, raw)?,
            "train.learning_rate" => self.train.learning_rate = value(key, raw)?,
            "train.decay_factor" => self.train.decay_factor = value(key, raw)?,
            "train.decay_every" => self.train.decay_every = value(key, raw)?,
            "train.patience" => self.train.patience = value(key, raw)?,
            "train.max_epochs" => self.train.max_epochs = value(key, raw)?,
            "forecast.mode" => self.forecast_mode = value(key, raw)?,
            "forecast.checkpoint" => self.checkpoint = Some(resolve(base, raw)),
            "metrics.threshold" => self.threshold = value(key, raw)?,
            "metrics.acc" => self.acc = value(key, raw)?,
            "metrics.variability_threshold" => self.variability_threshold = value(key, raw)?,
            "metrics.forecasts" => self.forecasts = Some(resolve(base, raw)),
            "explain.seeds" => self.permutation_seeds = value(key, raw)?,
            "explain.detrend" => self.detrend = Some(value(key, raw)?),
            "benchmark.years" => self.benchmark_years = year_range(key, raw)?,
            "synth.height" => self.synth.0 = value(key, raw)?,
            "synth.width" => self.synth.1 = value(key, raw)?,
            "synth.years" => self.synth.2 = value(key, raw)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn apply_flags(&mut self, f: &Overrides) -> Result<()> {
        if let Some(s) = f.seed {
            self.seed = s;
        }
        if let Some(m) = f.mode {
            self.forecast_mode = m;
        }
        if let Some(y) = f.target_year {
            self.splits = SplitChoice::Rolling(Some(y));
            self.benchmark_years = (y, y);
        }
        if let Some(k) = f.leads {
            self.model.lead_count = k;
        }
        if let Some(o) = &f.out {
            self.out = o.clone();
        }
        if let Some(v) = &f.detrend {
            self.detrend = Some(value("--detrend", v)?);
        }
        Ok(())
    }

    /// Range and consistency checks that do not depend on the command.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Err(ConfigError::Value { key: key.into(), detail });
        if self.model.lead_count == 0 {
            return bad("model.leads", "must be at least 1".into());
        }
        let probe = ModelConfig { input_channels: 1, ..self.model.clone() };
        if let Err(e) = probe.validate() {
            return bad("model", e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return bad("train", e.to_string());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("metrics.threshold", format!("{} is outside (0, 1)", self.threshold));
        }
        if !(self.variability_threshold >= 0.0) {
            return bad("metrics.variability_threshold", format!("{} is negative", self.variability_threshold));
        }
        if self.permutation_seeds == 0 {
            return bad("explain.seeds", "must be at least 1".into());
        }
        let min_years = icemamba::data::synthetic::MIN_SYNTHETIC_YEARS;
        if self.synth.0 < 4 || self.synth.1 < 4 || self.synth.2 < min_years {
            return bad("synth", format!("needs a grid of at least 4x4 and at least {min_years} years"));
        }
        if let SplitChoice::Custom { .. } = self.splits {
            self.split_ranges()?;
        }
        Ok(())
    }

    /// Fails unless `path` exists.
    pub fn require_path(key: &str, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(ConfigError::MissingPath { key: key.into(), path: path.display().to_string() })
        }
    }

    pub fn data_dir(&self) -> Result<&Path> {
        let dir = self.data_dir.as_deref().ok_or(ConfigError::Required("data.dir"))?;
        Self::require_path("data.dir", dir)?;
        Ok(dir)
    }

    pub fn checkpoint(&self) -> Result<PathBuf> {
        let path = self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.imck"));
        Self::require_path("forecast.checkpoint", &path)?;
        Ok(path)
    }

    pub fn forecasts_dir(&self) -> Result<PathBuf> {
        let path = self.forecasts.clone().unwrap_or_else(|| self.out.join("forecasts"));
        Self::require_path("metrics.forecasts", &path)?;
        Ok(path)
    }

    pub fn split_ranges(&self) -> Result<Splits> {
        let r = match self.splits {
            SplitChoice::Fixed => make_splits(SplitMode::Fixed, None),
            SplitChoice::Rolling(y) => make_splits(SplitMode::Rolling, y),
            SplitChoice::Custom { train, valid, test } => Splits::custom(train, valid, test),
        };
        r.map_err(|e| ConfigError::Value { key: "splits".into(), detail: e.to_string() })
    }

    /// Canonical text of every effective setting; hashed into the manifest.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let _ = writeln!(s, "run.seed={}", self.seed);
        let _ = writeln!(s, "run.out={}", self.out.display());
        let _ = writeln!(s, "data.dir={}", opt(&self.data_dir));
        let vars: Vec<String> = self.variables.iter().map(|v| format!("{}:{}", v.variable, v.lag_count)).collect();
        let _ = writeln!(s, "data.variables={}", vars.join(","));
        let _ = writeln!(s, "splits={:?}", self.splits);
        for line in self.model.to_record().lines().filter(|l| !l.starts_with("input_channels")) {
            let _ = writeln!(s, "model.{line}");
        }
        let t = &self.train;
        let _ = writeln!(
            s,
            "train.learning_rate={}\ntrain.decay_factor={}\ntrain.decay_every={}\ntrain.patience={}\ntrain.max_epochs={}",
            t.learning_rate, t.decay_factor, t.decay_every, t.patience, t.max_epochs
        );
        let _ = writeln!(s, "forecast.mode={}", self.forecast_mode.as_str());
        let _ = writeln!(s, "forecast.checkpoint={}", opt(&self.checkpoint));
        let _ = writeln!(s, "metrics.threshold={}", self.threshold);
        let _ = writeln!(s, "metrics.acc={}", self.acc);
        let _ = writeln!(s, "metrics.variability_threshold={}", self.variability_threshold);
        let _ = writeln!(s, "metrics.forecasts={}", opt(&self.forecasts));
        let _ = writeln!(s, "explain.seeds={}", self.permutation_seeds);
        let _ = writeln!(s, "explain.detrend={}", self.detrend.map_or("-".to_string(), |v| v.to_string()));
        let _ = writeln!(s, "benchmark.years={}-{}", self.benchmark_years.0, self.benchmark_years.1);
        let _ = writeln!(s, "synth={}x{}x{}", self.synth.0, self.synth.1, self.synth.2);
        s
    }
}
