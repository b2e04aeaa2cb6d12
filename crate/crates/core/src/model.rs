//! Encoder-decoder forecaster assembled from residual state-space blocks.
//!
//! Encoder: patch embedding, then one stage of blocks per entry of `depths`,
//! with a patch merge between consecutive stages. Decoder: for every stage
//! but the deepest, a patch expand, an additive skip from the encoder stage at
//! the same scale and a stage of blocks. A final expand restores the input
//! resolution and a `tanh` head emits one map per lead time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use icemamba_tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Precision, Real, Tensor, Var};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::blocks::{OutputHead, PatchEmbed, PatchRescale, Rescale, Ressb};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::layout;

/// Grid of the full-resolution configuration.
pub const FULL_GRID: (usize, usize) = (448, 304);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub embed_channels: usize,
    /// Residual blocks per encoder stage, shallowest first.
    pub depths: Vec<usize>,
    pub state_size: usize,
    pub patch_size: usize,
    pub lead_count: usize,
    pub precision: Precision,
}

impl ModelConfig {
    /// Full-grid preset.
    pub fn full(input_channels: usize, lead_count: usize) -> Self {
        ModelConfig {
            input_channels,
            embed_channels: 48,
            depths: vec![2, 2, 2],
            state_size: 16,
            patch_size: 4,
            lead_count,
            precision: Precision::F32,
        }
    }

    /// Small preset for desk-scale experiments.
    pub fn mini(input_channels: usize, lead_count: usize) -> Self {
        ModelConfig { embed_channels: 16, depths: vec![1, 1], ..Self::full(input_channels, lead_count) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("model config", detail));
        if self.input_channels == 0 || self.embed_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.depths.is_empty() || self.depths.iter().any(|&d| d == 0) {
            return bad(format!("depths must be nonempty and positive, got {:?}", self.depths));
        }
        if self.state_size == 0 || self.patch_size == 0 || self.lead_count == 0 {
            return bad("state size, patch size and lead count must be at least 1".into());
        }
        Ok(())
    }

    /// Spatial extents are padded to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        self.patch_size << (self.depths.len() - 1)
    }

    pub fn padded_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.pad_multiple();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.embed_channels << stage
    }

    /// `key=value` lines.
    pub fn to_record(&self) -> String {
        let depths: Vec<String> = self.depths.iter().map(|d| d.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "input_channels={}", self.input_channels);
        let _ = writeln!(s, "embed_channels={}", self.embed_channels);
        let _ = writeln!(s, "depths={}", depths.join(","));
        let _ = writeln!(s, "state_size={}", self.state_size);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "lead_count={}", self.lead_count);
        let _ = writeln!(s, "precision={}", self.precision.as_str());
        s
    }
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_record(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::invalid("record line", format!("expected key=value, got `{l}`")))
        })
        .collect()
}

fn parse_field<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::invalid("record value", format!("{key}={value}")))
}

/// Metadata stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRecord {
    pub config: ModelConfig,
    pub seed: u64,
    /// Identifier of the normalization statistics the model was trained with.
    pub stats_id: Option<String>,
}

impl ModelRecord {
    pub fn to_text(&self) -> String {
        let mut s = self.config.to_record();
        let _ = writeln!(s, "seed={}", self.seed);
        if let Some(id) = &self.stats_id {
            let _ = writeln!(s, "stats_id={id}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::full(1, 1);
        let mut seen = std::collections::BTreeSet::new();
        let mut seed = 0;
        let mut stats_id = None;
        for (k, v) in parse_record(text)? {
            match k.as_str() {
                "input_channels" => cfg.input_channels = parse_field(&k, &v)?,
                "embed_channels" => cfg.embed_channels = parse_field(&k, &v)?,
                "depths" => {
                    cfg.depths = v.split(',').map(|d| parse_field(&k, d.trim())).collect::<Result<_>>()?;
                }
                "state_size" => cfg.state_size = parse_field(&k, &v)?,
                "patch_size" => cfg.patch_size = parse_field(&k, &v)?,
                "lead_count" => cfg.lead_count = parse_field(&k, &v)?,
                "precision" => cfg.precision = v.parse().map_err(|e: String| Error::invalid("precision", e))?,
                "seed" => seed = parse_field(&k, &v)?,
                "stats_id" => stats_id = Some(v.clone()),
                _ => return Err(Error::invalid("record key", k)),
            }
            seen.insert(k);
        }
        for required in ["input_channels", "embed_channels", "depths", "state_size", "patch_size", "lead_count"] {
            if !seen.contains(required) {
                return Err(Error::invalid("model record", format!("missing key {required}")));
            }
        }
        cfg.validate()?;
        Ok(ModelRecord { config: cfg, seed, stats_id })
    }
}

/// Block layout derived from a [`ModelConfig`].
#[derive(Debug, Clone)]
struct Architecture {
    embed: PatchEmbed,
    encoder: Vec<Vec<Ressb>>,
    merges: Vec<PatchRescale>,
    expands: Vec<PatchRescale>,
    decoder: Vec<Vec<Ressb>>,
    final_expand: PatchRescale,
    head: OutputHead,
}

impl Architecture {
    fn new(cfg: &ModelConfig) -> Self {
        let stages = cfg.depths.len();
        let n = cfg.state_size;
        let stage_blocks = |tag: &str, s: usize| -> Vec<Ressb> {
            (0..cfg.depths[s]).map(|i| Ressb::new(format!("{tag}{s}.{i}"), cfg.stage_channels(s), n)).collect()
        };
        Architecture {
            embed: PatchEmbed {
                prefix: "embed".into(),
                c_in: cfg.input_channels,
                c_out: cfg.embed_channels,
                patch: cfg.patch_size,
            },
            encoder: (0..stages).map(|s| stage_blocks("enc", s)).collect(),
            merges: (0..stages - 1)
                .map(|s| PatchRescale { prefix: format!("merge{s}"), channels: cfg.stage_channels(s), kind: Rescale::Merge })
                .collect(),
            expands: (0..stages - 1)
                .map(|s| PatchRescale {
                    prefix: format!("expand{s}"),
                    channels: cfg.stage_channels(s + 1),
                    kind: Rescale::Expand,
                })
                .collect(),
            decoder: (0..stages - 1).map(|s| stage_blocks("dec", s)).collect(),
            final_expand: PatchRescale {
                prefix: "final_expand".into(),
                channels: cfg.embed_channels,
                kind: Rescale::FinalExpand(cfg.patch_size),
            },
            head: OutputHead { prefix: "head".into(), channels: cfg.embed_channels, leads: cfg.lead_count },
        }
    }

    /// Initialization order fixes the random stream, so it is part of the
    /// model definition.
    fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Initializer) {
        self.embed.init(store, init);
        for (s, blocks) in self.encoder.iter().enumerate() {
            blocks.iter().for_each(|b| b.init(store, init));
            if let Some(m) = self.merges.get(s) {
                m.init(store, init);
            }
        }
        for s in (0..self.decoder.len()).rev() {
            self.expands[s].init(store, init);
            self.decoder[s].iter().for_each(|b| b.init(store, init));
        }
        self.final_expand.init(store, init);
        self.head.init(store, init);
    }
}

/// Anything that maps an assembled input stack to raw lead maps in (-1, 1).
///
/// `Sync` so independent samples can be forecast on worker threads.
pub trait Forecaster: Sync {
    fn input_channels(&self) -> usize;
    fn lead_count(&self) -> usize;
    /// `[C_in, H, W]` to `[k, H, W]`, before clamping and land masking.
    fn predict(&self, input: &Array3<f32>) -> Result<Array3<f32>>;
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub seed: u64,
    pub stats_id: Option<String>,
    arch: Architecture,
}

/// Builds a model with freshly initialized parameters.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let arch = Architecture::new(cfg);
    let mut params = ParamStore::new();
    arch.init(&mut params, &mut Initializer::new(seed));
    Ok(Model { config: cfg.clone(), params, seed, stats_id: None, arch })
}

impl<T: Real> Model<T> {
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records the network on `g` for an input `[C_in, H, W]` and returns the
    /// head output `[k, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let (c, h, w) = layout::chw(g.shape(input), "model input")?;
        if c != self.config.input_channels {
            return Err(Error::shape(
                "model input",
                format!("expected {} channels, got {c}", self.config.input_channels),
            ));
        }
        let (ph, pw) = self.config.padded_extent(h, w);
        let mut x = if (ph, pw) == (h, w) { input } else { g.gather(input, layout::pad_map(c, h, w, ph, pw), &[c, ph, pw])? };
        let a = &self.arch;
        let p = &self.params;
        x = a.embed.forward(g, p, x)?;
        let mut skips = Vec::new();
        for (s, blocks) in a.encoder.iter().enumerate() {
            for b in blocks {
                x = b.forward(g, p, x)?;
            }
            if let Some(m) = a.merges.get(s) {
                skips.push(x);
                x = m.forward(g, p, x)?;
            }
        }
        for s in (0..a.decoder.len()).rev() {
            x = a.expands[s].forward(g, p, x)?;
            x = g.add(x, skips[s])?;
            for b in &a.decoder[s] {
                x = b.forward(g, p, x)?;
            }
        }
        x = a.final_expand.forward(g, p, x)?;
        let y = a.head.forward(g, p, x)?;
        let k = self.config.lead_count;
        if (ph, pw) == (h, w) {
            Ok(y)
        } else {
            Ok(g.gather(y, layout::crop_map(k, ph, pw, h, w), &[k, h, w])?)
        }
    }

    pub fn record(&self) -> ModelRecord {
        ModelRecord { config: self.config.clone(), seed: self.seed, stats_id: self.stats_id.clone() }
    }

    /// Writes the checkpoint to `path` and the config record beside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(&self.params, path)?;
        std::fs::write(sidecar_path(path), self.record().to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let record = ModelRecord::from_text(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut model = build_model::<T>(&record.config, record.seed)?;
        let stored: ParamStore<T> = load_checkpoint(path)?;
        model.params.load_values(&stored)?;
        model.params.set_step(stored.step());
        model.stats_id = record.stats_id;
        Ok(model)
    }

    /// Sets every parameter to zero.
    pub fn zero_parameters(&mut self) {
        for (_, t) in self.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// `model.imck` → `model.imck.cfg`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

impl<T: Real> Forecaster for Model<T> {
    fn input_channels(&self) -> usize {
        self.config.input_channels
    }

    fn lead_count(&self) -> usize {
        self.config.lead_count
    }

    fn predict(&self, input: &Array3<f32>) -> Result<Array3<f32>> {
        let (c, h, w) = input.dim();
        let data = input.iter().map(|&v| T::from_f64(v as f64)).collect();
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::new(&[c, h, w], data)?);
        let y = self.forward(&mut g, x)?;
        let out: Vec<f32> = g.value(y).iter().map(|&v| Real::to_f64(v) as f32).collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "model output", location: format!("flat index {i}") });
        }
        Ok(Array3::from_shape_vec((self.config.lead_count, h, w), out).expect("head extent"))
    }
}
