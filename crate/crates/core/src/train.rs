//! Masked-MAE training with Adam, a step-decay learning rate and early
//! stopping on validation loss.

use std::collections::BTreeSet;
use std::path::Path;

use icemamba_tensor::{Graph, Real, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calendar::Month;
use crate::data::sample::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Model;

/// Smallest validation-loss decrease that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, decay_factor: 0.5, decay_every: 10, patience: 10, max_epochs: 200, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate", format!("{} must be positive", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("decay factor", format!("{} is outside (0, 1]", self.decay_factor)));
        }
        if self.decay_every == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("train config", "decay_every, patience and max_epochs must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// `0.001 · 0.5^⌊epoch / 10⌋` for zero-based `epoch`.
pub fn lr_schedule(epoch: usize) -> f64 {
    TrainConfig::default().lr_at(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once more than `patience` consecutive epochs fail to improve on the
/// best validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    /// One-based epoch of the best loss.
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best - IMPROVEMENT_EPS {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
    /// Every month whose data was read, inputs and targets alike.
    pub accessed: BTreeSet<Month>,
}

impl TrainReport {
    /// `history.csv`: epoch, lr, train loss, valid loss.
    pub fn write_history(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "lr", "train_loss", "valid_loss"])?;
        for r in &self.history {
            w.write_record([r.epoch.to_string(), format!("{}", r.lr), format!("{}", r.train_loss), format!("{}", r.valid_loss)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn land_weights(land: &Array2<bool>, leads: usize) -> Result<(Vec<f64>, usize)> {
    let sea = land.iter().filter(|&&l| !l).count();
    if sea == 0 {
        return Err(Error::invalid("mask", "every cell is land"));
    }
    let one: Vec<f64> = land.iter().map(|&l| if l { 0.0 } else { 1.0 }).collect();
    Ok((one.repeat(leads), sea * leads))
}

/// Mean absolute error over non-land cells of every lead, recorded on `g`.
pub fn masked_mae_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Array3<f32>, land: &Array2<bool>) -> Result<Var> {
    let (k, h, w) = target.dim();
    if g.shape(pred) != [k, h, w] {
        return Err(Error::shape("masked_mae_loss", format!("prediction {:?}, target {:?}", g.shape(pred), target.dim())));
    }
    let (weights, count) = land_weights(land, k)?;
    let t = g.constant(&[k, h, w], target.iter().map(|&v| T::from_f64(v as f64)).collect())?;
    let m = g.constant(&[k, h, w], weights.into_iter().map(T::from_f64).collect())?;
    let diff = g.sub(pred, t)?;
    let abs = g.abs(diff);
    let masked = g.mul(abs, m)?;
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / count as f64))
}

/// The same loss evaluated without recording gradients.
pub fn masked_mae_value(pred: &Array3<f32>, target: &Array3<f32>, land: &Array2<bool>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("masked_mae_value", format!("prediction {:?}, target {:?}", pred.dim(), target.dim())));
    }
    let (weights, count) = land_weights(land, pred.dim().0)?;
    let sum: f64 = pred.iter().zip(target).zip(&weights).map(|((&p, &t), &m)| m * (p as f64 - t as f64).abs()).sum();
    Ok(sum / count as f64)
}

fn target_of(sample: &Sample) -> Result<&Array3<f32>> {
    sample
        .target
        .as_ref()
        .ok_or_else(|| Error::MissingMonth { variable: "siconc".into(), month: sample.init })
}

fn record_access(accessed: &mut BTreeSet<Month>, data: &Dataset, init: Month) {
    let first = data.layout.earliest_input(init);
    let last = init.offset(data.lead_count as i32 - 1);
    let mut m = first;
    while m <= last {
        accessed.insert(m);
        m = m.offset(1);
    }
}

fn non_finite(epoch: usize, init: Month) -> Error {
    Error::NonFinite { what: "training loss", location: format!("epoch {epoch}, sample {init}") }
}

/// One optimizer step on one sample; returns the loss.
pub fn train_step<T: Real>(model: &mut Model<T>, sample: &Sample, lr: f64) -> Result<f64> {
    let (c, h, w) = sample.input.dim();
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[c, h, w], sample.input.iter().map(|&v| T::from_f64(v as f64)).collect())?);
    let pred = model.forward(&mut g, x)?;
    let loss = masked_mae_loss(&mut g, pred, target_of(sample)?, &sample.land)?;
    let value = g.value(loss)[0].to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "training loss", location: format!("sample {}", sample.init) });
    }
    g.backward(loss, &mut model.params)?;
    model.params.adam_update(lr)?;
    Ok(value)
}

/// Mean masked MAE of the model over `samples`.
pub fn mean_loss<T: Real>(model: &Model<T>, samples: &[Sample]) -> Result<f64> {
    use crate::model::Forecaster;
    if samples.is_empty() {
        return Err(Error::invalid("validation set", "no samples"));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| masked_mae_value(&model.predict(&s.input)?, target_of(s)?, &s.land))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Trains with batch size 1 over a seeded shuffle of `train_inits`, validates
/// after every epoch, and leaves the best-validation parameters in `model`.
///
/// `on_epoch` sees each record as it is produced.
pub fn train_loop<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    train_inits: &[Month],
    valid_inits: &[Month],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_inits.is_empty() || valid_inits.is_empty() {
        return Err(Error::invalid("split", "training and validation need at least one sample each"));
    }
    if model.config.lead_count != data.lead_count || model.config.input_channels != data.layout.channels() {
        return Err(Error::shape(
            "train_loop",
            format!(
                "model takes {} channels for {} leads, data provides {} for {}",
                model.config.input_channels,
                model.config.lead_count,
                data.layout.channels(),
                data.lead_count
            ),
        ));
    }
    let mut accessed = BTreeSet::new();
    let valid = data.samples(valid_inits)?;
    valid_inits.iter().for_each(|&m| record_access(&mut accessed, data, m));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_inits.to_vec();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for e in 0..cfg.max_epochs {
        let epoch = e + 1;
        let lr = cfg.lr_at(e);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &init in &order {
            record_access(&mut accessed, data, init);
            let sample = data.sample(init)?;
            let loss = train_step(model, &sample, lr).map_err(|err| match err {
                Error::NonFinite { .. } => non_finite(epoch, init),
                e if e.is_numeric() => non_finite(epoch, init),
                e => e,
            })?;
            total += loss;
        }
        let train_loss = total / order.len() as f64;
        let valid_loss = mean_loss(model, &valid)?;
        if !valid_loss.is_finite() {
            return Err(Error::NonFinite { what: "validation loss", location: format!("epoch {epoch}") });
        }
        let record = EpochRecord { epoch, lr, train_loss, valid_loss };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, valid_loss) {
            StopDecision::Improved => best_params = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best_params;
    Ok(TrainReport {
        history,
        best_epoch: stopper.best_epoch,
        best_valid_loss: stopper.best,
        stopped_early,
        accessed,
    })
}
