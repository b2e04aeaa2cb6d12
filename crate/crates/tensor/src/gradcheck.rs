//! Central finite-difference checks of recorded gradients, in 64-bit.
//!
//! The function under test is reduced to a scalar with fixed random weights,
//! `loss = Σ w ⊙ f(inputs, params)`, and randomly chosen scalars of the
//! inputs and parameters are perturbed by `±step`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::store::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub probes: usize,
    pub seed: u64,
    /// Magnitudes below this count as this value in the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, probes: 24, seed: 0, floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub worst_relative_error: f64,
    /// `(slot, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, f64, f64)>,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

enum Slot {
    Input(usize),
    Param(String),
}

/// Checks gradients of `f` with respect to `inputs` and every parameter in
/// `store`.
pub fn check_gradients<E, F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var, E>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out_len = {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, store, &leaves)?;
        g.value(out).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let evaluate = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<(f64, Graph<f64>, Var, Vec<Var>), E> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let out = f(&mut g, store, &leaves)?;
        let shape = g.shape(out).to_vec();
        let w = g.constant(&shape, weights.clone())?;
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        Ok((g.value(loss)[0], g, loss, leaves))
    };
    let (_, mut g, loss, leaves) = evaluate(store, inputs)?;
    let grads = g.gradients(loss)?;
    let names = store.names();
    let mut slots: Vec<Slot> = (0..inputs.len()).map(Slot::Input).collect();
    slots.extend(names.iter().cloned().map(Slot::Param));
    if slots.is_empty() {
        return Err(TensorError::invalid("check_gradients", "nothing to probe").into());
    }
    let mut report = GradCheckReport { probes: 0, worst_relative_error: 0.0, worst: None };
    for _ in 0..cfg.probes {
        let slot = &slots[rng.gen_range(0..slots.len())];
        let (label, analytic, numeric) = match slot {
            Slot::Input(i) => {
                let idx = rng.gen_range(0..inputs[*i].numel());
                let analytic = grads.get(leaves[*i]).map_or(0.0, |gr| gr[idx]);
                let mut plus = inputs.to_vec();
                plus[*i].data_mut()[idx] += cfg.step;
                let mut minus = inputs.to_vec();
                minus[*i].data_mut()[idx] -= cfg.step;
                let fd = (evaluate(store, &plus)?.0 - evaluate(store, &minus)?.0) / (2.0 * cfg.step);
                (format!("input {i}[{idx}]"), analytic, fd)
            }
            Slot::Param(name) => {
                let idx = rng.gen_range(0..store.get(name).expect("listed").numel());
                let var = g.param(store, name)?;
                let analytic = grads.get(var).map_or(0.0, |gr| gr[idx]);
                let mut plus = store.clone();
                plus.get_mut(name).expect("listed").data_mut()[idx] += cfg.step;
                let mut minus = store.clone();
                minus.get_mut(name).expect("listed").data_mut()[idx] -= cfg.step;
                let fd = (evaluate(&plus, inputs)?.0 - evaluate(&minus, inputs)?.0) / (2.0 * cfg.step);
                (format!("{name}[{idx}]"), analytic, fd)
            }
        };
        let err = relative_error(analytic, numeric, cfg.floor);
        report.probes += 1;
        if err >= report.worst_relative_error {
            report.worst_relative_error = err;
            report.worst = Some((label, analytic, numeric));
        }
    }
    Ok(report)
}
