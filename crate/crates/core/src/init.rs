//! Deterministic parameter initialization.

use icemamba_tensor::{ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Standard deviation of the truncated normal used for weight matrices.
pub const WEIGHT_STD: f64 = 0.02;

pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal(0, std) truncated to ±2 std by resampling.
    pub fn trunc_normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::from_f64(z * std);
                }
            })
            .collect();
        Tensor::new(shape, data).expect("extent matches")
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], low: f64, high: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.gen_range(low..high))).collect();
        Tensor::new(shape, data).expect("extent matches")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Registers a `[c_in, c_out]` weight (truncated normal) and a zero bias.
pub fn linear_params<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, prefix: &str, c_in: usize, c_out: usize) {
    store.insert(format!("{prefix}.weight"), init.trunc_normal(&[c_in, c_out], WEIGHT_STD));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
}
