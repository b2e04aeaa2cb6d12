//! Reverse-mode gradients against central finite differences, 64-bit.

use std::sync::Arc;

use icemamba_tensor::gradcheck::{check_gradients, GradCheckConfig};
use icemamba_tensor::{Activation, Graph, ParamStore, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const PROBES: usize = 24;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn check(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let cfg = GradCheckConfig { probes: PROBES, seed, ..Default::default() };
    let report = check_gradients::<TensorError, _>(&ParamStore::new(), &inputs, |g, _, v| Ok(f(g, v)), cfg).unwrap();
    assert!(report.worst_relative_error < TOL, "{name}: {report:?}");
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, kind) in [Activation::Silu, Activation::Tanh, Activation::Sigmoid, Activation::Softplus].into_iter().enumerate() {
        let x = random(&mut rng, &[3, 5]);
        check(kind.name(), 10 + i as u64, vec![x], move |g, v| g.activation(v[0], kind).unwrap());
    }
}

#[test]
fn elementwise_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[4, 3]);
    let b = random(&mut rng, &[4, 3]);
    check("mul-sub-add", 20, vec![a.clone(), b.clone()], |g, v| {
        let p = g.mul(v[0], v[1]).unwrap();
        let s = g.sub(p, v[1]).unwrap();
        g.add(s, v[0]).unwrap()
    });
    check("exp-scale", 21, vec![a.clone()], |g, v| {
        let e = g.exp(v[0]);
        g.scale(e, -0.7)
    });
    check("abs-mean", 22, vec![b], |g, v| {
        let a = g.abs(v[0]);
        let m = g.mean(a);
        g.scale(m, 3.0)
    });
}

#[test]
fn linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 4]);
    let w = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5]);
    check("linear", 30, vec![x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());
}

#[test]
fn depthwise_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 5, 4]);
    let k = random(&mut rng, &[3, 3, 3]);
    check("depthwise_conv2d", 40, vec![x, k], |g, v| g.depthwise_conv2d(v[0], v[1]).unwrap());
}

#[test]
fn layer_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[6, 4]);
    let gamma = random(&mut rng, &[4]);
    let beta = random(&mut rng, &[4]);
    check("layer_norm", 50, vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
}

#[test]
fn pooling_and_channel_attention_pieces() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[5, 3, 3]);
    let k = random(&mut rng, &[3]);
    check("gap-conv1d-scale", 60, vec![x, k], |g, v| {
        let p = g.global_avg_pool(v[0]).unwrap();
        let c = g.channel_conv1d(p, v[1]).unwrap();
        let s = g.activation(c, Activation::Sigmoid).unwrap();
        g.scale_channels(v[0], s).unwrap()
    });
}

#[test]
fn gather_and_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 3]);
    let idx: Arc<[usize]> = vec![5, 0, usize::MAX, 2, 2, 1, 4, 3].into();
    check("gather", 70, vec![x], move |g, v| {
        let r = g.reshape(v[0], &[6]).unwrap();
        let y = g.gather(r, idx.clone(), &[8]).unwrap();
        g.activation(y, Activation::Tanh).unwrap()
    });
}

#[test]
fn parameters_receive_gradients_through_store() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::new(&[2, 1], vec![0.5, -1.0]).unwrap());
    store.insert("unused", Tensor::new(&[3], vec![1.0; 3]).unwrap());
    let mut g = Graph::new();
    let x = g.constant(&[2], vec![3.0, 4.0]).unwrap();
    let w = g.param(&store, "w").unwrap();
    let w_again = g.param(&store, "w").unwrap();
    assert_eq!(w, w_again);
    let y = g.linear(x, w, None).unwrap();
    let loss = g.sum(y);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad().unwrap(), &[3.0, 4.0]);
    assert_eq!(store.get("unused").unwrap().grad().unwrap(), &[0.0; 3]);

    // accumulation is additive across backward calls
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get("w").unwrap().grad().unwrap(), &[6.0, 8.0]);
}

#[test]
fn sum_loss_gives_unit_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.insert("p", Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let mut g = Graph::new();
    let p = g.param(&store, "p").unwrap();
    let loss = g.sum(p);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get("p").unwrap().grad().unwrap(), &[1.0; 4]);
}
