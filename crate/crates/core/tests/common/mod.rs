//! Central-difference gradient checks shared by the gradient and acceptance tests.
#![allow(dead_code)]

pub mod codec;

use distilkit::alignments::SparsePosterior;
use distilkit::distillation::{cross_entropy, logit_gradient};
use distilkit::layers::*;
use distilkit::tensor::{log_softmax_rows, relu, softmax_rows};
use distilkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-3;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn with_value(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

/// Worst relative error between `grad` and central differences of `loss`
/// over every component of `x`.
pub fn check(x: &Tensor, grad: &Tensor, loss: impl Fn(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), grad.shape());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let v = x.data()[i];
        let num = (loss(&with_value(x, i, v + EPS)) - loss(&with_value(x, i, v - EPS))) / (2.0 * EPS);
        worst = worst.max(rel_err(grad.data()[i], num));
    }
    worst
}

/// `Σ r ⊙ y`: an arbitrary linear read-out so every output component gets a
/// random upstream gradient `r`.
pub fn dot(r: &Tensor, y: &Tensor) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8))
}

pub fn linear(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (t, i, o) = dims(&mut rng);
    let x = rand_tensor(&mut rng, &[t, i], 1.0);
    let w = rand_tensor(&mut rng, &[i, o], 1.0);
    let b = rand_tensor(&mut rng, &[o], 1.0);
    let r = rand_tensor(&mut rng, &[t, o], 1.0);
    let (gw, gb, gx) = linear_backward(&x, &w, &r).unwrap();
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&r, &linear_forward(x, w, b).unwrap());
    check(&w, &gw, |w| f(&x, w, &b))
        .max(check(&b, &gb, |b| f(&x, &w, b)))
        .max(check(&x, &gx, |x| f(x, &w, &b)))
}

pub fn relu_layer(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (t, i, _) = dims(&mut rng);
    let z = rand_tensor(&mut rng, &[t, i], 1.0);
    let r = rand_tensor(&mut rng, &[t, i], 1.0);
    let gz = relu_backward(&relu(&z), &r).unwrap();
    check(&z, &gz, |z| dot(&r, &relu(z)))
}

pub fn time_conv(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (t, i, o) = dims(&mut rng);
    let width = [1, 3, 5][rng.random_range(0..3)];
    let x = rand_tensor(&mut rng, &[t, i], 1.0);
    let k = rand_tensor(&mut rng, &[width * i, o], 1.0);
    let r = rand_tensor(&mut rng, &[t, o], 1.0);
    let (gk, gx) = time_convolution_backward(&x, &k, width, &r).unwrap();
    let f = |x: &Tensor, k: &Tensor| dot(&r, &time_convolution(x, k, width).unwrap());
    check(&k, &gk, |k| f(&x, k)).max(check(&x, &gx, |x| f(x, &k)))
}

pub fn rand_lstm(rng: &mut ChaCha8Rng, input: usize, hidden: usize, scale: f64) -> LstmParams {
    let mut p = LstmParams::zeros(input, hidden, DEFAULT_CELL_CLIP);
    for m in p.matrices_mut() {
        let shape = m.shape().to_vec();
        *m = rand_tensor(rng, &shape, scale);
    }
    p
}

fn replace_matrix(p: &LstmParams, k: usize, m: &Tensor) -> LstmParams {
    let mut q = p.clone();
    *q.matrices_mut()[k] = m.clone();
    q
}

pub fn lstm_step_check(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (_, i, h) = dims(&mut rng);
    let p = rand_lstm(&mut rng, i, h, 1.0);
    let x = rand_tensor(&mut rng, &[i], 2.0);
    let prev = LstmState {
        h: rand_tensor(&mut rng, &[h], 0.9),
        c: rand_tensor(&mut rng, &[h], 2.5),
    };
    let rh = rand_tensor(&mut rng, &[h], 1.0);
    let rc = rand_tensor(&mut rng, &[h], 1.0);
    let (_, cache) = lstm_step_cached(&p, &x, &prev).unwrap();
    let (gp, gx, gprev) = lstm_step_backward(&p, &cache, &rh, &rc).unwrap();
    let f = |p: &LstmParams, x: &Tensor, prev: &LstmState| {
        let s = lstm_step(p, x, prev).unwrap();
        dot(&rh, &s.h) + dot(&rc, &s.c)
    };
    let mut worst = check(&x, &gx, |x| f(&p, x, &prev));
    worst = worst.max(check(&prev.h, &gprev.h, |hp| {
        f(&p, &x, &LstmState { h: hp.clone(), c: prev.c.clone() })
    }));
    worst = worst.max(check(&prev.c, &gprev.c, |cp| {
        f(&p, &x, &LstmState { h: prev.h.clone(), c: cp.clone() })
    }));
    for k in 0..8 {
        let m = p.matrices()[k].clone();
        worst = worst.max(check(&m, gp.matrices()[k], |m| f(&replace_matrix(&p, k, m), &x, &prev)));
    }
    worst
}

pub fn blstm_check(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (t, i, h) = dims(&mut rng);
    let h2 = rng.random_range(1..=8);
    let fwd = rand_lstm(&mut rng, i, h, 0.8);
    let bwd = rand_lstm(&mut rng, i, h2, 0.8);
    let x = rand_tensor(&mut rng, &[t, i], 1.5);
    let r = rand_tensor(&mut rng, &[t, h + h2], 1.0);
    let (_, cache) = blstm_forward_cached(&fwd, &bwd, &x).unwrap();
    let (gf, gb, gx) = blstm_backward(&fwd, &bwd, &cache, &r).unwrap();
    let f = |fwd: &LstmParams, bwd: &LstmParams, x: &Tensor| dot(&r, &blstm_forward(fwd, bwd, x).unwrap());
    let mut worst = check(&x, &gx, |x| f(&fwd, &bwd, x));
    for k in 0..8 {
        let m = fwd.matrices()[k].clone();
        worst = worst.max(check(&m, gf.matrices()[k], |m| f(&replace_matrix(&fwd, k, m), &bwd, &x)));
        let m = bwd.matrices()[k].clone();
        worst = worst.max(check(&m, gb.matrices()[k], |m| f(&fwd, &replace_matrix(&bwd, k, m), &x)));
    }
    worst
}

pub fn rand_target(rng: &mut ChaCha8Rng, states: usize) -> SparsePosterior {
    let raw: Vec<f64> = (0..states).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let mut entries: Vec<(u32, f32)> = raw.iter().enumerate().map(|(i, v)| (i as u32, (v / sum) as f32)).collect();
    // Sparse support: drop some states, keeping a proper distribution.
    let keep = rng.random_range(1..=states);
    entries.sort_by(|a, b| b.1.total_cmp(&a.1));
    entries.truncate(keep);
    let kept: f32 = entries.iter().map(|e| e.1).sum();
    for e in &mut entries {
        e.1 /= kept;
    }
    SparsePosterior::new(entries).unwrap()
}

fn mean_ce(targets: &[SparsePosterior], logits: &Tensor) -> f64 {
    let lp = log_softmax_rows(logits).unwrap();
    targets
        .iter()
        .enumerate()
        .map(|(t, p)| cross_entropy(p, lp.row(t)).unwrap())
        .sum::<f64>()
        / targets.len() as f64
}

/// Eq. `dJ/da = Q − P` on a single frame of logits.
pub fn logit_grad_check(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let k = rng.random_range(2..=8);
    let z = rand_tensor(&mut rng, &[1, k], 3.0);
    let p = rand_target(&mut rng, k);
    let q = softmax_rows(&z).unwrap();
    let g = Tensor::new(vec![1, k], logit_gradient(&p, q.data()).unwrap()).unwrap();
    check(&z, &g, |z| mean_ce(std::slice::from_ref(&p), z))
}

pub fn small_student(rng: &mut ChaCha8Rng) -> ModelSpec {
    let hidden = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=8)).collect();
    ModelSpec::FeedForward(FeedForwardSpec {
        feature_dim: rng.random_range(1..=4),
        context_left: rng.random_range(0..=1),
        context_right: rng.random_range(0..=1),
        hidden,
        states: rng.random_range(2..=8),
    })
}

pub fn small_teacher(rng: &mut ChaCha8Rng) -> ModelSpec {
    ModelSpec::TcDnnBlstmDnn(RecurrentSpec {
        feature_dim: rng.random_range(1..=6),
        tc_width: [1, 3][rng.random_range(0..2)],
        tc_out: rng.random_range(1..=8),
        pre_hidden: vec![rng.random_range(1..=8)],
        blstm_cells: rng.random_range(1..=6),
        post_hidden: vec![rng.random_range(1..=8)],
        states: rng.random_range(2..=8),
        cell_clip: DEFAULT_CELL_CLIP,
    })
}

/// Whole-model check: mean cross-entropy against random soft targets, with
/// the logit gradient backpropagated through every layer.
pub fn stack_check(seed: u64, recurrent: bool) -> f64 {
    let mut rng = rng(seed);
    let spec = if recurrent { small_teacher(&mut rng) } else { small_student(&mut rng) };
    let mut params = init_params(&spec, seed);
    // Non-zero biases so every path is exercised.
    for t in params.tensors_mut() {
        if t.rank() == 1 {
            let n = t.len();
            *t = rand_tensor(&mut rng, &[n], 0.5);
        }
    }
    let t = rng.random_range(1..=4);
    let x = rand_tensor(&mut rng, &[t, spec.input_width()], 1.0);
    let targets: Vec<SparsePosterior> = (0..t).map(|_| rand_target(&mut rng, spec.states())).collect();
    let (logits, cache) = forward_logits(&spec, &params, &x).unwrap();
    let q = softmax_rows(&logits).unwrap();
    let mut g = Vec::new();
    for (i, p) in targets.iter().enumerate() {
        g.extend(logit_gradient(p, q.row(i)).unwrap().into_iter().map(|v| v / t as f64));
    }
    let g = Tensor::new(vec![t, spec.states()], g).unwrap();
    let grads = backward_with_cache(&spec, &params, &cache, &g).unwrap();
    let loss = |p: &ModelParams| mean_ce(&targets, &forward_logits(&spec, p, &x).unwrap().0);
    let mut worst: f64 = 0.0;
    let n = params.tensors().len();
    for k in 0..n {
        let base = params.tensors()[k].clone();
        worst = worst.max(check(&base, grads.tensors()[k], |m| {
            let mut p = params.clone();
            *p.tensors_mut()[k] = m.clone();
            loss(&p)
        }));
    }
    worst
}

/// Named checks with their per-instance function.
pub fn suite() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("linear", linear),
        ("relu", relu_layer),
        ("time convolution", time_conv),
        ("lstm step", lstm_step_check),
        ("blstm", blstm_check),
        ("logit gradient", logit_grad_check),
        ("feed-forward stack", |s| stack_check(s, false)),
        ("recurrent stack", |s| stack_check(s, true)),
    ]
}

/// Worst relative error of `f` over [`INSTANCES`] seeds.
pub fn worst_over_instances(f: fn(u64) -> f64, base_seed: u64) -> f64 {
    (0..INSTANCES as u64).map(|i| f(base_seed * 1000 + i)).fold(0.0, f64::max)
}
