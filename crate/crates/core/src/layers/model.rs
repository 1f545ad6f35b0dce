//! Composite architectures: the small ReLU DNN student and the
//! TC-DNN-BLSTM-DNN teacher, with whole-stack forward and backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::blstm::{blstm_backward, blstm_forward_cached, BlstmCache};
use super::linear::{linear_backward, linear_forward, relu_backward};
use super::lstm::{LstmParams, DEFAULT_CELL_CLIP};
use super::tconv::{time_convolution, time_convolution_backward};
use crate::error::{Error, Result};
use crate::tensor::{relu, softmax_rows, Tensor};

/// Feed-forward ReLU network over a context window of frames.
///
/// The context fields describe how raw frames are windowed before they reach
/// the network (see [`crate::training::make_context_windows`]); the network
/// itself sees `(context_left + 1 + context_right) · feature_dim` inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForwardSpec {
    pub feature_dim: usize,
    pub context_left: usize,
    pub context_right: usize,
    pub hidden: Vec<usize>,
    pub states: usize,
}

/// Time convolution → ReLU DNN → BLSTM → ReLU DNN → softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentSpec {
    pub feature_dim: usize,
    pub tc_width: usize,
    pub tc_out: usize,
    pub pre_hidden: Vec<usize>,
    pub blstm_cells: usize,
    pub post_hidden: Vec<usize>,
    pub states: usize,
    pub cell_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    FeedForward(FeedForwardSpec),
    TcDnnBlstmDnn(RecurrentSpec),
}

impl ModelSpec {
    /// Desk-scale student: two hidden ReLU layers over an 11-frame window.
    pub fn default_student(feature_dim: usize, states: usize) -> Self {
        ModelSpec::FeedForward(FeedForwardSpec {
            feature_dim,
            context_left: 5,
            context_right: 5,
            hidden: vec![64, 64],
            states,
        })
    }

    /// Larger feed-forward network used as the non-recurrent teacher.
    pub fn default_big_dnn(feature_dim: usize, states: usize) -> Self {
        ModelSpec::FeedForward(FeedForwardSpec {
            feature_dim,
            context_left: 5,
            context_right: 5,
            hidden: vec![192, 192, 192],
            states,
        })
    }

    pub fn default_teacher(feature_dim: usize, states: usize) -> Self {
        ModelSpec::TcDnnBlstmDnn(RecurrentSpec {
            feature_dim,
            tc_width: 5,
            tc_out: 64,
            pre_hidden: vec![64],
            blstm_cells: 32,
            post_hidden: vec![64],
            states,
            cell_clip: DEFAULT_CELL_CLIP,
        })
    }

    pub fn states(&self) -> usize {
        match self {
            ModelSpec::FeedForward(s) => s.states,
            ModelSpec::TcDnnBlstmDnn(s) => s.states,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            ModelSpec::FeedForward(s) => s.feature_dim,
            ModelSpec::TcDnnBlstmDnn(s) => s.feature_dim,
        }
    }

    /// Width of one row passed to [`forward`].
    pub fn input_width(&self) -> usize {
        match self {
            ModelSpec::FeedForward(s) => (s.context_left + 1 + s.context_right) * s.feature_dim,
            ModelSpec::TcDnnBlstmDnn(s) => s.feature_dim,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, ModelSpec::TcDnnBlstmDnn(_))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.states() < 2 {
            return bad(format!("need at least 2 output states, got {}", self.states()));
        }
        if self.feature_dim() == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        match self {
            ModelSpec::FeedForward(s) => {
                if s.hidden.contains(&0) {
                    return bad("hidden widths must be >= 1".into());
                }
            }
            ModelSpec::TcDnnBlstmDnn(s) => {
                if s.tc_width % 2 == 0 {
                    return bad(format!("tc_width must be odd, got {}", s.tc_width));
                }
                if s.tc_out == 0
                    || s.blstm_cells == 0
                    || s.pre_hidden.contains(&0)
                    || s.post_hidden.contains(&0)
                {
                    return bad("layer widths must be >= 1".into());
                }
                if !(s.cell_clip > 0.0) {
                    return bad("cell_clip must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Canonical text form (TOML), used in checkpoints and spec files.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model spec serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: ModelSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parameter layout this spec requires, layer by layer.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut layers = Vec::new();
        let push_affines = |layers: &mut Vec<LayerShape>, mut width: usize, widths: &[usize]| {
            for &w in widths {
                layers.push(LayerShape::Affine {
                    input: width,
                    output: w,
                });
                width = w;
            }
            width
        };
        match self {
            ModelSpec::FeedForward(s) => {
                let last = push_affines(&mut layers, self.input_width(), &s.hidden);
                layers.push(LayerShape::Affine {
                    input: last,
                    output: s.states,
                });
            }
            ModelSpec::TcDnnBlstmDnn(s) => {
                layers.push(LayerShape::TimeConv {
                    width: s.tc_width,
                    input: s.feature_dim,
                    output: s.tc_out,
                });
                let w = push_affines(&mut layers, s.tc_out, &s.pre_hidden);
                layers.push(LayerShape::Blstm {
                    input: w,
                    cells: s.blstm_cells,
                });
                let last = push_affines(&mut layers, 2 * s.blstm_cells, &s.post_hidden);
                layers.push(LayerShape::Affine {
                    input: last,
                    output: s.states,
                });
            }
        }
        layers
    }

    fn cell_clip(&self) -> f64 {
        match self {
            ModelSpec::TcDnnBlstmDnn(s) => s.cell_clip,
            ModelSpec::FeedForward(_) => DEFAULT_CELL_CLIP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Affine { input: usize, output: usize },
    TimeConv { width: usize, input: usize, output: usize },
    Blstm { input: usize, cells: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    /// `w: input×output`, `b: output`.
    Affine { w: Tensor, b: Tensor },
    /// `kernel: (width·input)×output`, no bias.
    TimeConv { kernel: Tensor },
    Blstm { fwd: LstmParams, bwd: LstmParams },
}

impl LayerParams {
    fn zeros(shape: &LayerShape, cell_clip: f64) -> Self {
        match *shape {
            LayerShape::Affine { input, output } => LayerParams::Affine {
                w: Tensor::zeros(&[input, output]),
                b: Tensor::zeros(&[output]),
            },
            LayerShape::TimeConv {
                width,
                input,
                output,
            } => LayerParams::TimeConv {
                kernel: Tensor::zeros(&[width * input, output]),
            },
            LayerShape::Blstm { input, cells } => LayerParams::Blstm {
                fwd: LstmParams::zeros(input, cells, cell_clip),
                bwd: LstmParams::zeros(input, cells, cell_clip),
            },
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::Affine { w, b } => vec![w, b],
            LayerParams::TimeConv { kernel } => vec![kernel],
            LayerParams::Blstm { fwd, bwd } => {
                fwd.matrices().into_iter().chain(bwd.matrices()).collect()
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::Affine { w, b } => vec![w, b],
            LayerParams::TimeConv { kernel } => vec![kernel],
            LayerParams::Blstm { fwd, bwd } => fwd
                .matrices_mut()
                .into_iter()
                .chain(bwd.matrices_mut())
                .collect(),
        }
    }
}

/// Weights of a model, layer by layer in the order of [`ModelSpec::layer_shapes`].
///
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let clip = spec.cell_clip();
        ModelParams {
            layers: spec
                .layer_shapes()
                .iter()
                .map(|s| LayerParams::zeros(s, clip))
                .collect(),
        }
    }

    /// Every weight tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(LayerParams::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(LayerParams::tensors_mut)
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters for `spec` from tensors in canonical order.
    pub fn from_tensors(spec: &ModelSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let mut params = ModelParams::zeros(spec);
        let mut slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Data(format!(
                "spec needs {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape("ModelParams::from_tensors", slot.shape(), t.shape()));
            }
            **slot = t;
        }
        Ok(params)
    }

    /// `self += factor · other`.
    pub fn axpy(&mut self, factor: f64, other: &ModelParams) {
        for (p, g) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
                *a += factor * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Data(format!(
                "model has {} layers, spec needs {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (shape, layer) in shapes.iter().zip(&self.layers) {
            let ok = match (*shape, layer) {
                (LayerShape::Affine { input, output }, LayerParams::Affine { w, b }) => {
                    w.shape() == [input, output] && b.shape() == [output]
                }
                (
                    LayerShape::TimeConv {
                        width,
                        input,
                        output,
                    },
                    LayerParams::TimeConv { kernel },
                ) => kernel.shape() == [width * input, output],
                (LayerShape::Blstm { input, cells }, LayerParams::Blstm { fwd, bwd }) => [fwd, bwd]
                    .iter()
                    .all(|p| p.input() == input && p.hidden() == cells && p.validate().is_ok()),
                _ => false,
            };
            if !ok {
                return Err(Error::Data(format!(
                    "parameters do not match layer {shape:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Glorot-style uniform initialisation; biases start at zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(spec);
    let mut fill = |t: &mut Tensor, fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        for v in t.data_mut() {
            *v = dist.sample(&mut rng);
        }
    };
    for layer in &mut params.layers {
        match layer {
            LayerParams::Affine { w, .. } => {
                let (i, o) = (w.shape()[0], w.shape()[1]);
                fill(w, i, o);
            }
            LayerParams::TimeConv { kernel } => {
                let (i, o) = (kernel.shape()[0], kernel.shape()[1]);
                fill(kernel, i, o);
            }
            LayerParams::Blstm { fwd, bwd } => {
                for lstm in [fwd, bwd] {
                    for m in lstm.matrices_mut() {
                        // hidden×input or hidden×hidden
                        let (o, i) = (m.shape()[0], m.shape()[1]);
                        fill(m, i, o);
                    }
                }
            }
        }
    }
    params
}

#[derive(Debug, Clone)]
enum LayerCache {
    Affine { x: Tensor, y: Tensor, relu: bool },
    TimeConv { x: Tensor },
    Blstm(BlstmCache),
}

/// Forward intermediates for [`backward_with_cache`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    frames: usize,
}

fn check_input(spec: &ModelSpec, params: &ModelParams, xs: &Tensor) -> Result<()> {
    params.validate(spec)?;
    if xs.rank() != 2 || xs.cols() != spec.input_width() {
        return Err(Error::shape(
            "forward input",
            xs.shape(),
            &[xs.rows(), spec.input_width()],
        ));
    }
    Ok(())
}

/// Pre-softmax activations for every frame, plus the backward cache.
pub fn forward_logits(
    spec: &ModelSpec,
    params: &ModelParams,
    xs: &Tensor,
) -> Result<(Tensor, ForwardCache)> {
    check_input(spec, params, xs)?;
    let tc_width = match spec {
        ModelSpec::TcDnnBlstmDnn(s) => s.tc_width,
        ModelSpec::FeedForward(_) => 1,
    };
    let last = params.layers.len() - 1;
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut a = xs.clone();
    for (k, layer) in params.layers.iter().enumerate() {
        a = match layer {
            LayerParams::Affine { w, b } => {
                let z = linear_forward(&a, w, b)?;
                let hidden = k != last;
                let y = if hidden { relu(&z) } else { z };
                caches.push(LayerCache::Affine {
                    x: a,
                    y: y.clone(),
                    relu: hidden,
                });
                y
            }
            LayerParams::TimeConv { kernel } => {
                let y = time_convolution(&a, kernel, tc_width)?;
                caches.push(LayerCache::TimeConv { x: a });
                y
            }
            LayerParams::Blstm { fwd, bwd } => {
                let (y, c) = blstm_forward_cached(fwd, bwd, &a)?;
                caches.push(LayerCache::Blstm(c));
                y
            }
        };
    }
    Ok((
        a,
        ForwardCache {
            layers: caches,
            frames: xs.rows(),
        },
    ))
}

/// Per-frame posteriors: each row is a softmax over the output states.
pub fn forward(spec: &ModelSpec, params: &ModelParams, xs: &Tensor) -> Result<Tensor> {
    let (logits, _) = forward_logits(spec, params, xs)?;
    softmax_rows(&logits)
}

/// Parameter gradient given `dJ/dlogits` for the frames of a cached forward pass.
pub fn backward_with_cache(
    spec: &ModelSpec,
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<ModelParams> {
    if grad_logits.shape() != [cache.frames, spec.states()] {
        return Err(Error::shape(
            "backward",
            grad_logits.shape(),
            &[cache.frames, spec.states()],
        ));
    }
    let tc_width = match spec {
        ModelSpec::TcDnnBlstmDnn(s) => s.tc_width,
        ModelSpec::FeedForward(_) => 1,
    };
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut delta = grad_logits.clone();
    for (layer, lc) in params.layers.iter().zip(&cache.layers).rev() {
        match (layer, lc) {
            (LayerParams::Affine { w, .. }, LayerCache::Affine { x, y, relu }) => {
                if *relu {
                    delta = relu_backward(y, &delta)?;
                }
                let (gw, gb, gx) = linear_backward(x, w, &delta)?;
                grads.push(LayerParams::Affine { w: gw, b: gb });
                delta = gx;
            }
            (LayerParams::TimeConv { kernel }, LayerCache::TimeConv { x }) => {
                let (gk, gx) = time_convolution_backward(x, kernel, tc_width, &delta)?;
                grads.push(LayerParams::TimeConv { kernel: gk });
                delta = gx;
            }
            (LayerParams::Blstm { fwd, bwd }, LayerCache::Blstm(c)) => {
                let (gf, gb, gx) = blstm_backward(fwd, bwd, c, &delta)?;
                grads.push(LayerParams::Blstm { fwd: gf, bwd: gb });
                delta = gx;
            }
            _ => return Err(Error::Contract("forward cache does not match parameters".into())),
        }
    }
    grads.reverse();
    Ok(ModelParams { layers: grads })
}

/// Full parameter gradient for upstream logit gradient `grad_logits: T×states`.
pub fn backward(
    spec: &ModelSpec,
    params: &ModelParams,
    xs: &Tensor,
    grad_logits: &Tensor,
) -> Result<ModelParams> {
    let (_, cache) = forward_logits(spec, params, xs)?;
    backward_with_cache(spec, params, &cache, grad_logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::Rng;

    fn tiny_ff(hidden: Vec<usize>) -> ModelSpec {
        ModelSpec::FeedForward(FeedForwardSpec {
            feature_dim: 3,
            context_left: 0,
            context_right: 0,
            hidden,
            states: 4,
        })
    }

    fn tiny_teacher() -> ModelSpec {
        ModelSpec::TcDnnBlstmDnn(RecurrentSpec {
            feature_dim: 3,
            tc_width: 3,
            tc_out: 4,
            pre_hidden: vec![5],
            blstm_cells: 3,
            post_hidden: vec![4],
            states: 4,
            cell_clip: 3.0,
        })
    }

    fn random_xs(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::matrix(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [tiny_ff(vec![6, 5]), tiny_teacher()] {
            let p = init_params(&spec, 3);
            let y = forward(&spec, &p, &random_xs(&mut rng, 5, 3)).unwrap();
            for r in 0..5 {
                assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_hidden_is_linear_softmax() {
        let spec = tiny_ff(vec![]);
        let p = init_params(&spec, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = random_xs(&mut rng, 4, 3);
        let LayerParams::Affine { w, .. } = &p.layers[0] else {
            panic!("expected affine layer")
        };
        let expect = softmax_rows(&matmul(&xs, w).unwrap()).unwrap();
        assert_eq!(forward(&spec, &p, &xs).unwrap(), expect);
    }

    #[test]
    fn init_is_seeded() {
        let spec = tiny_teacher();
        assert_eq!(init_params(&spec, 9), init_params(&spec, 9));
        assert_ne!(init_params(&spec, 9), init_params(&spec, 10));
    }

    #[test]
    fn init_mean_is_centred() {
        let spec = ModelSpec::FeedForward(FeedForwardSpec {
            feature_dim: 100,
            context_left: 0,
            context_right: 0,
            hidden: vec![],
            states: 100,
        });
        let p = init_params(&spec, 77);
        let w = p.tensors()[0];
        let limit = (6.0f64 / 200.0).sqrt();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let se = limit / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(w.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_and_doubled_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = tiny_teacher();
        let p = init_params(&spec, 1);
        let xs = random_xs(&mut rng, 3, 3);
        let g0 = backward(&spec, &p, &xs, &Tensor::zeros(&[3, 4])).unwrap();
        assert!(g0.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let up = random_xs(&mut rng, 3, 4);
        let g1 = backward(&spec, &p, &xs, &up).unwrap();
        let g2 = backward(&spec, &p, &xs, &up.scale(2.0).unwrap()).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn feed_forward_is_frame_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = tiny_ff(vec![7]);
        let p = init_params(&spec, 2);
        let xs = random_xs(&mut rng, 6, 3);
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted =
            Tensor::from_rows(&perm.iter().map(|&i| xs.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let y = forward(&spec, &p, &xs).unwrap();
        let yp = forward(&spec, &p, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in yp.row(k).iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spec_text_round_trip() {
        for spec in [tiny_ff(vec![6, 5]), tiny_teacher(), tiny_ff(vec![])] {
            let text = spec.to_text();
            assert_eq!(ModelSpec::from_text(&text).unwrap(), spec, "{text}");
        }
    }

    #[test]
    fn mismatched_params_rejected() {
        let p = init_params(&tiny_ff(vec![6]), 1);
        let xs = Tensor::zeros(&[2, 3]);
        assert!(forward(&tiny_ff(vec![5]), &p, &xs).is_err());
        assert!(forward(&tiny_ff(vec![6]), &p, &Tensor::zeros(&[2, 4])).is_err());
    }
}
