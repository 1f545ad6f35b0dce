//! Clipped LSTM cell without biases or peepholes, and its unrolled sequence form.
//!
//! ```text
//! i_t = σ(W_xi x_t + W_hi h_{t-1})
//! f_t = σ(W_xf x_t + W_hf h_{t-1})
//! c_t = clip(f_t ⊙ c_{t-1} + i_t ⊙ tanh(W_xc x_t + W_hc h_{t-1}))
//! o_t = σ(W_xo x_t + W_ho h_{t-1})
//! h_t = o_t ⊙ tanh(c_t)
//! ```
//!
//! Input matrices are `hidden × input`, recurrent matrices `hidden × hidden`.
//! The clipped cell is both stored and fed to the output nonlinearity; the
//! clip has zero derivative wherever it was active.

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid_scalar, Op, Tensor};

pub const DEFAULT_CELL_CLIP: f64 = 3.0;

/// Gate order used by [`LstmParams::matrices`]: input, forget, candidate, output.
pub const GATES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub cell_clip: f64,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize, cell_clip: f64) -> Self {
        let x = || Tensor::zeros(&[hidden, input]);
        let h = || Tensor::zeros(&[hidden, hidden]);
        LstmParams {
            w_xi: x(),
            w_hi: h(),
            w_xf: x(),
            w_hf: h(),
            w_xc: x(),
            w_hc: h(),
            w_xo: x(),
            w_ho: h(),
            cell_clip,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hi.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_xi.shape()[1]
    }

    /// All eight weight matrices, in `xi, hi, xf, hf, xc, hc, xo, ho` order.
    pub fn matrices(&self) -> [&Tensor; 8] {
        [
            &self.w_xi, &self.w_hi, &self.w_xf, &self.w_hf, &self.w_xc, &self.w_hc, &self.w_xo,
            &self.w_ho,
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_xi,
            &mut self.w_hi,
            &mut self.w_xf,
            &mut self.w_hf,
            &mut self.w_xc,
            &mut self.w_hc,
            &mut self.w_xo,
            &mut self.w_ho,
        ]
    }

    /// `(input, recurrent)` matrices of one gate.
    fn gate_mut(&mut self, gate: usize) -> (&mut Tensor, &mut Tensor) {
        match gate {
            0 => (&mut self.w_xi, &mut self.w_hi),
            1 => (&mut self.w_xf, &mut self.w_hf),
            2 => (&mut self.w_xc, &mut self.w_hc),
            3 => (&mut self.w_xo, &mut self.w_ho),
            _ => unreachable!("gate index {gate}"),
        }
    }

    fn input_matrix(&self, gate: usize) -> &Tensor {
        self.matrices()[2 * gate]
    }

    fn recurrent_matrix(&self, gate: usize) -> &Tensor {
        self.matrices()[2 * gate + 1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_clip > 0.0) {
            return Err(Error::Config(format!(
                "cell clip must be positive, got {}",
                self.cell_clip
            )));
        }
        let hidden = self.hidden();
        let input = self.input();
        for (k, m) in self.matrices().iter().enumerate() {
            let want = if k % 2 == 0 {
                [hidden, input]
            } else {
                [hidden, hidden]
            };
            if m.shape() != want {
                return Err(Error::shape("LstmParams", m.shape(), &want));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

/// Forward intermediates of one step, retained for backpropagation.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    /// tanh candidate
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    /// Cell before clipping.
    pub c_raw: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

fn matvec_acc(w: &Tensor, v: &[f64], out: &mut [f64]) {
    let cols = w.cols();
    for (o, row) in out.iter_mut().zip(w.data().chunks(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

struct StepOut {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_raw: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

impl StepOut {
    fn into_cache(self, x: Vec<f64>, h_prev: Vec<f64>, c_prev: Vec<f64>) -> (Vec<f64>, Vec<f64>, StepCache) {
        let cache = StepCache {
            x,
            h_prev,
            c_prev,
            i: self.i,
            f: self.f,
            g: self.g,
            o: self.o,
            c_raw: self.c_raw,
            tanh_c: self.tanh_c,
        };
        (self.h, self.c, cache)
    }
}

/// Completes one step given the input projections `zx` (per gate, length hidden).
fn step_from_projection(
    params: &LstmParams,
    zx: [&[f64]; GATES],
    h_prev: &[f64],
    c_prev: &[f64],
) -> StepOut {
    let hidden = params.hidden();
    let mut z: [Vec<f64>; GATES] = std::array::from_fn(|g| zx[g].to_vec());
    for (g, zg) in z.iter_mut().enumerate() {
        matvec_acc(params.recurrent_matrix(g), h_prev, zg);
    }
    let i: Vec<f64> = z[0].iter().map(|&v| sigmoid_scalar(v)).collect();
    let f: Vec<f64> = z[1].iter().map(|&v| sigmoid_scalar(v)).collect();
    let g: Vec<f64> = z[2].iter().map(|v| v.tanh()).collect();
    let o: Vec<f64> = z[3].iter().map(|&v| sigmoid_scalar(v)).collect();
    let clip = params.cell_clip;
    let mut c_raw = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut tanh_c = vec![0.0; hidden];
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        c_raw[j] = f[j] * c_prev[j] + i[j] * g[j];
        c[j] = c_raw[j].clamp(-clip, clip);
        tanh_c[j] = c[j].tanh();
        h[j] = o[j] * tanh_c[j];
    }
    StepOut {
        i,
        f,
        g,
        o,
        c_raw,
        c,
        tanh_c,
        h,
    }
}

fn check_step_inputs(params: &LstmParams, x: &Tensor, prev: &LstmState) -> Result<()> {
    params.validate()?;
    if x.shape() != [params.input()] {
        return Err(Error::shape("lstm_step input", x.shape(), &[params.input()]));
    }
    let hidden = params.hidden();
    if prev.h.shape() != [hidden] || prev.c.shape() != [hidden] {
        return Err(Error::shape("lstm_step state", prev.h.shape(), &[hidden]));
    }
    Ok(())
}

/// One clipped LSTM step.
pub fn lstm_step(params: &LstmParams, x: &Tensor, prev: &LstmState) -> Result<LstmState> {
    lstm_step_cached(params, x, prev).map(|(s, _)| s)
}

/// One step, also returning the intermediates needed by [`lstm_step_backward`].
pub fn lstm_step_cached(
    params: &LstmParams,
    x: &Tensor,
    prev: &LstmState,
) -> Result<(LstmState, StepCache)> {
    check_step_inputs(params, x, prev)?;
    let hidden = params.hidden();
    let zx: [Vec<f64>; GATES] = std::array::from_fn(|g| {
        let mut z = vec![0.0; hidden];
        matvec_acc(params.input_matrix(g), x.data(), &mut z);
        z
    });
    let out = step_from_projection(
        params,
        std::array::from_fn(|k| zx[k].as_slice()),
        prev.h.data(),
        prev.c.data(),
    );
    let (h, c, cache) = out.into_cache(
        x.data().to_vec(),
        prev.h.data().to_vec(),
        prev.c.data().to_vec(),
    );
    let state = LstmState {
        h: Tensor::from_parts(vec![hidden], h, "lstm_step")?,
        c: Tensor::from_parts(vec![hidden], c, "lstm_step")?,
    };
    Ok((state, cache))
}

/// Per-gate pre-activation gradients of one step plus the gradient flowing into
/// the previous cell.
struct StepDeltas {
    dz: [Vec<f64>; GATES],
    dc_prev: Vec<f64>,
}

fn step_deltas(clip: f64, cache: &StepCache, grad_h: &[f64], grad_c: &[f64]) -> StepDeltas {
    let hidden = cache.i.len();
    let mut dz: [Vec<f64>; GATES] = std::array::from_fn(|_| vec![0.0; hidden]);
    let mut dc_prev = vec![0.0; hidden];
    for j in 0..hidden {
        let (i, f, g, o, tc) = (cache.i[j], cache.f[j], cache.g[j], cache.o[j], cache.tanh_c[j]);
        let d_o = grad_h[j] * tc;
        let mut dc = grad_c[j] + grad_h[j] * o * (1.0 - tc * tc);
        if cache.c_raw[j].abs() > clip {
            dc = 0.0;
        }
        dz[0][j] = dc * g * i * (1.0 - i);
        dz[1][j] = dc * cache.c_prev[j] * f * (1.0 - f);
        dz[2][j] = dc * i * (1.0 - g * g);
        dz[3][j] = d_o * o * (1.0 - o);
        dc_prev[j] = dc * f;
    }
    StepDeltas { dz, dc_prev }
}

fn outer_acc(out: &mut Tensor, left: &[f64], right: &[f64]) {
    let cols = right.len();
    for (row, &l) in out.data_mut().chunks_mut(cols).zip(left) {
        if l != 0.0 {
            for (o, &r) in row.iter_mut().zip(right) {
                *o += l * r;
            }
        }
    }
}

fn matvec_t_acc(w: &Tensor, v: &[f64], out: &mut [f64]) {
    let cols = w.cols();
    for (row, &s) in w.data().chunks(cols).zip(v) {
        if s != 0.0 {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
    }
}

/// Gradients of one step.
///
/// Returns `(grad_params, grad_x, grad_prev)`, where `grad_prev` holds the
/// gradients with respect to `h_{t-1}` and `c_{t-1}`.
pub fn lstm_step_backward(
    params: &LstmParams,
    cache: &StepCache,
    grad_h: &Tensor,
    grad_c: &Tensor,
) -> Result<(LstmParams, Tensor, LstmState)> {
    params.validate()?;
    let hidden = params.hidden();
    let input = params.input();
    if cache.x.len() != input
        || cache.h_prev.len() != hidden
        || [&cache.c_prev, &cache.i, &cache.f, &cache.g, &cache.o, &cache.c_raw, &cache.tanh_c]
            .iter()
            .any(|v| v.len() != hidden)
    {
        return Err(Error::Contract(
            "step cache does not belong to these parameters".into(),
        ));
    }
    if grad_h.shape() != [hidden] || grad_c.shape() != [hidden] {
        return Err(Error::shape("lstm_step_backward", grad_h.shape(), &[hidden]));
    }
    let deltas = step_deltas(params.cell_clip, cache, grad_h.data(), grad_c.data());
    let mut grads = LstmParams::zeros(input, hidden, params.cell_clip);
    let mut dx = vec![0.0; input];
    let mut dh_prev = vec![0.0; hidden];
    for (g, dz) in deltas.dz.iter().enumerate() {
        let (gx, gh) = grads.gate_mut(g);
        outer_acc(gx, dz, &cache.x);
        outer_acc(gh, dz, &cache.h_prev);
        matvec_t_acc(params.input_matrix(g), dz, &mut dx);
        matvec_t_acc(params.recurrent_matrix(g), dz, &mut dh_prev);
    }
    let grad_prev = LstmState {
        h: Tensor::from_parts(vec![hidden], dh_prev, "lstm_step_backward")?,
        c: Tensor::from_parts(vec![hidden], deltas.dc_prev, "lstm_step_backward")?,
    };
    Ok((
        grads,
        Tensor::from_parts(vec![input], dx, "lstm_step_backward")?,
        grad_prev,
    ))
}

/// Intermediates of a full unrolled pass, stored in processing order.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    reverse: bool,
    xs: Tensor,
    steps: Vec<StepCache>,
}

/// Runs the cell over `xs: T×input` from a zero state. With `reverse` the
/// sequence is consumed right to left; outputs are always indexed by frame.
pub fn lstm_sequence(
    params: &LstmParams,
    xs: &Tensor,
    reverse: bool,
) -> Result<(Tensor, SequenceCache)> {
    params.validate()?;
    if xs.rank() != 2 || xs.cols() != params.input() {
        return Err(Error::shape(
            "lstm_sequence",
            xs.shape(),
            &[xs.rows(), params.input()],
        ));
    }
    let t_len = xs.rows();
    let hidden = params.hidden();
    let input = params.input();
    // Input projections for all frames at once: T×hidden per gate.
    let zx: Vec<Vec<f64>> = (0..GATES)
        .map(|g| {
            let mut z = vec![0.0; t_len * hidden];
            gemm(
                t_len,
                input,
                hidden,
                xs.data(),
                Op::N,
                params.input_matrix(g).data(),
                Op::T,
                &mut z,
                false,
            );
            z
        })
        .collect();
    let mut out = vec![0.0; t_len * hidden];
    let mut steps = Vec::with_capacity(t_len);
    let mut h_prev = vec![0.0; hidden];
    let mut c_prev = vec![0.0; hidden];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let proj: [&[f64]; GATES] =
            std::array::from_fn(|g| &zx[g][t * hidden..(t + 1) * hidden]);
        let so = step_from_projection(params, proj, &h_prev, &c_prev);
        out[t * hidden..(t + 1) * hidden].copy_from_slice(&so.h);
        // The frame input is kept once in the sequence cache, not per step.
        let (h, c, cache) = so.into_cache(Vec::new(), h_prev, c_prev);
        steps.push(cache);
        h_prev = h;
        c_prev = c;
    }
    let cache = SequenceCache {
        reverse,
        xs: xs.clone(),
        steps,
    };
    Ok((
        Tensor::from_parts(vec![t_len, hidden], out, "lstm_sequence")?,
        cache,
    ))
}

/// Backpropagation through time for [`lstm_sequence`].
pub fn lstm_sequence_backward(
    params: &LstmParams,
    cache: &SequenceCache,
    grad_out: &Tensor,
) -> Result<(LstmParams, Tensor)> {
    let t_len = cache.steps.len();
    let hidden = params.hidden();
    let input = params.input();
    if grad_out.shape() != [t_len, hidden] {
        return Err(Error::shape(
            "lstm_sequence_backward",
            grad_out.shape(),
            &[t_len, hidden],
        ));
    }
    let mut grads = LstmParams::zeros(input, hidden, params.cell_clip);
    // dz per gate, indexed by frame, for the batched input-matrix gradients.
    let mut dz_all: Vec<Vec<f64>> = vec![vec![0.0; t_len * hidden]; GATES];
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    for step in (0..t_len).rev() {
        let t = if cache.reverse { t_len - 1 - step } else { step };
        let sc = &cache.steps[step];
        let grad_h: Vec<f64> = grad_out
            .row(t)
            .iter()
            .zip(&dh_next)
            .map(|(a, b)| a + b)
            .collect();
        let deltas = step_deltas(params.cell_clip, sc, &grad_h, &dc_next);
        let mut dh_prev = vec![0.0; hidden];
        for (g, dz) in deltas.dz.iter().enumerate() {
            dz_all[g][t * hidden..(t + 1) * hidden].copy_from_slice(dz);
            matvec_t_acc(params.recurrent_matrix(g), dz, &mut dh_prev);
        }
        for (g, dz) in deltas.dz.iter().enumerate() {
            outer_acc(grads.gate_mut(g).1, dz, &sc.h_prev);
        }
        dh_next = dh_prev;
        dc_next = deltas.dc_prev;
    }
    let mut dx = vec![0.0; t_len * input];
    for (g, dz) in dz_all.iter().enumerate() {
        // dW_x = dZᵀ · X  (hidden×input), dX += dZ · W_x
        let gx = grads.gate_mut(g).0;
        gemm(
            hidden,
            t_len,
            input,
            dz,
            Op::T,
            cache.xs.data(),
            Op::N,
            gx.data_mut(),
            false,
        );
        gemm(
            t_len,
            hidden,
            input,
            dz,
            Op::N,
            params.input_matrix(g).data(),
            Op::N,
            &mut dx,
            true,
        );
    }
    for m in grads.matrices() {
        crate::tensor::check_finite("lstm_sequence_backward", m.data())?;
    }
    Ok((
        grads,
        Tensor::from_parts(vec![t_len, input], dx, "lstm_sequence_backward")?,
    ))
}
