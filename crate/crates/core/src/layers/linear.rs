//! Affine layers and the ReLU nonlinearity, batched over rows.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Tensor};

/// `y = x · w + b` for `x: B×in`, `w: in×out`, `b: out`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, input) = (x.rows(), x.cols());
    if x.rank() != 2 || w.rank() != 2 || w.shape()[0] != input || b.shape() != [w.cols()] {
        return Err(Error::shape("linear_forward", x.shape(), w.shape()));
    }
    let out_dim = w.cols();
    let mut y = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        y.extend_from_slice(b.data());
    }
    gemm(rows, input, out_dim, x.data(), Op::N, w.data(), Op::N, &mut y, true);
    Tensor::from_parts(vec![rows, out_dim], y, "linear_forward")
}

/// Returns `(grad_w, grad_b, grad_x)` for upstream gradient `dy: B×out`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, input, out_dim) = (x.rows(), x.cols(), w.cols());
    if dy.shape() != [rows, out_dim] || w.shape() != [input, out_dim] {
        return Err(Error::shape("linear_backward", dy.shape(), &[rows, out_dim]));
    }
    let mut gw = vec![0.0; input * out_dim];
    gemm(input, rows, out_dim, x.data(), Op::T, dy.data(), Op::N, &mut gw, false);
    let mut gb = vec![0.0; out_dim];
    for row in dy.data().chunks(out_dim) {
        for (g, d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut gx = vec![0.0; rows * input];
    gemm(rows, out_dim, input, dy.data(), Op::N, w.data(), Op::T, &mut gx, false);
    Ok((
        Tensor::from_parts(vec![input, out_dim], gw, "linear_backward")?,
        Tensor::from_parts(vec![out_dim], gb, "linear_backward")?,
        Tensor::from_parts(vec![rows, input], gx, "linear_backward")?,
    ))
}

/// Masks `dy` by the positive part of the ReLU output `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::shape("relu_backward", y.shape(), dy.shape()));
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::from_parts(y.shape().to_vec(), data, "relu_backward")
}
