//! Bidirectional LSTM: independent left-to-right and right-to-left passes from
//! zero states, concatenated per frame as `[h_fwd ; h_bwd]`.

use super::lstm::{lstm_sequence, lstm_sequence_backward, LstmParams, SequenceCache};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BlstmCache {
    fwd: SequenceCache,
    bwd: SequenceCache,
}

pub fn blstm_forward(fwd: &LstmParams, bwd: &LstmParams, xs: &Tensor) -> Result<Tensor> {
    blstm_forward_cached(fwd, bwd, xs).map(|(y, _)| y)
}

pub fn blstm_forward_cached(
    fwd: &LstmParams,
    bwd: &LstmParams,
    xs: &Tensor,
) -> Result<(Tensor, BlstmCache)> {
    if xs.rank() != 2 || xs.rows() == 0 {
        return Err(Error::Data("BLSTM needs a non-empty T×input sequence".into()));
    }
    if fwd.input() != bwd.input() {
        return Err(Error::shape(
            "blstm_forward",
            fwd.w_xi.shape(),
            bwd.w_xi.shape(),
        ));
    }
    let (yf, cf) = lstm_sequence(fwd, xs, false)?;
    let (yb, cb) = lstm_sequence(bwd, xs, true)?;
    let (hf, hb) = (fwd.hidden(), bwd.hidden());
    let mut out = Vec::with_capacity(xs.rows() * (hf + hb));
    for t in 0..xs.rows() {
        out.extend_from_slice(yf.row(t));
        out.extend_from_slice(yb.row(t));
    }
    Ok((
        Tensor::from_parts(vec![xs.rows(), hf + hb], out, "blstm_forward")?,
        BlstmCache { fwd: cf, bwd: cb },
    ))
}

/// Returns `(grad_fwd, grad_bwd, grad_xs)`.
pub fn blstm_backward(
    fwd: &LstmParams,
    bwd: &LstmParams,
    cache: &BlstmCache,
    grad_out: &Tensor,
) -> Result<(LstmParams, LstmParams, Tensor)> {
    let (hf, hb) = (fwd.hidden(), bwd.hidden());
    let t_len = grad_out.rows();
    if grad_out.cols() != hf + hb {
        return Err(Error::shape(
            "blstm_backward",
            grad_out.shape(),
            &[t_len, hf + hb],
        ));
    }
    let mut gf = Vec::with_capacity(t_len * hf);
    let mut gb = Vec::with_capacity(t_len * hb);
    for t in 0..t_len {
        let row = grad_out.row(t);
        gf.extend_from_slice(&row[..hf]);
        gb.extend_from_slice(&row[hf..]);
    }
    let (pf, dxf) = lstm_sequence_backward(fwd, &cache.fwd, &Tensor::matrix(t_len, hf, gf)?)?;
    let (pb, dxb) = lstm_sequence_backward(bwd, &cache.bwd, &Tensor::matrix(t_len, hb, gb)?)?;
    Ok((pf, pb, crate::tensor::add(&dxf, &dxb)?))
}
