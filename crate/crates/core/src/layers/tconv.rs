//! Time convolution: a stride-1 linear map over a symmetric, zero-padded
//! window of `width` consecutive frames.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Tensor};

fn check_width(width: usize) -> Result<()> {
    if width % 2 == 0 {
        return Err(Error::Config(format!(
            "time convolution width must be odd, got {width}"
        )));
    }
    Ok(())
}

/// Stacks frames `t-⌊k/2⌋ ..= t+⌊k/2⌋` into each row; out-of-range frames are zeros.
pub fn gather_windows(xs: &Tensor, width: usize) -> Result<Tensor> {
    check_width(width)?;
    let (t_len, dim) = (xs.rows(), xs.cols());
    let half = (width / 2) as isize;
    let mut out = vec![0.0; t_len * width * dim];
    for t in 0..t_len {
        for k in 0..width {
            let src = t as isize + k as isize - half;
            if src >= 0 && (src as usize) < t_len {
                let dst = (t * width + k) * dim;
                out[dst..dst + dim].copy_from_slice(xs.row(src as usize));
            }
        }
    }
    Tensor::from_parts(vec![t_len, width * dim], out, "gather_windows")
}

/// `xs: T×d`, `kernel: (width·d)×out` → `T×out`.
pub fn time_convolution(xs: &Tensor, kernel: &Tensor, width: usize) -> Result<Tensor> {
    check_width(width)?;
    if xs.rank() != 2 || kernel.rank() != 2 || kernel.shape()[0] != width * xs.cols() {
        return Err(Error::shape("time_convolution", xs.shape(), kernel.shape()));
    }
    let windows = gather_windows(xs, width)?;
    let (t_len, out_dim) = (xs.rows(), kernel.cols());
    let mut out = vec![0.0; t_len * out_dim];
    gemm(
        t_len,
        windows.cols(),
        out_dim,
        windows.data(),
        Op::N,
        kernel.data(),
        Op::N,
        &mut out,
        false,
    );
    Tensor::from_parts(vec![t_len, out_dim], out, "time_convolution")
}

/// Returns `(grad_kernel, grad_xs)`.
pub fn time_convolution_backward(
    xs: &Tensor,
    kernel: &Tensor,
    width: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let windows = gather_windows(xs, width)?;
    let (t_len, dim, out_dim) = (xs.rows(), xs.cols(), kernel.cols());
    if dy.shape() != [t_len, out_dim] || kernel.shape()[0] != windows.cols() {
        return Err(Error::shape(
            "time_convolution_backward",
            dy.shape(),
            &[t_len, out_dim],
        ));
    }
    let wd = windows.cols();
    let mut gk = vec![0.0; wd * out_dim];
    gemm(wd, t_len, out_dim, windows.data(), Op::T, dy.data(), Op::N, &mut gk, false);
    let mut gwin = vec![0.0; t_len * wd];
    gemm(t_len, out_dim, wd, dy.data(), Op::N, kernel.data(), Op::T, &mut gwin, false);
    let half = (width / 2) as isize;
    let mut gx = vec![0.0; t_len * dim];
    for t in 0..t_len {
        for k in 0..width {
            let src = t as isize + k as isize - half;
            if src >= 0 && (src as usize) < t_len {
                let s = src as usize * dim;
                let w = (t * width + k) * dim;
                for j in 0..dim {
                    gx[s + j] += gwin[w + j];
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![wd, out_dim], gk, "time_convolution_backward")?,
        Tensor::from_parts(vec![t_len, dim], gx, "time_convolution_backward")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn width_one_is_per_frame_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = random(&mut rng, 6, 3);
        let k = random(&mut rng, 3, 4);
        let y = time_convolution(&xs, &k, 1).unwrap();
        assert!(y.max_abs_diff(&matmul(&xs, &k).unwrap()) < 1e-15);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = random(&mut rng, 4, 2);
        let y = time_convolution(&xs, &Tensor::zeros(&[10, 3]), 5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_width_rejected() {
        let xs = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            time_convolution(&xs, &Tensor::zeros(&[8, 3]), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn matches_window_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t_len, d, k, out) = (4, 2, 3, 5);
        let xs = random(&mut rng, t_len, d);
        let kernel = random(&mut rng, k * d, out);
        let y = time_convolution(&xs, &kernel, k).unwrap();
        for t in 0..t_len {
            // explicit window: frames t-1, t, t+1, zero outside [0, T)
            let mut window = Vec::new();
            for off in -1isize..=1 {
                let s = t as isize + off;
                if s < 0 || s >= t_len as isize {
                    window.extend(std::iter::repeat(0.0).take(d));
                } else {
                    window.extend_from_slice(xs.row(s as usize));
                }
            }
            for j in 0..out {
                let v: f64 = (0..k * d).map(|p| window[p] * kernel.get(&[p, j])).sum();
                assert!((y.get(&[t, j]) - v).abs() < 1e-12);
            }
        }
    }
}
