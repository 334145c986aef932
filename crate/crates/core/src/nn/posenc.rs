//! Factorized sinusoidal spatio-temporal position codes.
//!
//! A code of width D is split into three equal blocks for t, y and x. Each
//! block interleaves sin/cos pairs over the frequency ladder
//! `1 / 10000^(2k / block)`. When D is not a multiple of 6 the trailing
//! channels are zero.

use crate::error::Result;
use crate::tensor::Tensor;

fn block_width(dim: usize) -> usize {
    (dim / 6) * 2
}

fn fill_block(out: &mut [f64], p: f64) {
    let b = out.len();
    for k in 0..b / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / b as f64);
        out[2 * k] = (p * freq).sin();
        out[2 * k + 1] = (p * freq).cos();
    }
}

/// Code for a continuous position (t, y, x).
pub fn encode_position(t: f64, y: f64, x: f64, dim: usize) -> Vec<f64> {
    let b = block_width(dim);
    let mut out = vec![0.0; dim];
    fill_block(&mut out[0..b], t);
    fill_block(&mut out[b..2 * b], y);
    fill_block(&mut out[2 * b..3 * b], x);
    out
}

/// Codes for every integer grid position, shaped `[T, H, W, D]`.
pub fn st_positional_encoding(t: usize, h: usize, w: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t * h * w * dim);
    for ti in 0..t {
        for yi in 0..h {
            for xi in 0..w {
                data.extend(encode_position(ti as f64, yi as f64, xi as f64, dim));
            }
        }
    }
    Tensor::f64(data, &[t, h, w, dim])
}
