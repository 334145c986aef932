use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over T, H, W of a `[N, T, H, W, C]` map.
pub fn global_avg_pool(f: &Tensor) -> Result<Tensor> {
    let s = f.shape();
    if s.len() != 5 {
        return Err(Error::invalid(format!("global_avg_pool expects rank 5, got {s:?}")));
    }
    f.reshape(&[s[0], s[1] * s[2] * s[3], s[4]])?.mean_axis(1)
}
