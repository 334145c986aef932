//! Neural building blocks over channels-last tensors.

pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod posenc;

pub use attention::{scaled_dot_product_attention, AttentionSpec, CrossAttention};
pub use conv::{conv3d, Conv3d, ConvSpec};
pub use linear::{Linear, Mlp};
pub use norm::{apply_stat_updates, batch_norm_eval, batch_norm_train, group_norm, Norm, NormMode, StatUpdate};
pub use pool::global_avg_pool;
pub use posenc::{encode_position, st_positional_encoding};
