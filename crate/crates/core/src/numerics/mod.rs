//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::masks::AttnMask;

/// Row softmax over the keys `mask` allows; disallowed entries are exactly 0.
pub fn masked_softmax(logits: &Tensor, mask: &AttnMask) -> Result<Tensor> {
    tape::masked_softmax_impl(logits, Some(mask))
}
