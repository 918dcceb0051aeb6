//! Vision transformer backbone and the frozen surrogate text encoder.

mod block;
mod text;
mod vit;

pub use block::{block_forward, msa, AttentionVars, BlockParams, BlockVars};
pub use text::{text_surrogate_encode, SurrogateVars, TextSurrogateConfig, TextSurrogateParams};
pub use vit::{patchify, vit_forward, BackboneOutput, PatchSequence, VitConfig, VitParams, VitVars, INIT_STD};
