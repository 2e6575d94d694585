//! Cross-modal pre-training toolkit for urban region representations.
//!
//! - [`scene_graph`]: caption content as phrase multisets
//! - [`capture`]: scene-graph similarity and consensus caption selection
//! - [`refinery`]: divide-and-conquer caption refinement over model clients
//! - [`ipsi`]: positional-table stretching for long text
//! - [`pretrain`]: momentum self-distillation contrastive training
//! - [`downstream`]: frozen-feature region regression and evaluation

pub mod capture;
pub mod downstream;
pub mod ipsi;
pub mod pretrain;
pub mod refinery;
pub mod scene_graph;
pub mod seed;
