//! The conditional denoiser and its training machinery: a dense f64
//! tensor, a minimal reverse-mode tape over a fixed op set, the selective
//! SSD scan, the block-stack model with its CLS-token condition encoder,
//! Adam training, a tabular oracle denoiser, and checkpoint io.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod scan;
pub mod tabular;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod fdcheck;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use model::{adaln_modulate, DenoiserConfig, DenoiserModel};
pub use scan::{ssd_scan_chunked, ssd_scan_naive, ScanDims};
pub use tabular::TabularDenoiser;
pub use tensor::Tensor;
pub use train::{eval_loss, train_step, vlb_loss_graph, Adam};
