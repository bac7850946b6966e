//! Implicit-feedback learning-to-rank matrix factorization with both
//! real-valued and XNOR-binarized user/item representations.
//!
//! The crate trains bilinear ranking models with BPR or adaptive-hinge
//! losses and Adam, optionally through a binarized forward pass with a
//! straight-through sign gradient. Trained sign embeddings pack into
//! 32-bit words and are scored with XOR + popcount kernels; evaluation
//! reports mean reciprocal rank and the benchmark reports per-core
//! scoring throughput (predictions per millisecond) and parameter memory
//! next to each other, one table row per latent dimensionality.
//!
//! The `examples/` directory holds one runnable program per capability:
//!
//! - `parse_and_split` — ratings ingestion, dense id remapping, splits
//! - `train_dense` / `train_binary` — fitting both representations
//! - `binarize_and_score` — packing a model and the two scoring paths
//! - `evaluate_mrr` — ranking evaluation on a held-out split
//! - `benchmark_throughput` — the speed/memory table at desk scale
//! - `hyperparameter_search` — seeded random search over configs
//!
//! A thin `bitrank` binary wires the same operations into subcommands
//! (`split`, `fit`, `search`, `binarize`, `evaluate`, `benchmark`).

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evalbench;
pub mod kernels;
pub mod model;
pub mod training;

pub use error::{Error, Result};
pub use model::{DenseModel, PackedModel, Representation};
pub use training::{Loss, TrainConfig};
