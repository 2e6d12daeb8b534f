//! Fraud detection on bipartite multi-relation transaction graphs.
//!
//! The pipeline has four stages:
//!
//! 1. [`graphstore`] loads a transaction graph from CSV files: anchor nodes
//!    (customers/transactions) connected to attribute nodes (address, phone,
//!    payment, ...) under typed relations.
//! 2. [`sampler`] scores every edge with a reciprocal Mahalanobis distance,
//!    ranks two-hop anchors by the weighted mutual neighbor coefficient
//!    (WMNC), picks the silhouette-optimal `k_top` set, and augments it with
//!    an epsilon-random sample of the remaining candidates.
//! 3. [`model`] runs a jump-attentive GNN: per-relation multi-head attention
//!    over the `k_top` anchors plus jump connections that carry averaged
//!    embeddings of the random sample from the last `d` layers into the
//!    final embedding.
//! 4. [`trainer`] / [`evalmetrics`] train with balanced mini-batches on a
//!    chronological split and report ROC-AUC / recall at the F1-optimal
//!    threshold.
//!
//! [`synthgen`] generates synthetic camouflage benchmarks standing in for
//! proprietary transaction data, and [`pipeline`] ties checkpoints, graphs,
//! and sampling together for the `jagnn` command-line tool. Gradients come
//! from [`numeric`], a small reverse-mode autodiff tape over dense `f64`
//! tensors.
//!
//! See the crate examples for runnable walkthroughs of each capability:
//!
//! ```bash
//! cargo run --release --example generate_dataset
//! cargo run --release --example sample_inspect
//! cargo run --release --example autodiff_basics
//! cargo run --release --example train_model
//! cargo run --release --example depth_sweep
//! cargo run --release --example camouflage_case
//! ```

pub mod evalmetrics;
pub mod graphstore;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod synthgen;
pub mod trainer;

pub use graphstore::{NodeId, RelationId, TransactionGraph};


