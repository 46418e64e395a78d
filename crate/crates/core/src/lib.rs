//! Sequence-aware place recognition over pose-graph subgraphs.
//!
//! Keynodes (a position plus a global descriptor) are cut into overlapping
//! windows along a trajectory. Pairs of windows are fed through a multi-head
//! attention network that alternates intra-window and cross-window message
//! passing, and the refined descriptors are compared with cosine similarity.
//! At retrieval time the scores of every window pair covering a keynode pair
//! are averaged before ranking.
//!
//! Module map:
//!
//! * [`numerics`]: dense matrices, masked kernels, a reverse-mode tape and a
//!   finite-difference gradient checker.
//! * [`pose_graph`]: keynodes, trajectories, subgraph windows and pair labels.
//! * [`agnn`]: the attention network, its parameters and checkpoints.
//! * [`objective`]: similarity, probability and the masked BCE loss.
//! * [`trainer`]: pair sampling, padded batches, Adam and the training loop.
//! * [`inference`]: averaged scoring, top-K ranking and recall@N.
//! * [`synthdata`]: synthetic revisit courses with noisy place descriptors.
//! * [`io`]: keynode CSV files.
//! * [`verify`]: self-check suites used by `pgat verify`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agnn;
pub mod error;
pub mod inference;
pub mod io;
pub mod numerics;
pub mod objective;
pub mod pose_graph;
pub mod synthdata;
pub mod trainer;
pub mod verify;

pub use error::{PgatError, Result};
