//! Selective adapter freezing for miniature transformers.
//!
//! `safetune` is a desk-scale fine-tuning engine built around one idea: an
//! adapter that barely changes its block's output is not earning its keep —
//! so freeze it, drop its optimizer state, stop retaining the activations
//! that existed only for its gradient, and truncate backpropagation below the
//! deepest adapter still in play. Every part of that sentence is implemented
//! here exactly: importance is linear centered kernel alignment between each
//! block's adapted and ablated outputs, the freezing threshold follows a
//! cubic ramp, and the memory/FLOP ledger is a shape-level replay of the real
//! forward pass, so planned and measured costs agree to the byte.
//!
//! ## Start with the examples
//!
//! The `examples/` directory is the primary interface to the crate: one
//! runnable program per capability, each printing a small self-contained
//! demonstration. Run any of them with
//!
//! ```text
//! cargo run --example <name>
//! ```
//!
//! in dependency order of the ideas:
//!
//! - **`cka_basics`** — linear centered kernel alignment from first
//!   principles: the invariances it satisfies, the degenerate inputs it
//!   refuses, and how one score becomes an adapter importance.
//! - **`schedule_curve`** — the cubic freezing threshold printed as a table:
//!   zero through warm-up, a fast-then-flattening ramp, constant after the
//!   ramp ends; plus the 5% relative-change warm-up rule on real loss traces.
//! - **`resource_accounting`** — the shape-level cost plan against the
//!   engine's measured tape: equal bytes, equal FLOPs, then the whole
//!   bottom-up freezing sweep as a savings table.
//! - **`profile_adapters`** — placement ablation over single-adapter
//!   variants: modeled activation bytes fall as the adapter moves toward the
//!   output, the observation the whole schedule leans on.
//! - **`train_policies`** — the same parity task under `none`, `safe`, and
//!   `random` policies: accuracy parity, different bills.
//! - **`importance_trajectory`** — per-epoch importance scores and the
//!   snapshot-vs-final representation trajectory of a finished run.
//! - **`hessian_spectrum`** — the curvature instrument validated against a
//!   constructed spectrum and a dense Jacobi oracle, then pointed at a
//!   trained model.
//! - **`loss_landscape`** — a filter-normalized 2-D slice of the loss around
//!   a trained model, grid-swept in parallel.
//!
//! ## One thin binary
//!
//! The same capabilities are reachable from the `safetune` binary for
//! scripted use — `train`, `profile`, `analyze`, `report`, each taking a TOML
//! config (`--config`) plus `--out`, `--seed`, and `--policy` overrides. It
//! contains no logic of its own; everything it does goes through [`run`].
//!
//! ## Module map
//!
//! The engine layer is [`tensor`] (row-major `f64` matrices), [`tape`]
//! (reverse-mode autodiff with selective activation retention and a backward
//! cut), [`model`] (a four-layer-by-default encoder with low-rank adapters),
//! [`data`] (synthetic sequence-classification tasks), [`optim`] (decoupled
//! weight decay, per-parameter state that vanishes on freeze), and [`rng`]
//! (named, order-independent streams so determinism survives refactors).
//!
//! The freezing layer is [`importance`] (CKA between each block's adapted
//! and ablated outputs on a held-out probe split), [`schedule`] (warm-up
//! detection, the cubic threshold, and the permanent freeze decision), and
//! [`resource`] (the exact byte/FLOP plan shared by training, profiling, and
//! reporting).
//!
//! The instruments are [`analysis`] (Hessian-vector products, power
//! iteration with deflation, dense oracles, loss-landscape slices, and the
//! adapter-norm penalty) and [`gradcheck`] (central-difference verification
//! of every primitive and of whole models).
//!
//! [`run`] ties the layers into reproducible artifact-writing commands, and
//! [`checkpoint`] gives every parameter a byte-exact round trip.
//!
//! ## Ground rules
//!
//! Everything is `f64`, single-process, CPU-only, and deterministic: a config
//! plus a seed reproduces the metrics stream byte for byte. The only
//! concurrency is a grid-parallel sweep in the landscape instrument, capped
//! by `SAFETUNE_THREADS`. Errors are values ([`Error`]); the binary maps them
//! to exit codes 1 (config/data), 2 (numeric), 3 (IO).

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod importance;
pub mod model;
pub mod optim;
pub mod resource;
pub mod rng;
pub mod run;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
