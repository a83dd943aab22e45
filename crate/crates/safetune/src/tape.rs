//! Reverse-mode autodiff on a flat tape, rebuilt every training step (define-by-run).
//!
//! The engine is organized around one idea: the set of tensors a node keeps alive for
//! backward is decided by a single table ([`save_spec`]), and the same table drives both
//! the real recorder ([`RealCtx`], which copies those tensors onto the tape) and the
//! shape-level planner ([`ShapeCtx`], which only sums their byte sizes). The resource
//! model and the engine therefore cannot drift apart; tests assert exact equality.
//!
//! Gradient participation is ordinary requires-grad propagation: a node's output requires
//! gradients iff any operand does, and leaf flags come from parameter trainability. When
//! every adapter below block `k` is frozen, every node in blocks `< k` propagates
//! `rg = false`, so nothing below the cut retains activations and backward never visits
//! it. Gradients above the cut are bit-identical to a full backward because gradient flow
//! is strictly top-down and the recorded op sequence does not depend on the freeze mask.
//!
//! Dropout masks are pure functions of (run seed, step, node id, element index) and are
//! regenerated during backward; they are never stored.

use crate::error::{Error, Result};
use crate::rng::counter_uniform;
use crate::tensor::Tensor;

// ── parameters ──────────────────────────────────────────────────────────────

/// Shape and trainability of one parameter; the value lives in [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

impl ParamMeta {
    pub fn elems(&self) -> usize {
        self.rows * self.cols
    }
}

/// Named parameter set. Metas (shapes + trainability) are usable without values so the
/// resource model can plan a step for a config it never instantiates.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub metas: Vec<ParamMeta>,
    pub values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        debug_assert!(self.pid(&name).is_none(), "duplicate parameter {name}");
        self.metas.push(ParamMeta { name, rows: value.rows, cols: value.cols, trainable });
        self.values.push(value);
        self.metas.len() - 1
    }

    pub fn pid(&self, name: &str) -> Option<usize> {
        self.metas.iter().position(|m| m.name == name)
    }

    pub fn value(&self, pid: usize) -> &Tensor {
        &self.values[pid]
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    /// Total trainable scalar count (drives optimizer-byte accounting).
    pub fn trainable_param_count(&self) -> u64 {
        self.metas.iter().filter(|m| m.trainable).map(|m| m.elems() as u64).sum()
    }

    pub fn total_param_count(&self) -> u64 {
        self.metas.iter().map(|m| m.elems() as u64).sum()
    }
}

// ── tape structure ──────────────────────────────────────────────────────────

/// Which stretch of the network a node belongs to; drives cut accounting and the
/// per-layer byte/FLOP breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Embed,
    Block(usize),
    Head,
}

/// Operand source: another node's output or a parameter (read from the store at
/// backward time, never copied onto the tape).
#[derive(Debug, Clone, Copy)]
pub enum Src {
    Node(usize),
    Param(usize),
}

#[derive(Debug, Clone)]
pub enum Op {
    Matmul,
    /// Elementwise add; the second operand may be a `[1, d]` row vector broadcast
    /// over rows (bias). No other broadcasting exists in this engine.
    Add,
    Scale(f64),
    Transpose,
    RowSoftmax,
    /// Operands: x, gamma `[1, d]`, beta `[1, d]`. Per-row statistics, recomputed in
    /// backward from the saved input.
    LayerNorm { eps: f64 },
    Gelu,
    /// Operand: the table parameter. Row indices are op metadata, not activations.
    EmbeddingLookup { ids: Vec<u32> },
    /// Operand: logits `[n, c]`. Fused log-softmax; labels are op metadata.
    CrossEntropyMean { labels: Vec<u32> },
    /// Drop probability `p`; mask regenerated from (seed, step, node id, element).
    Dropout { p: f64, seed: u64, step: u64 },
    SliceRows { from: usize, n: usize },
    SliceCols { from: usize, n: usize },
    ConcatRows,
    ConcatCols,
    /// Mean over each consecutive `group` of rows: `[g*group, d] -> [g, d]`.
    MeanPoolRows { group: usize },
    /// Per-row-block `A_i·B_iᵀ`: both operands `[g·block, d]`, output `[g·block, block]`.
    /// Attention scores for every sequence in one node instead of one node per
    /// (sequence, head) pair.
    BlockMatmulNT { block: usize },
    /// Per-row-block `A_i·B_i`: `A [g·block, block]`, `B [g·block, d]`, output
    /// `[g·block, d]`. The attention-weighted value mix, batched the same way.
    BlockMatmulNN { block: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Transpose => "transpose",
            Op::RowSoftmax => "row_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
            Op::Dropout { .. } => "dropout",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::MeanPoolRows { .. } => "mean_pool_rows",
            Op::BlockMatmulNT { .. } => "block_matmul_nt",
            Op::BlockMatmulNN { .. } => "block_matmul_nn",
        }
    }
}

/// A tensor the tape holds for backward, owned by the consuming node.
#[derive(Debug, Clone)]
pub enum Saved {
    /// Copy of operand `slot`'s value.
    Operand { slot: usize, t: Tensor },
    /// The node's own output (row_softmax) or softmax probabilities (cross-entropy).
    Own(Tensor),
}

#[derive(Debug)]
pub struct Node {
    pub op: Op,
    pub srcs: Vec<Src>,
    /// Operand shapes at record time; backward needs them for scatter/split grads.
    pub src_dims: Vec<(usize, usize)>,
    pub rows: usize,
    pub cols: usize,
    /// Gradient flows to or through this node.
    pub rg: bool,
    pub region: Region,
    pub saved: Vec<Saved>,
}

impl Node {
    /// Spec-facing retention flag: does this node hold saved activations for backward?
    pub fn retained(&self) -> bool {
        !self.saved.is_empty()
    }

    pub fn saved_bytes(&self) -> u64 {
        self.saved
            .iter()
            .map(|s| match s {
                Saved::Operand { t, .. } | Saved::Own(t) => t.byte_size(),
            })
            .sum()
    }
}

/// Recorded step: nodes in execution order plus measured forward cost.
#[derive(Debug)]
pub struct Tape {
    pub nodes: Vec<Node>,
    /// Deepest block index that still needs gradients; `n_blocks` when only the head does.
    pub cut: usize,
    pub n_blocks: usize,
    grad_enabled: bool,
    fwd_flops: u64,
    retained_bytes: u64,
}

impl Tape {
    pub fn fwd_flops(&self) -> u64 {
        self.fwd_flops
    }

    pub fn retained_bytes(&self) -> u64 {
        self.retained_bytes
    }

    /// Testing hook for the "backward without gradient tracking" contract.
    pub fn disabled() -> Tape {
        Tape { nodes: Vec::new(), cut: 0, n_blocks: 0, grad_enabled: false, fwd_flops: 0, retained_bytes: 0 }
    }
}

// ── the single-source retention and FLOP table ─────────────────────────────

/// Operand descriptor for the planning table: shape, gradient flag, and whether the
/// value is static (a parameter: always available, never counted as an activation).
#[derive(Debug, Clone, Copy)]
pub struct SrcMeta {
    pub rows: usize,
    pub cols: usize,
    pub rg: bool,
    pub is_static: bool,
}

fn meta_of(h: H) -> SrcMeta {
    SrcMeta { rows: h.rows, cols: h.cols, rg: h.rg, is_static: h.is_param() }
}

/// What a node must keep for backward. One definition for the engine and the model.
#[derive(Debug, Default)]
pub struct SaveSpec {
    /// Operand slots whose values are copied onto the tape.
    pub operands: Vec<usize>,
    /// Own-output elements held (row_softmax output, cross-entropy probabilities).
    pub own_elems: usize,
}

impl SaveSpec {
    pub fn bytes(&self, srcs: &[SrcMeta]) -> u64 {
        let op_bytes: usize = self.operands.iter().map(|&i| srcs[i].rows * srcs[i].cols * 8).sum();
        (op_bytes + self.own_elems * 8) as u64
    }
}

/// Retention table. Given an op, its operands, and the output gradient flag, list
/// exactly the tensors backward will read that are not parameters:
///
/// | op                | keeps (when the node participates in backward)           |
/// |-------------------|----------------------------------------------------------|
/// | matmul            | operand `a` iff `b` needs grad; `b` iff `a` needs grad   |
/// | block_matmul_*    | same rule as matmul                                      |
/// | add, scale        | nothing                                                  |
/// | transpose         | nothing                                                  |
/// | row_softmax       | its own output                                           |
/// | layer_norm        | input `x` iff `x` or gamma needs grad                    |
/// | gelu              | its input                                                |
/// | embedding_lookup  | nothing (indices are op metadata)                        |
/// | cross_entropy     | softmax probabilities (same shape as logits)             |
/// | dropout           | nothing (mask regenerated from its counter key)          |
/// | slice/concat/pool | nothing (pure indexing)                                  |
///
/// Parameters are excluded: their values are read from the store at backward time and
/// belong to parameter bytes, not activation bytes.
pub fn save_spec(op: &Op, srcs: &[SrcMeta], out_rg: bool) -> SaveSpec {
    let mut spec = SaveSpec::default();
    if !out_rg {
        return spec;
    }
    let mut keep = |slot: usize, needed: bool| {
        if needed && !srcs[slot].is_static {
            spec.operands.push(slot);
        }
    };
    match op {
        Op::Matmul | Op::BlockMatmulNT { .. } | Op::BlockMatmulNN { .. } => {
            keep(0, srcs[1].rg);
            keep(1, srcs[0].rg);
        }
        Op::RowSoftmax => spec.own_elems = srcs[0].rows * srcs[0].cols,
        Op::LayerNorm { .. } => keep(0, srcs[0].rg || srcs[1].rg),
        Op::Gelu => keep(0, srcs[0].rg),
        Op::CrossEntropyMean { .. } => {
            if srcs[0].rg {
                spec.own_elems = srcs[0].rows * srcs[0].cols;
            }
        }
        _ => {}
    }
    spec
}

/// Forward FLOP model, published per primitive:
/// matmul `2·m·k·n`; add/scale 1 per output element; row_softmax 5 and layer_norm 8 per
/// element; gelu 10; dropout 2 (training); cross-entropy 5 per logit + 2 per row;
/// mean-pool 1 per input + 1 per output element; transpose, embedding gathers, slices
/// and concats 0 (pure data movement).
pub fn fwd_flop_model(op: &Op, srcs: &[SrcMeta], out_rows: usize, out_cols: usize) -> u64 {
    let out = (out_rows * out_cols) as u64;
    match op {
        Op::Matmul => 2 * (srcs[0].rows * srcs[0].cols * srcs[1].cols) as u64,
        // Per-block `2·block·k·n` summed over blocks collapses to the same `2·m·k·n`
        // with m the stacked row count and n the output width.
        Op::BlockMatmulNT { .. } | Op::BlockMatmulNN { .. } => {
            2 * (srcs[0].rows * srcs[0].cols * out_cols) as u64
        }
        Op::Add | Op::Scale(_) => out,
        Op::Transpose => 0,
        Op::RowSoftmax => 5 * out,
        Op::LayerNorm { .. } => 8 * out,
        Op::Gelu => 10 * out,
        Op::EmbeddingLookup { .. } => 0,
        Op::CrossEntropyMean { .. } => {
            let (n, c) = (srcs[0].rows as u64, srcs[0].cols as u64);
            5 * n * c + 2 * n
        }
        Op::Dropout { .. } => 2 * out,
        Op::SliceRows { .. } | Op::SliceCols { .. } | Op::ConcatRows | Op::ConcatCols => 0,
        Op::MeanPoolRows { .. } => (srcs[0].rows * srcs[0].cols) as u64 + out,
    }
}

/// Backward FLOP model, counting only gradients that are actually computed (an operand
/// without `rg` — a frozen or base parameter, or anything below the cut — costs
/// nothing): matmul `2·m·k·n` per computed side; add/scale 1 per element per side;
/// row_softmax 4 per element; layer_norm 9 per element for dx plus 2 (gamma) and
/// 1 (beta) per element when trainable; gelu 12; dropout 2; cross-entropy 2; mean-pool
/// and embedding scatter 1 per input element; structural ops 0.
pub fn bwd_flop_model(op: &Op, srcs: &[SrcMeta], out_rows: usize, out_cols: usize) -> u64 {
    let out = (out_rows * out_cols) as u64;
    match op {
        Op::Matmul => {
            let mkn = (srcs[0].rows * srcs[0].cols * srcs[1].cols) as u64;
            (srcs[0].rg as u64 + srcs[1].rg as u64) * 2 * mkn
        }
        Op::BlockMatmulNT { .. } | Op::BlockMatmulNN { .. } => {
            let mkn = (srcs[0].rows * srcs[0].cols * out_cols) as u64;
            (srcs[0].rg as u64 + srcs[1].rg as u64) * 2 * mkn
        }
        Op::Add => srcs.iter().filter(|s| s.rg).count() as u64 * out,
        Op::Scale(_) => {
            if srcs[0].rg {
                out
            } else {
                0
            }
        }
        Op::Transpose => 0,
        Op::RowSoftmax => 4 * out,
        Op::LayerNorm { .. } => {
            let elems = (srcs[0].rows * srcs[0].cols) as u64;
            let mut f = 0;
            if srcs[0].rg {
                f += 9 * elems;
            }
            if srcs[1].rg {
                f += 2 * elems;
            }
            if srcs[2].rg {
                f += elems;
            }
            f
        }
        Op::Gelu => {
            if srcs[0].rg {
                12 * out
            } else {
                0
            }
        }
        Op::EmbeddingLookup { .. } => {
            if srcs[0].rg {
                out
            } else {
                0
            }
        }
        Op::CrossEntropyMean { .. } => {
            if srcs[0].rg {
                2 * (srcs[0].rows * srcs[0].cols) as u64
            } else {
                0
            }
        }
        Op::Dropout { .. } => {
            if srcs[0].rg {
                2 * out
            } else {
                0
            }
        }
        Op::SliceRows { .. } | Op::SliceCols { .. } | Op::ConcatRows | Op::ConcatCols => 0,
        Op::MeanPoolRows { .. } => {
            if srcs[0].rg {
                (srcs[0].rows * srcs[0].cols) as u64
            } else {
                0
            }
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────────

/// C = A·B, ikj order unrolled four deep over `k`: each pass streams four B rows
/// against one resident C row, quartering C-row load/store traffic versus plain axpy.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = Tensor::zeros(m, n);
    for i in 0..m {
        let crow = &mut c.data[i * n..(i + 1) * n];
        let arow = &a.data[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b.data[p * n..(p + 1) * n];
            let b1 = &b.data[(p + 1) * n..(p + 2) * n];
            let b2 = &b.data[(p + 2) * n..(p + 3) * n];
            let b3 = &b.data[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
            p += 1;
        }
    }
    c
}

/// C = A·Bᵀ with B stored `[n, k]`. Dot-product form is memory-hostile (strided B
/// reads), so transpose B once — it is always the small operand here — and reuse the
/// streaming `matmul_nn` kernel.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    matmul_nn(a, &b.transposed())
}

/// C = Aᵀ·B with A stored `[k, m]`; axpy over rows of B.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut c = Tensor::zeros(m, n);
    for i in 0..k {
        let brow = &b.data[i * n..(i + 1) * n];
        for j in 0..m {
            let av = a.data[i * m + j];
            let crow = &mut c.data[j * n..(j + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Per-row-block `C_i = A_i·B_iᵀ`: A and B `[g·block, d]`, C `[g·block, block]`.
/// Row blocks are independent; within one, plain dot products over `d` (rows of both
/// operands are contiguous, so there is nothing to transpose).
pub fn block_matmul_nt_kernel(a: &Tensor, b: &Tensor, block: usize) -> Tensor {
    debug_assert!(block > 0 && a.rows % block == 0);
    debug_assert!(a.rows == b.rows && a.cols == b.cols);
    let d = a.cols;
    let mut c = Tensor::zeros(a.rows, block);
    for g in 0..a.rows / block {
        let base = g * block;
        for i in 0..block {
            let ar = &a.data[(base + i) * d..(base + i + 1) * d];
            let crow = &mut c.data[(base + i) * block..(base + i + 1) * block];
            for (j, cv) in crow.iter_mut().enumerate() {
                let br = &b.data[(base + j) * d..(base + j + 1) * d];
                let mut acc = [0.0f64; 4];
                let chunks = d / 4 * 4;
                let mut p = 0;
                while p < chunks {
                    acc[0] += ar[p] * br[p];
                    acc[1] += ar[p + 1] * br[p + 1];
                    acc[2] += ar[p + 2] * br[p + 2];
                    acc[3] += ar[p + 3] * br[p + 3];
                    p += 4;
                }
                let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
                while p < d {
                    s += ar[p] * br[p];
                    p += 1;
                }
                *cv = s;
            }
        }
    }
    c
}

/// Per-row-block `C_i = A_i·B_i`: A `[g·block, block]`, B `[g·block, d]`,
/// C `[g·block, d]`. Same axpy pattern as `matmul_nn`, block by block.
pub fn block_matmul_nn_kernel(a: &Tensor, b: &Tensor, block: usize) -> Tensor {
    debug_assert!(block > 0 && a.rows % block == 0);
    debug_assert!(a.rows == b.rows && a.cols == block);
    let d = b.cols;
    let mut c = Tensor::zeros(a.rows, d);
    for g in 0..a.rows / block {
        let base = g * block;
        for i in 0..block {
            let arow = &a.data[(base + i) * block..(base + i + 1) * block];
            let crow = &mut c.data[(base + i) * d..(base + i + 1) * d];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b.data[(base + p) * d..(base + p + 1) * d];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

/// Per-row-block `C_i = A_iᵀ·B_i`: A `[g·block, block]`, B `[g·block, d]`,
/// C `[g·block, d]` (each `block×d` product stacks back into its block's rows).
/// Backward companion producing the second-operand gradients of both block products.
pub fn block_matmul_tn_kernel(a: &Tensor, b: &Tensor, block: usize) -> Tensor {
    debug_assert!(block > 0 && a.rows % block == 0);
    debug_assert!(a.rows == b.rows && a.cols == block);
    let d = b.cols;
    let mut c = Tensor::zeros(a.rows, d);
    for g in 0..a.rows / block {
        let base = g * block;
        for p in 0..block {
            let arow = &a.data[(base + p) * block..(base + p + 1) * block];
            let brow = &b.data[(base + p) * d..(base + p + 1) * d];
            for (j, &av) in arow.iter().enumerate() {
                let crow = &mut c.data[(base + j) * d..(base + j + 1) * d];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask_value(p: f64, seed: u64, step: u64, node: u64, elem: u64) -> f64 {
    if counter_uniform(seed, step, node, elem) < p {
        0.0
    } else {
        1.0 / (1.0 - p)
    }
}

// ── recording contexts ──────────────────────────────────────────────────────

/// Handle to a recorded value: index plus cached shape and gradient flag.
#[derive(Debug, Clone, Copy)]
pub struct H {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
    pub rg: bool,
}

impl H {
    #[inline]
    fn is_param(&self) -> bool {
        self.id > usize::MAX / 2
    }

    #[inline]
    fn pid(&self) -> usize {
        usize::MAX - self.id
    }
}

fn to_src(h: H) -> Src {
    if h.is_param() {
        Src::Param(h.pid())
    } else {
        Src::Node(h.id)
    }
}

/// Recorder interface. The model's forward pass is written once against this trait;
/// [`RealCtx`] executes it on values, [`ShapeCtx`] only folds shapes into byte/FLOP
/// totals, which is what keeps the resource model and the engine in exact agreement.
pub trait Rec {
    /// (sequences, tokens per sequence) of the batch being recorded.
    fn batch_dims(&self) -> (usize, usize);
    fn scope(&mut self, region: Region);
    fn param(&mut self, pid: usize) -> H;
    /// Gather batch token rows from an embedding table parameter.
    fn token_embedding(&mut self, table: H) -> Result<H>;
    /// Gather rows 0..seq_len of a positional table, tiled over the batch.
    fn position_embedding(&mut self, table: H) -> Result<H>;
    fn matmul(&mut self, a: H, b: H) -> Result<H>;
    /// Attention scores for every size-`block` row group at once: `C_i = A_i·B_iᵀ`.
    fn block_matmul_nt(&mut self, a: H, b: H, block: usize) -> Result<H>;
    /// Attention-weighted mix for every size-`block` row group: `C_i = A_i·B_i`.
    fn block_matmul_nn(&mut self, a: H, b: H, block: usize) -> Result<H>;
    fn add(&mut self, a: H, b: H) -> Result<H>;
    fn scale(&mut self, a: H, c: f64) -> Result<H>;
    fn transpose(&mut self, a: H) -> Result<H>;
    fn row_softmax(&mut self, a: H) -> Result<H>;
    fn layer_norm(&mut self, x: H, gamma: H, beta: H, eps: f64) -> Result<H>;
    fn gelu(&mut self, a: H) -> Result<H>;
    fn dropout(&mut self, a: H, p: f64) -> Result<H>;
    fn slice_rows(&mut self, a: H, from: usize, n: usize) -> Result<H>;
    fn slice_cols(&mut self, a: H, from: usize, n: usize) -> Result<H>;
    fn concat_rows(&mut self, parts: &[H]) -> Result<H>;
    fn concat_cols(&mut self, parts: &[H]) -> Result<H>;
    fn mean_pool_rows(&mut self, a: H, group: usize) -> Result<H>;
    /// Mean cross-entropy of batch labels against `logits`; scalar output.
    fn cross_entropy_mean(&mut self, logits: H) -> Result<H>;
    /// Mark `h` as a block-boundary activation (collected by probing contexts).
    fn capture(&mut self, h: H);
}

/// One batch of token sequences plus labels, flattened row-major:
/// row `r` of the embedded input is sequence `r / seq_len`, position `r % seq_len`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
    pub n_seqs: usize,
    pub seq_len: usize,
}

enum Mode {
    /// Record a tape for backward; dropout active.
    Train { tape: Tape, seed: u64, step: u64 },
    /// No tape, no dropout; optionally capture block outputs.
    Eval { captures: Vec<Tensor> },
}

/// Value-carrying recorder. Node outputs live in `vals` only until the step ends;
/// what survives for backward is exactly what [`save_spec`] put on the tape.
pub struct RealCtx<'a> {
    params: &'a ParamStore,
    batch: &'a Batch,
    vals: Vec<Tensor>,
    region: Region,
    mode: Mode,
}

impl<'a> RealCtx<'a> {
    pub fn training(
        params: &'a ParamStore,
        batch: &'a Batch,
        n_blocks: usize,
        cut: usize,
        seed: u64,
        step: u64,
    ) -> Self {
        let tape = Tape {
            nodes: Vec::new(),
            cut,
            n_blocks,
            grad_enabled: true,
            fwd_flops: 0,
            retained_bytes: 0,
        };
        RealCtx {
            params,
            batch,
            vals: Vec::new(),
            region: Region::Embed,
            mode: Mode::Train { tape, seed, step },
        }
    }

    pub fn eval(params: &'a ParamStore, batch: &'a Batch) -> Self {
        RealCtx {
            params,
            batch,
            vals: Vec::new(),
            region: Region::Embed,
            mode: Mode::Eval { captures: Vec::new() },
        }
    }

    pub fn value(&self, h: H) -> &Tensor {
        if h.is_param() {
            &self.params.values[h.pid()]
        } else {
            &self.vals[h.id]
        }
    }

    pub fn scalar(&self, h: H) -> f64 {
        self.value(h).data[0]
    }

    /// Finish a training step: drop all transient activations, keep the tape.
    pub fn into_tape(self) -> Tape {
        match self.mode {
            Mode::Train { tape, .. } => tape,
            Mode::Eval { .. } => panic!("into_tape on an eval context"),
        }
    }

    pub fn take_captures(&mut self) -> Vec<Tensor> {
        match &mut self.mode {
            Mode::Eval { captures } => std::mem::take(captures),
            Mode::Train { .. } => Vec::new(),
        }
    }

    /// Record one executed op: store the output value and, in training mode, append a
    /// tape node holding exactly the tensors the retention table dictates.
    fn push(&mut self, op: Op, hs: &[H], out: Tensor, out_rg: bool) -> Result<H> {
        out.check_finite(op.name())?;
        let (rows, cols) = (out.rows, out.cols);
        if let Mode::Train { tape, .. } = &mut self.mode {
            let metas: Vec<SrcMeta> = hs.iter().map(|h| meta_of(*h)).collect();
            let srcs: Vec<Src> = hs.iter().map(|h| to_src(*h)).collect();
            let src_dims: Vec<(usize, usize)> = hs.iter().map(|h| (h.rows, h.cols)).collect();
            let spec = save_spec(&op, &metas, out_rg);
            let mut saved = Vec::with_capacity(spec.operands.len() + 1);
            for &slot in &spec.operands {
                match srcs[slot] {
                    Src::Node(i) => saved.push(Saved::Operand { slot, t: self.vals[i].clone() }),
                    Src::Param(_) => unreachable!("parameters are never saved as activations"),
                }
            }
            tape.fwd_flops += fwd_flop_model(&op, &metas, rows, cols);
            let node = Node { op, srcs, src_dims, rows, cols, rg: out_rg, region: self.region, saved };
            tape.retained_bytes += node.saved_bytes();
            tape.nodes.push(node);
        }
        self.vals.push(out);
        Ok(H { id: self.vals.len() - 1, rows, cols, rg: out_rg })
    }

    /// Attach an own-output save (softmax output / CE probabilities) to the node just
    /// pushed. Separate from `push` because the kernel produces the tensor.
    fn attach_own(&mut self, h: H, own: Tensor) {
        if let Mode::Train { tape, .. } = &mut self.mode {
            if h.rg {
                let node = tape.nodes.last_mut().expect("attach_own follows push");
                tape.retained_bytes += own.byte_size();
                node.saved.push(Saved::Own(own));
            }
        }
    }

    fn next_node_id(&self) -> u64 {
        self.vals.len() as u64
    }
}

fn shape_err(op: &'static str, parts: &[(usize, usize)]) -> Error {
    Error::Shape {
        op,
        detail: parts.iter().map(|(r, c)| format!("[{r}x{c}]")).collect::<Vec<_>>().join(" "),
    }
}

impl<'a> Rec for RealCtx<'a> {
    fn batch_dims(&self) -> (usize, usize) {
        (self.batch.n_seqs, self.batch.seq_len)
    }

    fn scope(&mut self, region: Region) {
        self.region = region;
    }

    fn param(&mut self, pid: usize) -> H {
        let m = &self.params.metas[pid];
        H { id: usize::MAX - pid, rows: m.rows, cols: m.cols, rg: m.trainable }
    }

    fn token_embedding(&mut self, table: H) -> Result<H> {
        let t = &self.params.values[table.pid()];
        let ids = self.batch.tokens.clone();
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= t.rows {
                return Err(Error::Config(format!(
                    "token id {id} out of range for a {}-row embedding table",
                    t.rows
                )));
            }
            out.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(id as usize));
        }
        let rg = table.rg;
        self.push(Op::EmbeddingLookup { ids }, &[table], out, rg)
    }

    fn position_embedding(&mut self, table: H) -> Result<H> {
        let t = &self.params.values[table.pid()];
        let (b, s) = self.batch_dims();
        if s > t.rows {
            return Err(Error::Config(format!(
                "sequence length {s} exceeds the {}-row positional table",
                t.rows
            )));
        }
        let ids: Vec<u32> = (0..b * s).map(|r| (r % s) as u32).collect();
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(id as usize));
        }
        let rg = table.rg;
        self.push(Op::EmbeddingLookup { ids }, &[table], out, rg)
    }

    fn matmul(&mut self, a: H, b: H) -> Result<H> {
        if a.cols != b.rows {
            return Err(shape_err("matmul", &[(a.rows, a.cols), (b.rows, b.cols)]));
        }
        let out = matmul_nn(self.value(a), self.value(b));
        self.push(Op::Matmul, &[a, b], out, a.rg || b.rg)
    }

    fn block_matmul_nt(&mut self, a: H, b: H, block: usize) -> Result<H> {
        if block == 0 || a.rows != b.rows || a.cols != b.cols || a.rows % block != 0 {
            return Err(shape_err(
                "block_matmul_nt",
                &[(a.rows, a.cols), (b.rows, b.cols), (block, block)],
            ));
        }
        let out = block_matmul_nt_kernel(self.value(a), self.value(b), block);
        self.push(Op::BlockMatmulNT { block }, &[a, b], out, a.rg || b.rg)
    }

    fn block_matmul_nn(&mut self, a: H, b: H, block: usize) -> Result<H> {
        if block == 0 || a.rows != b.rows || a.cols != block || a.rows % block != 0 {
            return Err(shape_err(
                "block_matmul_nn",
                &[(a.rows, a.cols), (b.rows, b.cols), (block, block)],
            ));
        }
        let out = block_matmul_nn_kernel(self.value(a), self.value(b), block);
        self.push(Op::BlockMatmulNN { block }, &[a, b], out, a.rg || b.rg)
    }

    fn add(&mut self, a: H, b: H) -> Result<H> {
        let broadcast = b.rows == 1 && a.rows > 1 && b.cols == a.cols;
        if !(broadcast || (a.rows == b.rows && a.cols == b.cols)) {
            return Err(shape_err("add", &[(a.rows, a.cols), (b.rows, b.cols)]));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        if broadcast {
            for r in 0..out.rows {
                let orow = &mut out.data[r * out.cols..(r + 1) * out.cols];
                for (o, &x) in orow.iter_mut().zip(&bv.data) {
                    *o += x;
                }
            }
        } else {
            for (o, &x) in out.data.iter_mut().zip(&bv.data) {
                *o += x;
            }
        }
        self.push(Op::Add, &[a, b], out, a.rg || b.rg)
    }

    fn scale(&mut self, a: H, c: f64) -> Result<H> {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v *= c;
        }
        self.push(Op::Scale(c), &[a], out, a.rg)
    }

    fn transpose(&mut self, a: H) -> Result<H> {
        let out = self.value(a).transposed();
        self.push(Op::Transpose, &[a], out, a.rg)
    }

    fn row_softmax(&mut self, a: H) -> Result<H> {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out.data[r * x.cols..(r + 1) * x.cols];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let own = out.clone();
        let h = self.push(Op::RowSoftmax, &[a], out, a.rg)?;
        self.attach_own(h, own);
        Ok(h)
    }

    fn layer_norm(&mut self, x: H, gamma: H, beta: H, eps: f64) -> Result<H> {
        if gamma.rows != 1 || gamma.cols != x.cols || beta.rows != 1 || beta.cols != x.cols {
            return Err(shape_err(
                "layer_norm",
                &[(x.rows, x.cols), (gamma.rows, gamma.cols), (beta.rows, beta.cols)],
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let d = xv.cols as f64;
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let rstd = 1.0 / (var + eps).sqrt();
            let orow = &mut out.data[r * xv.cols..(r + 1) * xv.cols];
            for c in 0..xv.cols {
                orow[c] = (row[c] - mu) * rstd * gv.data[c] + bv.data[c];
            }
        }
        let rg = x.rg || gamma.rg || beta.rg;
        self.push(Op::LayerNorm { eps }, &[x, gamma, beta], out, rg)
    }

    fn gelu(&mut self, a: H) -> Result<H> {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for (o, &v) in out.data.iter_mut().zip(&x.data) {
            *o = gelu_scalar(v);
        }
        self.push(Op::Gelu, &[a], out, a.rg)
    }

    fn dropout(&mut self, a: H, p: f64) -> Result<H> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p={p} outside [0, 1)")));
        }
        let (seed, step) = match &self.mode {
            Mode::Train { seed, step, .. } => (*seed, *step),
            Mode::Eval { .. } => {
                // Eval contexts never drop; identity keeps call sites uniform.
                let out = self.value(a).clone();
                return self.push(Op::Dropout { p: 0.0, seed: 0, step: 0 }, &[a], out, a.rg);
            }
        };
        let node = self.next_node_id();
        let x = self.value(a);
        let mut out = x.clone();
        for (e, v) in out.data.iter_mut().enumerate() {
            *v *= dropout_mask_value(p, seed, step, node, e as u64);
        }
        self.push(Op::Dropout { p, seed, step }, &[a], out, a.rg)
    }

    fn slice_rows(&mut self, a: H, from: usize, n: usize) -> Result<H> {
        if from + n > a.rows {
            return Err(shape_err("slice_rows", &[(a.rows, a.cols), (from, n)]));
        }
        let x = self.value(a);
        let out = Tensor::from_vec(n, x.cols, x.data[from * x.cols..(from + n) * x.cols].to_vec())?;
        self.push(Op::SliceRows { from, n }, &[a], out, a.rg)
    }

    fn slice_cols(&mut self, a: H, from: usize, n: usize) -> Result<H> {
        if from + n > a.cols {
            return Err(shape_err("slice_cols", &[(a.rows, a.cols), (from, n)]));
        }
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, n);
        for r in 0..x.rows {
            out.data[r * n..(r + 1) * n].copy_from_slice(&x.row(r)[from..from + n]);
        }
        self.push(Op::SliceCols { from, n }, &[a], out, a.rg)
    }

    fn concat_rows(&mut self, parts: &[H]) -> Result<H> {
        let cols = parts[0].cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(shape_err(
                "concat_rows",
                &parts.iter().map(|p| (p.rows, p.cols)).collect::<Vec<_>>(),
            ));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|p| p.rg);
        self.push(Op::ConcatRows, parts, out, rg)
    }

    fn concat_cols(&mut self, parts: &[H]) -> Result<H> {
        let rows = parts[0].rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(shape_err(
                "concat_cols",
                &parts.iter().map(|p| (p.rows, p.cols)).collect::<Vec<_>>(),
            ));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pc = p.cols;
            for r in 0..rows {
                let src = self.value(*p).row(r).to_vec();
                out.data[r * cols + off..r * cols + off + pc].copy_from_slice(&src);
            }
            off += pc;
        }
        let rg = parts.iter().any(|p| p.rg);
        self.push(Op::ConcatCols, parts, out, rg)
    }

    fn mean_pool_rows(&mut self, a: H, group: usize) -> Result<H> {
        if group == 0 || a.rows % group != 0 {
            return Err(shape_err("mean_pool_rows", &[(a.rows, a.cols), (group, 0)]));
        }
        let x = self.value(a);
        let g = a.rows / group;
        let mut out = Tensor::zeros(g, x.cols);
        for b in 0..g {
            for r in 0..group {
                let row = x.row(b * group + r);
                let orow = &mut out.data[b * x.cols..(b + 1) * x.cols];
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for v in &mut out.data {
            *v /= group as f64;
        }
        self.push(Op::MeanPoolRows { group }, &[a], out, a.rg)
    }

    fn cross_entropy_mean(&mut self, logits: H) -> Result<H> {
        let labels = self.batch.labels.clone();
        let x = self.value(logits);
        if labels.len() != x.rows {
            return Err(shape_err("cross_entropy_mean", &[(x.rows, x.cols), (labels.len(), 1)]));
        }
        let mut probs = Tensor::zeros(x.rows, x.cols);
        let mut loss = 0.0;
        for r in 0..x.rows {
            let row = x.row(r);
            let y = labels[r] as usize;
            if y >= x.cols {
                return Err(Error::Config(format!("label {y} out of range for {} classes", x.cols)));
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let prow = &mut probs.data[r * x.cols..(r + 1) * x.cols];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            loss -= (row[y] - m - sum.ln()) / x.rows as f64;
        }
        let out = Tensor::scalar(loss);
        let rg = logits.rg;
        let h = self.push(Op::CrossEntropyMean { labels }, &[logits], out, rg)?;
        self.attach_own(h, probs);
        Ok(h)
    }

    fn capture(&mut self, h: H) {
        let t = self.value(h).clone();
        if let Mode::Eval { captures } = &mut self.mode {
            captures.push(t);
        }
    }
}

// ── shape-level planner ─────────────────────────────────────────────────────

/// Per-region accumulation of planned retention bytes and FLOPs.
#[derive(Debug, Default, Clone)]
pub struct RegionCost {
    pub retained_bytes: u64,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
}

/// Shape-only recorder: runs the same model code as [`RealCtx`] but touches no values.
pub struct ShapeCtx<'a> {
    metas: &'a [ParamMeta],
    next_id: usize,
    region: Region,
    n_seqs: usize,
    seq_len: usize,
    pub embed: RegionCost,
    pub blocks: Vec<RegionCost>,
    pub head: RegionCost,
}

impl<'a> ShapeCtx<'a> {
    pub fn new(metas: &'a [ParamMeta], n_blocks: usize, n_seqs: usize, seq_len: usize) -> Self {
        ShapeCtx {
            metas,
            next_id: 0,
            region: Region::Embed,
            n_seqs,
            seq_len,
            embed: RegionCost::default(),
            blocks: vec![RegionCost::default(); n_blocks],
            head: RegionCost::default(),
        }
    }

    pub fn total(&self) -> RegionCost {
        let mut t = RegionCost::default();
        for c in std::iter::once(&self.embed).chain(&self.blocks).chain(std::iter::once(&self.head))
        {
            t.retained_bytes += c.retained_bytes;
            t.fwd_flops += c.fwd_flops;
            t.bwd_flops += c.bwd_flops;
        }
        t
    }

    fn plan(&mut self, op: Op, hs: &[H], rows: usize, cols: usize, rg: bool) -> H {
        let metas: Vec<SrcMeta> = hs.iter().map(|h| meta_of(*h)).collect();
        let spec = save_spec(&op, &metas, rg);
        let bytes = spec.bytes(&metas);
        let fwd = fwd_flop_model(&op, &metas, rows, cols);
        let bwd = if rg { bwd_flop_model(&op, &metas, rows, cols) } else { 0 };
        let cost = match self.region {
            Region::Embed => &mut self.embed,
            Region::Block(i) => &mut self.blocks[i],
            Region::Head => &mut self.head,
        };
        cost.retained_bytes += bytes;
        cost.fwd_flops += fwd;
        cost.bwd_flops += bwd;
        let id = self.next_id;
        self.next_id += 1;
        H { id, rows, cols, rg }
    }
}

impl<'a> Rec for ShapeCtx<'a> {
    fn batch_dims(&self) -> (usize, usize) {
        (self.n_seqs, self.seq_len)
    }

    fn scope(&mut self, region: Region) {
        self.region = region;
    }

    fn param(&mut self, pid: usize) -> H {
        let m = &self.metas[pid];
        H { id: usize::MAX - pid, rows: m.rows, cols: m.cols, rg: m.trainable }
    }

    fn token_embedding(&mut self, table: H) -> Result<H> {
        let (b, s) = self.batch_dims();
        let rg = table.rg;
        Ok(self.plan(Op::EmbeddingLookup { ids: Vec::new() }, &[table], b * s, table.cols, rg))
    }

    fn position_embedding(&mut self, table: H) -> Result<H> {
        let (b, s) = self.batch_dims();
        let rg = table.rg;
        Ok(self.plan(Op::EmbeddingLookup { ids: Vec::new() }, &[table], b * s, table.cols, rg))
    }

    fn matmul(&mut self, a: H, b: H) -> Result<H> {
        Ok(self.plan(Op::Matmul, &[a, b], a.rows, b.cols, a.rg || b.rg))
    }

    fn block_matmul_nt(&mut self, a: H, b: H, block: usize) -> Result<H> {
        Ok(self.plan(Op::BlockMatmulNT { block }, &[a, b], a.rows, block, a.rg || b.rg))
    }

    fn block_matmul_nn(&mut self, a: H, b: H, block: usize) -> Result<H> {
        Ok(self.plan(Op::BlockMatmulNN { block }, &[a, b], a.rows, b.cols, a.rg || b.rg))
    }

    fn add(&mut self, a: H, b: H) -> Result<H> {
        Ok(self.plan(Op::Add, &[a, b], a.rows, a.cols, a.rg || b.rg))
    }

    fn scale(&mut self, a: H, c: f64) -> Result<H> {
        Ok(self.plan(Op::Scale(c), &[a], a.rows, a.cols, a.rg))
    }

    fn transpose(&mut self, a: H) -> Result<H> {
        Ok(self.plan(Op::Transpose, &[a], a.cols, a.rows, a.rg))
    }

    fn row_softmax(&mut self, a: H) -> Result<H> {
        Ok(self.plan(Op::RowSoftmax, &[a], a.rows, a.cols, a.rg))
    }

    fn layer_norm(&mut self, x: H, gamma: H, beta: H, eps: f64) -> Result<H> {
        let rg = x.rg || gamma.rg || beta.rg;
        Ok(self.plan(Op::LayerNorm { eps }, &[x, gamma, beta], x.rows, x.cols, rg))
    }

    fn gelu(&mut self, a: H) -> Result<H> {
        Ok(self.plan(Op::Gelu, &[a], a.rows, a.cols, a.rg))
    }

    fn dropout(&mut self, a: H, p: f64) -> Result<H> {
        Ok(self.plan(Op::Dropout { p, seed: 0, step: 0 }, &[a], a.rows, a.cols, a.rg))
    }

    fn slice_rows(&mut self, a: H, from: usize, n: usize) -> Result<H> {
        Ok(self.plan(Op::SliceRows { from, n }, &[a], n, a.cols, a.rg))
    }

    fn slice_cols(&mut self, a: H, from: usize, n: usize) -> Result<H> {
        Ok(self.plan(Op::SliceCols { from, n }, &[a], a.rows, n, a.rg))
    }

    fn concat_rows(&mut self, parts: &[H]) -> Result<H> {
        let rows = parts.iter().map(|p| p.rows).sum();
        let rg = parts.iter().any(|p| p.rg);
        Ok(self.plan(Op::ConcatRows, parts, rows, parts[0].cols, rg))
    }

    fn concat_cols(&mut self, parts: &[H]) -> Result<H> {
        let cols = parts.iter().map(|p| p.cols).sum();
        let rg = parts.iter().any(|p| p.rg);
        Ok(self.plan(Op::ConcatCols, parts, parts[0].rows, cols, rg))
    }

    fn mean_pool_rows(&mut self, a: H, group: usize) -> Result<H> {
        Ok(self.plan(Op::MeanPoolRows { group }, &[a], a.rows / group, a.cols, a.rg))
    }

    fn cross_entropy_mean(&mut self, logits: H) -> Result<H> {
        let rg = logits.rg;
        Ok(self.plan(Op::CrossEntropyMean { labels: Vec::new() }, &[logits], 1, 1, rg))
    }

    fn capture(&mut self, _h: H) {}
}

// ── backward ────────────────────────────────────────────────────────────────

/// Gradients of one backward pass: dense per-parameter slots plus measured cost.
#[derive(Debug)]
pub struct Grads {
    pub by_pid: Vec<Option<Tensor>>,
    pub bwd_flops: u64,
}

impl Grads {
    pub fn get<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a Tensor> {
        store.pid(name).and_then(|p| self.by_pid[p].as_ref())
    }

    /// Gradient map keyed by parameter name (trainable parameters only, by construction).
    pub fn into_map(self, store: &ParamStore) -> std::collections::BTreeMap<String, Tensor> {
        self.by_pid
            .into_iter()
            .enumerate()
            .filter_map(|(p, g)| g.map(|g| (store.metas[p].name.clone(), g)))
            .collect()
    }
}

fn saved_operand<'a>(node: &'a Node, slot: usize) -> &'a Tensor {
    node.saved
        .iter()
        .find_map(|s| match s {
            Saved::Operand { slot: sl, t } if *sl == slot => Some(t),
            _ => None,
        })
        .expect("retention table covers every tensor backward reads")
}

fn saved_own(node: &Node) -> &Tensor {
    node.saved
        .iter()
        .find_map(|s| match s {
            Saved::Own(t) => Some(t),
            _ => None,
        })
        .expect("retention table covers own-output saves")
}

/// Operand value at backward time: parameter store or the node's saved copy.
fn operand_value<'a>(node: &'a Node, slot: usize, store: &'a ParamStore) -> &'a Tensor {
    match node.srcs[slot] {
        Src::Param(p) => &store.values[p],
        Src::Node(_) => saved_operand(node, slot),
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(&delta.data) {
                *a += b;
            }
        }
    }
}

/// Reverse sweep over the tape. `cut_layer` must match what the tape was recorded with
/// (`None` accepts the recorded cut); gradients are produced only for trainable
/// parameters, and nothing below the cut is visited.
pub fn backward(tape: &Tape, store: &ParamStore, loss: H, cut_layer: Option<usize>) -> Result<Grads> {
    if !tape.grad_enabled {
        return Err(Error::NoGradTape);
    }
    if let Some(c) = cut_layer {
        if c != tape.cut {
            return Err(Error::Config(format!(
                "cut_layer {c} disagrees with the tape's recorded cut {}",
                tape.cut
            )));
        }
    }
    if loss.rows != 1 || loss.cols != 1 {
        return Err(shape_err("backward", &[(loss.rows, loss.cols)]));
    }
    let n = tape.nodes.len();
    let mut node_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    let mut by_pid: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
    let mut bwd_flops: u64 = 0;
    node_grads[loss.id] = Some(Tensor::scalar(1.0));

    for id in (0..n).rev() {
        let node = &tape.nodes[id];
        if !node.rg {
            continue;
        }
        let g = match node_grads[id].take() {
            Some(g) => g,
            None => continue, // no gradient reached this node
        };
        let src_rg = |slot: usize| -> bool {
            match node.srcs[slot] {
                Src::Node(i) => tape.nodes[i].rg,
                Src::Param(p) => store.metas[p].trainable,
            }
        };
        let send = |slot: usize,
                    delta: Tensor,
                    node_grads: &mut Vec<Option<Tensor>>,
                    by_pid: &mut Vec<Option<Tensor>>| {
            match node.srcs[slot] {
                Src::Node(i) => accumulate(&mut node_grads[i], delta),
                Src::Param(p) => accumulate(&mut by_pid[p], delta),
            }
        };

        match &node.op {
            Op::Matmul => {
                let mkn =
                    (node.src_dims[0].0 * node.src_dims[0].1 * node.src_dims[1].1) as u64;
                if src_rg(0) {
                    let b = operand_value(node, 1, store);
                    bwd_flops += 2 * mkn;
                    send(0, matmul_nt(&g, b), &mut node_grads, &mut by_pid);
                }
                if src_rg(1) {
                    let a = operand_value(node, 0, store);
                    bwd_flops += 2 * mkn;
                    send(1, matmul_tn(a, &g), &mut node_grads, &mut by_pid);
                }
            }
            Op::BlockMatmulNT { block } => {
                // C_i = A_i·B_iᵀ per block, so dA_i = dC_i·B_i and dB_i = dC_iᵀ·A_i.
                let mkn = (node.src_dims[0].0 * node.src_dims[0].1 * node.cols) as u64;
                if src_rg(0) {
                    let b = operand_value(node, 1, store);
                    bwd_flops += 2 * mkn;
                    send(0, block_matmul_nn_kernel(&g, b, *block), &mut node_grads, &mut by_pid);
                }
                if src_rg(1) {
                    let a = operand_value(node, 0, store);
                    bwd_flops += 2 * mkn;
                    send(1, block_matmul_tn_kernel(&g, a, *block), &mut node_grads, &mut by_pid);
                }
            }
            Op::BlockMatmulNN { block } => {
                // C_i = A_i·B_i per block, so dA_i = dC_i·B_iᵀ and dB_i = A_iᵀ·dC_i.
                let mkn = (node.src_dims[0].0 * node.src_dims[0].1 * node.cols) as u64;
                if src_rg(0) {
                    let b = operand_value(node, 1, store);
                    bwd_flops += 2 * mkn;
                    send(0, block_matmul_nt_kernel(&g, b, *block), &mut node_grads, &mut by_pid);
                }
                if src_rg(1) {
                    let a = operand_value(node, 0, store);
                    bwd_flops += 2 * mkn;
                    send(1, block_matmul_tn_kernel(a, &g, *block), &mut node_grads, &mut by_pid);
                }
            }
            Op::Add => {
                let elems = (node.rows * node.cols) as u64;
                if src_rg(0) {
                    bwd_flops += elems;
                    send(0, g.clone(), &mut node_grads, &mut by_pid);
                }
                if src_rg(1) {
                    bwd_flops += elems;
                    let (br, bc) = node.src_dims[1];
                    if br == 1 && node.rows > 1 {
                        let mut db = Tensor::zeros(1, bc);
                        for r in 0..node.rows {
                            for c in 0..node.cols {
                                db.data[c] += g.data[r * node.cols + c];
                            }
                        }
                        send(1, db, &mut node_grads, &mut by_pid);
                    } else {
                        send(1, g.clone(), &mut node_grads, &mut by_pid);
                    }
                }
            }
            Op::Scale(c) => {
                if src_rg(0) {
                    let mut da = g.clone();
                    for v in &mut da.data {
                        *v *= c;
                    }
                    bwd_flops += (node.rows * node.cols) as u64;
                    send(0, da, &mut node_grads, &mut by_pid);
                }
            }
            Op::Transpose => {
                if src_rg(0) {
                    send(0, g.transposed(), &mut node_grads, &mut by_pid);
                }
            }
            Op::RowSoftmax => {
                if src_rg(0) {
                    let y = saved_own(node);
                    let mut da = Tensor::zeros(node.rows, node.cols);
                    for r in 0..node.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dr = &mut da.data[r * node.cols..(r + 1) * node.cols];
                        for c in 0..node.cols {
                            dr[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    bwd_flops += 4 * (node.rows * node.cols) as u64;
                    send(0, da, &mut node_grads, &mut by_pid);
                }
            }
            Op::LayerNorm { eps } => {
                let elems = (node.rows * node.cols) as u64;
                let want_dx = src_rg(0);
                let want_dg = src_rg(1);
                let want_db = src_rg(2);
                let mut dx = want_dx.then(|| Tensor::zeros(node.rows, node.cols));
                let mut dgamma = want_dg.then(|| Tensor::zeros(1, node.cols));
                let mut dbeta = want_db.then(|| Tensor::zeros(1, node.cols));
                if want_db {
                    let db = dbeta.as_mut().unwrap();
                    for r in 0..node.rows {
                        for c in 0..node.cols {
                            db.data[c] += g.data[r * node.cols + c];
                        }
                    }
                }
                if want_dx || want_dg {
                    let x = operand_value(node, 0, store);
                    let gamma = operand_value(node, 1, store);
                    let d = node.cols as f64;
                    for r in 0..node.rows {
                        let row = x.row(r);
                        let mu = row.iter().sum::<f64>() / d;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let gr = g.row(r);
                        if let Some(dg) = dgamma.as_mut() {
                            for c in 0..node.cols {
                                dg.data[c] += gr[c] * (row[c] - mu) * rstd;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let mut sum_gg = 0.0;
                            let mut sum_ggx = 0.0;
                            for c in 0..node.cols {
                                let gg = gr[c] * gamma.data[c];
                                let xh = (row[c] - mu) * rstd;
                                sum_gg += gg;
                                sum_ggx += gg * xh;
                            }
                            let dr = &mut dx.data[r * node.cols..(r + 1) * node.cols];
                            for c in 0..node.cols {
                                let gg = gr[c] * gamma.data[c];
                                let xh = (row[c] - mu) * rstd;
                                dr[c] = rstd * (gg - sum_gg / d - xh * sum_ggx / d);
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    bwd_flops += 9 * elems;
                    send(0, dx, &mut node_grads, &mut by_pid);
                }
                if let Some(dg) = dgamma {
                    bwd_flops += 2 * elems;
                    send(1, dg, &mut node_grads, &mut by_pid);
                }
                if let Some(db) = dbeta {
                    bwd_flops += elems;
                    send(2, db, &mut node_grads, &mut by_pid);
                }
            }
            Op::Gelu => {
                if src_rg(0) {
                    let x = operand_value(node, 0, store);
                    let mut da = Tensor::zeros(node.rows, node.cols);
                    for ((o, &xv), &gv) in da.data.iter_mut().zip(&x.data).zip(&g.data) {
                        *o = gv * gelu_grad_scalar(xv);
                    }
                    bwd_flops += 12 * (node.rows * node.cols) as u64;
                    send(0, da, &mut node_grads, &mut by_pid);
                }
            }
            Op::EmbeddingLookup { ids } => {
                if src_rg(0) {
                    let (tr, tc) = node.src_dims[0];
                    let mut dt = Tensor::zeros(tr, tc);
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = g.row(r);
                        let trow = &mut dt.data[id as usize * tc..(id as usize + 1) * tc];
                        for (t, &gv) in trow.iter_mut().zip(grow) {
                            *t += gv;
                        }
                    }
                    bwd_flops += (node.rows * node.cols) as u64;
                    send(0, dt, &mut node_grads, &mut by_pid);
                }
            }
            Op::CrossEntropyMean { labels } => {
                if src_rg(0) {
                    let probs = saved_own(node);
                    let scale = g.data[0] / probs.rows as f64;
                    let mut dl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        dl.data[r * dl.cols + y as usize] -= 1.0;
                    }
                    for v in &mut dl.data {
                        *v *= scale;
                    }
                    bwd_flops += 2 * (probs.rows * probs.cols) as u64;
                    send(0, dl, &mut node_grads, &mut by_pid);
                }
            }
            Op::Dropout { p, seed, step } => {
                if src_rg(0) {
                    let mut da = g.clone();
                    for (e, v) in da.data.iter_mut().enumerate() {
                        *v *= dropout_mask_value(*p, *seed, *step, id as u64, e as u64);
                    }
                    bwd_flops += 2 * (node.rows * node.cols) as u64;
                    send(0, da, &mut node_grads, &mut by_pid);
                }
            }
            Op::SliceRows { from, n } => {
                if src_rg(0) {
                    let (pr, pc) = node.src_dims[0];
                    let mut da = Tensor::zeros(pr, pc);
                    da.data[from * pc..(from + n) * pc].copy_from_slice(&g.data);
                    send(0, da, &mut node_grads, &mut by_pid);
                }
            }
            Op::SliceCols { from, n } => {
                if src_rg(0) {
                    let (pr, pc) = node.src_dims[0];
                    let mut da = Tensor::zeros(pr, pc);
                    for r in 0..pr {
                        da.data[r * pc + from..r * pc + from + n].copy_from_slice(g.row(r));
                    }
                    send(0, da, &mut node_grads, &mut by_pid);
                }
            }
            Op::ConcatRows => {
                let mut off = 0;
                for slot in 0..node.srcs.len() {
                    let (pr, _) = node.src_dims[slot];
                    if src_rg(slot) {
                        let part = Tensor::from_vec(
                            pr,
                            node.cols,
                            g.data[off * node.cols..(off + pr) * node.cols].to_vec(),
                        )?;
                        send(slot, part, &mut node_grads, &mut by_pid);
                    }
                    off += pr;
                }
            }
            Op::ConcatCols => {
                let mut off = 0;
                for slot in 0..node.srcs.len() {
                    let (_, pc) = node.src_dims[slot];
                    if src_rg(slot) {
                        let mut part = Tensor::zeros(node.rows, pc);
                        for r in 0..node.rows {
                            part.data[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        send(slot, part, &mut node_grads, &mut by_pid);
                    }
                    off += pc;
                }
            }
            Op::MeanPoolRows { group } => {
                if src_rg(0) {
                    let (pr, pc) = node.src_dims[0];
                    let mut da = Tensor::zeros(pr, pc);
                    let inv = 1.0 / *group as f64;
                    for b in 0..node.rows {
                        let grow = g.row(b);
                        for r in 0..*group {
                            let drow =
                                &mut da.data[(b * group + r) * pc..(b * group + r + 1) * pc];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv = gv * inv;
                            }
                        }
                    }
                    bwd_flops += (pr * pc) as u64;
                    send(0, da, &mut node_grads, &mut by_pid);
                }
            }
        }
    }

    // Only trainable parameters may carry gradients out of a backward pass.
    for (p, g) in by_pid.iter().enumerate() {
        if g.is_some() && !store.metas[p].trainable {
            return Err(Error::FrozenGradient(store.metas[p].name.clone()));
        }
    }
    for g in by_pid.iter().flatten() {
        g.check_finite("backward")?;
    }
    Ok(Grads { by_pid, bwd_flops })
}
