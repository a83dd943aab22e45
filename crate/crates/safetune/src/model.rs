//! Post-LN transformer encoder classifier with frozen base weights and per-layer
//! low-rank adapters on the query and value projections.
//!
//! One block is `LN1(x + Attn(x))` followed by `LN2(h + FFN(h))`; the second
//! layer-norm's output is the block output, which is also the activation captured for
//! importance probes. Adapted projections follow `h = W₀x + (α/r)·(dropout(x)·A)·B`
//! with the base `W₀` permanently frozen; only adapters and the classification head
//! ever train.
//!
//! The forward pass is written once against the [`Rec`] trait, so the value-level
//! engine and the shape-level resource planner execute the identical op sequence.
//! Parameter layout is likewise defined once ([`param_layout`]) and shared by
//! initialization, trainability bookkeeping, and the resource model.

use crate::error::{Error, Result};
use crate::rng::named_stream;
use crate::tape::{Batch, ParamMeta, ParamStore, Rec, Region, H};
use crate::tensor::Tensor;

/// Layer-norm stabilizer; fixed, not a tunable.
pub const LN_EPS: f64 = 1e-5;
/// Initialization scale for base weights and adapter `A` matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub n_classes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_seq: 32,
            n_classes: 2,
            lora_rank: 4,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.max_seq == 0 {
            return Err(Error::Config("max_seq must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config(format!(
                "lora_dropout {} outside [0, 1)",
                self.lora_dropout
            )));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// What a parameter is for, which decides who may train it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Backbone weight: never trainable.
    Base,
    /// Adapter matrix belonging to this layer: trainable until its layer freezes.
    Adapter { layer: usize },
    /// Classification head: always trainable.
    Head,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Gauss,
    Zeros,
    Ones,
}

/// One entry of the parameter layout table.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
    init: Init,
}

/// The full parameter inventory for a config and an adapter placement (which layers
/// carry adapters). Single source for init, trainability sync, and resource planning.
pub fn param_layout(cfg: &ModelConfig, placement: &[bool]) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let r = cfg.lora_rank;
    let mut out = Vec::new();
    let mut p = |name: String, rows, cols, kind, init| {
        out.push(ParamSpec { name, rows, cols, kind, init });
    };
    p("embed.tok".into(), cfg.vocab_size, d, ParamKind::Base, Init::Gauss);
    p("embed.pos".into(), cfg.max_seq, d, ParamKind::Base, Init::Gauss);
    for i in 0..cfg.n_layers {
        let l = |s: &str| format!("layer.{i}.{s}");
        p(l("attn.wq"), d, d, ParamKind::Base, Init::Gauss);
        p(l("attn.wk"), d, d, ParamKind::Base, Init::Gauss);
        p(l("attn.wv"), d, d, ParamKind::Base, Init::Gauss);
        p(l("attn.wo"), d, d, ParamKind::Base, Init::Gauss);
        if placement[i] {
            p(l("attn.q_adapter.a"), d, r, ParamKind::Adapter { layer: i }, Init::Gauss);
            p(l("attn.q_adapter.b"), r, d, ParamKind::Adapter { layer: i }, Init::Zeros);
            p(l("attn.v_adapter.a"), d, r, ParamKind::Adapter { layer: i }, Init::Gauss);
            p(l("attn.v_adapter.b"), r, d, ParamKind::Adapter { layer: i }, Init::Zeros);
        }
        p(l("ln1.gamma"), 1, d, ParamKind::Base, Init::Ones);
        p(l("ln1.beta"), 1, d, ParamKind::Base, Init::Zeros);
        p(l("ffn.w1"), d, cfg.d_ff, ParamKind::Base, Init::Gauss);
        p(l("ffn.b1"), 1, cfg.d_ff, ParamKind::Base, Init::Zeros);
        p(l("ffn.w2"), cfg.d_ff, d, ParamKind::Base, Init::Gauss);
        p(l("ffn.b2"), 1, d, ParamKind::Base, Init::Zeros);
        p(l("ln2.gamma"), 1, d, ParamKind::Base, Init::Ones);
        p(l("ln2.beta"), 1, d, ParamKind::Base, Init::Zeros);
    }
    p("head.w".into(), d, cfg.n_classes, ParamKind::Head, Init::Gauss);
    p("head.b".into(), 1, cfg.n_classes, ParamKind::Head, Init::Zeros);
    out
}

/// Parameter metas (shape + trainability) for a layout under a freeze mask, without
/// allocating values. This is what the resource model plans against.
pub fn layout_metas(cfg: &ModelConfig, placement: &[bool], frozen: &[bool]) -> Vec<ParamMeta> {
    param_layout(cfg, placement)
        .into_iter()
        .map(|s| ParamMeta {
            name: s.name,
            rows: s.rows,
            cols: s.cols,
            trainable: kind_trainable(s.kind, frozen),
        })
        .collect()
}

fn kind_trainable(kind: ParamKind, frozen: &[bool]) -> bool {
    match kind {
        ParamKind::Base => false,
        ParamKind::Adapter { layer } => !frozen[layer],
        ParamKind::Head => true,
    }
}

/// Paired adapted/original activations per layer, rows aligned by (sample, position).
#[derive(Debug)]
pub struct ForwardTrace {
    /// Block outputs with every adapter live.
    pub x: Vec<Tensor>,
    /// Block output of layer `i` with only layer `i`'s adapter contribution zeroed.
    pub y: Vec<Tensor>,
}

/// Handles returned by a loss-producing forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub logits: H,
    pub loss: H,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    /// Which layers carry adapters; all of them for ordinary runs, a single layer for
    /// placement-ablation profiles.
    pub placement: Vec<bool>,
    kinds: Vec<ParamKind>,
}

impl Model {
    /// Initialize with adapters on every layer.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        Model::init_with_placement(cfg, seed, &vec![true; cfg.n_layers])
    }

    /// Initialize with adapters only where `placement` says. Each parameter draws from
    /// its own named stream, so shared parameters are bit-identical across placements
    /// with the same seed.
    pub fn init_with_placement(cfg: &ModelConfig, seed: u64, placement: &[bool]) -> Result<Model> {
        cfg.validate()?;
        if placement.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "placement has {} entries for {} layers",
                placement.len(),
                cfg.n_layers
            )));
        }
        let mut store = ParamStore::new();
        let mut kinds = Vec::new();
        for spec in param_layout(cfg, placement) {
            let value = match spec.init {
                Init::Gauss => {
                    let mut rng = named_stream(seed, &format!("init.{}", spec.name));
                    Tensor::gaussian(spec.rows, spec.cols, INIT_STD, &mut rng)
                }
                Init::Zeros => Tensor::zeros(spec.rows, spec.cols),
                Init::Ones => Tensor::filled(spec.rows, spec.cols, 1.0),
            };
            store.push(spec.name, value, kind_trainable(spec.kind, &vec![false; cfg.n_layers]));
            kinds.push(spec.kind);
        }
        Ok(Model { cfg: cfg.clone(), store, placement: placement.to_vec(), kinds })
    }

    /// Shape-only model for resource planning: metas carry the given freeze mask, all
    /// values are zero. Never run a value-level forward on it — it exists so the
    /// shape planner can execute the real forward code without drawing real weights.
    pub fn shape_only(cfg: &ModelConfig, placement: &[bool], frozen: &[bool]) -> Result<Model> {
        cfg.validate()?;
        if placement.len() != cfg.n_layers || frozen.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "placement/frozen have {}/{} entries for {} layers",
                placement.len(),
                frozen.len(),
                cfg.n_layers
            )));
        }
        let mut store = ParamStore::new();
        let mut kinds = Vec::new();
        for spec in param_layout(cfg, placement) {
            store.push(
                spec.name,
                Tensor::zeros(spec.rows, spec.cols),
                kind_trainable(spec.kind, frozen),
            );
            kinds.push(spec.kind);
        }
        Ok(Model { cfg: cfg.clone(), store, placement: placement.to_vec(), kinds })
    }

    /// Set trainability from a freeze mask (`frozen[i]` = layer i's adapters frozen).
    /// Base weights stay frozen and the head stays trainable no matter the mask.
    pub fn sync_trainability(&mut self, frozen: &[bool]) {
        assert_eq!(frozen.len(), self.cfg.n_layers, "freeze mask length");
        for (pid, kind) in self.kinds.iter().enumerate() {
            self.store.metas[pid].trainable = kind_trainable(*kind, frozen);
        }
    }

    /// Backpropagation cut: the shallowest layer whose adapters still train. Everything
    /// below it never runs backward. With every adapter frozen only the head trains and
    /// the cut leaps past all blocks.
    pub fn cut(&self, frozen: &[bool]) -> usize {
        (0..self.cfg.n_layers)
            .find(|&i| self.placement[i] && !frozen[i])
            .unwrap_or(self.cfg.n_layers)
    }

    pub fn kind_of(&self, pid: usize) -> ParamKind {
        self.kinds[pid]
    }

    /// Names of the adapter matrices of one layer (empty if the layer has none).
    pub fn adapter_param_names(&self, layer: usize) -> Vec<String> {
        if !self.placement[layer] {
            return Vec::new();
        }
        ["attn.q_adapter.a", "attn.q_adapter.b", "attn.v_adapter.a", "attn.v_adapter.b"]
            .iter()
            .map(|s| format!("layer.{layer}.{s}"))
            .collect()
    }

    /// Loss-producing forward pass (training or eval depending on the recorder).
    pub fn loss_forward<R: Rec>(&self, r: &mut R) -> Result<ForwardOut> {
        self.forward_inner(r, None, false, true).map(|o| o.expect("head requested"))
    }

    /// Capture block outputs for probing; `ablate` zeroes one layer's adapter
    /// contribution. Skips the head entirely.
    pub fn probe_forward<R: Rec>(&self, r: &mut R, ablate: Option<usize>) -> Result<()> {
        self.forward_inner(r, ablate, true, false).map(|_| ())
    }

    fn forward_inner<R: Rec>(
        &self,
        r: &mut R,
        ablate: Option<usize>,
        capture_blocks: bool,
        with_head: bool,
    ) -> Result<Option<ForwardOut>> {
        let cfg = &self.cfg;
        let (_, seq_len) = r.batch_dims();
        if seq_len > cfg.max_seq {
            return Err(Error::Config(format!(
                "sequence length {seq_len} exceeds max_seq {}",
                cfg.max_seq
            )));
        }
        let pid = |name: &str| self.store_pid(name);

        r.scope(Region::Embed);
        let tok = r.param(pid("embed.tok"));
        let pos = r.param(pid("embed.pos"));
        let te = r.token_embedding(tok)?;
        let pe = r.position_embedding(pos)?;
        let mut x = r.add(te, pe)?;

        let dh = cfg.head_dim();
        for i in 0..cfg.n_layers {
            r.scope(Region::Block(i));
            let l = |s: &str| format!("layer.{i}.{s}");
            let wq = r.param(pid(&l("attn.wq")));
            let wk = r.param(pid(&l("attn.wk")));
            let wv = r.param(pid(&l("attn.wv")));
            let wo = r.param(pid(&l("attn.wo")));

            let mut q = r.matmul(x, wq)?;
            let k = r.matmul(x, wk)?;
            let mut v = r.matmul(x, wv)?;
            if self.placement[i] && ablate != Some(i) {
                let xd = r.dropout(x, cfg.lora_dropout)?;
                for (target, spec) in [(&mut q, "q_adapter"), (&mut v, "v_adapter")] {
                    let a = r.param(pid(&l(&format!("attn.{spec}.a"))));
                    let b = r.param(pid(&l(&format!("attn.{spec}.b"))));
                    let u = r.matmul(xd, a)?;
                    let delta = r.matmul(u, b)?;
                    let scaled = r.scale(delta, cfg.scaling())?;
                    *target = r.add(*target, scaled)?;
                }
            }

            // One blocked node per head covers every sequence: scores rows are
            // (sequence, query position) pairs, columns the key positions of that
            // row's own sequence, so the row softmax is exactly per-query attention.
            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = r.slice_cols(q, h * dh, dh)?;
                let kh = r.slice_cols(k, h * dh, dh)?;
                let vh = r.slice_cols(v, h * dh, dh)?;
                let scores = r.block_matmul_nt(qh, kh, seq_len)?;
                let scaled = r.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let attn = r.row_softmax(scaled)?;
                head_outs.push(r.block_matmul_nn(attn, vh, seq_len)?);
            }
            let merged = r.concat_cols(&head_outs)?;
            let attn_out = r.matmul(merged, wo)?;

            let res1 = r.add(x, attn_out)?;
            let g1 = r.param(pid(&l("ln1.gamma")));
            let b1 = r.param(pid(&l("ln1.beta")));
            let h1 = r.layer_norm(res1, g1, b1, LN_EPS)?;

            let w1 = r.param(pid(&l("ffn.w1")));
            let fb1 = r.param(pid(&l("ffn.b1")));
            let w2 = r.param(pid(&l("ffn.w2")));
            let fb2 = r.param(pid(&l("ffn.b2")));
            let f1 = r.matmul(h1, w1)?;
            let f1b = r.add(f1, fb1)?;
            let act = r.gelu(f1b)?;
            let f2 = r.matmul(act, w2)?;
            let f2b = r.add(f2, fb2)?;

            let res2 = r.add(h1, f2b)?;
            let g2 = r.param(pid(&l("ln2.gamma")));
            let b2 = r.param(pid(&l("ln2.beta")));
            let out = r.layer_norm(res2, g2, b2, LN_EPS)?;
            if capture_blocks {
                r.capture(out);
            }
            x = out;
        }

        if !with_head {
            return Ok(None);
        }
        r.scope(Region::Head);
        let pooled = r.mean_pool_rows(x, seq_len)?;
        let hw = r.param(pid("head.w"));
        let hb = r.param(pid("head.b"));
        let proj = r.matmul(pooled, hw)?;
        let logits = r.add(proj, hb)?;
        let loss = r.cross_entropy_mean(logits)?;
        Ok(Some(ForwardOut { logits, loss }))
    }

    fn store_pid(&self, name: &str) -> usize {
        self.store.pid(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Adapted and per-layer-ablated block activations on a probe batch: one pass with
    /// all adapters for the `X_i`, then one pass per layer for its `Y_i`. Eval mode
    /// throughout (no dropout, no tape).
    pub fn dual_forward(&self, batch: &Batch) -> Result<ForwardTrace> {
        let mut ctx = crate::tape::RealCtx::eval(&self.store, batch);
        self.probe_forward(&mut ctx, None)?;
        let x = ctx.take_captures();
        let mut y = Vec::with_capacity(self.cfg.n_layers);
        for i in 0..self.cfg.n_layers {
            let mut ctx = crate::tape::RealCtx::eval(&self.store, batch);
            self.probe_forward(&mut ctx, Some(i))?;
            y.push(ctx.take_captures().swap_remove(i));
        }
        Ok(ForwardTrace { x, y })
    }

    /// Block outputs with every adapter live (the adapted path only), eval mode.
    pub fn adapted_activations(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let mut ctx = crate::tape::RealCtx::eval(&self.store, batch);
        self.probe_forward(&mut ctx, None)?;
        Ok(ctx.take_captures())
    }

    /// Eval-mode loss and batch accuracy (fraction of argmax hits).
    pub fn eval_batch(&self, batch: &Batch) -> Result<(f64, f64)> {
        let mut ctx = crate::tape::RealCtx::eval(&self.store, batch);
        let out = self.loss_forward(&mut ctx)?;
        let loss = ctx.scalar(out.loss);
        let logits = ctx.value(out.logits);
        let mut hits = 0usize;
        for (row, &label) in (0..logits.rows).zip(&batch.labels) {
            let r = logits.row(row);
            let argmax = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty logits row");
            if argmax == label as usize {
                hits += 1;
            }
        }
        Ok((loss, hits as f64 / logits.rows as f64))
    }
}
