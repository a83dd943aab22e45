//! Exact resource accounting per training step as a function of the freeze mask.
//!
//! The model here is not an estimate: it executes the identical forward description
//! as the engine through the shape-level recorder, folding the same retention table
//! and FLOP formulas over shapes instead of values. Tests assert bit-for-bit equality
//! between these predictions and what the engine actually measures on its tape.
//!
//! Byte counts are engine-logical 64-bit buffers (what the tape retains), not process
//! RSS. Optimizer memory is the two Adam moment buffers over currently-trainable
//! scalars: `2 × 8 × trainable_parameter_count`; transient gradient and backward
//! scratch buffers are excluded.

use crate::error::Result;
use crate::model::{layout_metas, Model, ModelConfig};
use crate::tape::{RegionCost, ShapeCtx};

/// Planned per-step costs, broken down by region.
#[derive(Debug, Clone)]
pub struct StepCosts {
    pub activation_bytes: u64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub embed: RegionCost,
    pub blocks: Vec<RegionCost>,
    pub head: RegionCost,
}

/// Run the forward description over shapes only and collect costs for one step of
/// `n_seqs` sequences of `seq_len` tokens under the given placement and freeze mask.
pub fn step_costs(
    cfg: &ModelConfig,
    placement: &[bool],
    frozen: &[bool],
    n_seqs: usize,
    seq_len: usize,
) -> Result<StepCosts> {
    let shape_model = Model::shape_only(cfg, placement, frozen)?;
    let mut plan = ShapeCtx::new(&shape_model.store.metas, cfg.n_layers, n_seqs, seq_len);
    shape_model.loss_forward(&mut plan)?;
    let total = plan.total();
    Ok(StepCosts {
        activation_bytes: total.retained_bytes,
        forward_flops: total.fwd_flops,
        backward_flops: total.bwd_flops,
        embed: plan.embed,
        blocks: plan.blocks,
        head: plan.head,
    })
}

/// Activation bytes the engine will retain for backward on one step.
pub fn modeled_activation_bytes(
    cfg: &ModelConfig,
    placement: &[bool],
    frozen: &[bool],
    n_seqs: usize,
    seq_len: usize,
) -> Result<u64> {
    Ok(step_costs(cfg, placement, frozen, n_seqs, seq_len)?.activation_bytes)
}

/// (forward, backward) FLOPs for one step. Forward is mask-independent — frozen
/// adapters still run forward; backward shrinks with the cut.
pub fn flops_per_step(
    cfg: &ModelConfig,
    placement: &[bool],
    frozen: &[bool],
    n_seqs: usize,
    seq_len: usize,
) -> Result<(u64, u64)> {
    let c = step_costs(cfg, placement, frozen, n_seqs, seq_len)?;
    Ok((c.forward_flops, c.backward_flops))
}

/// One epoch's accounting row for the run log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ResourceReport {
    pub epoch: usize,
    pub activation_bytes: u64,
    pub optimizer_bytes: u64,
    pub parameter_bytes: u64,
    pub trainable_parameter_count: u64,
    pub forward_flops: u64,
    pub backward_flops: u64,
}

/// Assemble the report for an epoch whose steps run under `frozen`.
pub fn epoch_report(
    epoch: usize,
    cfg: &ModelConfig,
    placement: &[bool],
    frozen: &[bool],
    n_seqs: usize,
    seq_len: usize,
) -> Result<ResourceReport> {
    let costs = step_costs(cfg, placement, frozen, n_seqs, seq_len)?;
    let metas = layout_metas(cfg, placement, frozen);
    let trainable: u64 = metas.iter().filter(|m| m.trainable).map(|m| m.elems() as u64).sum();
    let total: u64 = metas.iter().map(|m| m.elems() as u64).sum();
    Ok(ResourceReport {
        epoch,
        activation_bytes: costs.activation_bytes,
        optimizer_bytes: 2 * 8 * trainable,
        parameter_bytes: 8 * total,
        trainable_parameter_count: trainable,
        forward_flops: costs.forward_flops,
        backward_flops: costs.backward_flops,
    })
}
