//! Linear CKA between adapted and original activations, and the per-adapter
//! importance scores derived from it.
//!
//! Similarity of two activation matrices `X, Y` (rows are (sample, position) pairs,
//! columns are features) is
//!
//! ```text
//! cka(X, Y) = ‖ỸᵀX̃‖²_F / (‖X̃ᵀX̃‖_F · ‖ỸᵀỸ‖_F)
//! ```
//!
//! where the tilde is column-mean centering (subtract each feature's mean over rows);
//! the uncentered variant is available behind a flag. An adapter's importance is
//! `1 − cka` of its adapted-vs-ablated block outputs, clamped to `[0, 1]`. If either
//! matrix is identically zero after centering the similarity is undefined — reported
//! as a distinguished value, never NaN — and consumers treat the importance as 1
//! (maximally important: never freeze on missing evidence).

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::{matmul_tn, Batch};
use crate::tensor::Tensor;

/// CKA outcome: a score in `[0, 1]`, or undefined when a centered matrix vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    Defined(f64),
    Undefined,
}

impl Similarity {
    /// Score with undefined collapsed to the scheduler's reading (importance 1 means
    /// similarity 0).
    pub fn score_or(&self, fallback: f64) -> f64 {
        match self {
            Similarity::Defined(v) => *v,
            Similarity::Undefined => fallback,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, Similarity::Defined(_))
    }
}

fn centered(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for c in 0..x.cols {
        let mean = (0..x.rows).map(|r| x.at(r, c)).sum::<f64>() / x.rows as f64;
        for r in 0..x.rows {
            *out.at_mut(r, c) -= mean;
        }
    }
    out
}

fn frob_sq(m: &Tensor) -> f64 {
    m.data.iter().map(|v| v * v).sum()
}

/// Linear CKA of two equally-shaped activation matrices.
pub fn cka(x: &Tensor, y: &Tensor, center: bool) -> Result<Similarity> {
    if x.rows != y.rows || x.cols != y.cols {
        return Err(Error::Shape {
            op: "cka",
            detail: format!("[{}x{}] vs [{}x{}]", x.rows, x.cols, y.rows, y.cols),
        });
    }
    if x.rows < 2 {
        return Err(Error::Config(format!("cka needs at least 2 rows, got {}", x.rows)));
    }
    x.check_finite("cka")?;
    y.check_finite("cka")?;
    let (xc, yc);
    let (xr, yr) = if center {
        xc = centered(x);
        yc = centered(y);
        (&xc, &yc)
    } else {
        (x, y)
    };
    let sxx = frob_sq(&matmul_tn(xr, xr));
    let syy = frob_sq(&matmul_tn(yr, yr));
    // Factored as sqrt(sxx·syy) rather than sqrt(sxx)·sqrt(syy): with round-to-nearest
    // doubles, sqrt(s·s) rounds back to s exactly, so cka(x, x) is 1.0 on the nose
    // instead of one ulp off. The product cannot overflow for any activation scale the
    // engine produces; the finiteness check below guards pathological inputs anyway.
    let den = (sxx * syy).sqrt();
    if !den.is_finite() {
        return Err(Error::NonFinite { op: "cka" });
    }
    if den == 0.0 {
        return Ok(Similarity::Undefined);
    }
    let num = frob_sq(&matmul_tn(yr, xr));
    Ok(Similarity::Defined(num / den))
}

/// Importance of an adapter from its adapted (`x`) and ablated (`y`) activations:
/// `1 − cka`, clamped to `[0, 1]`; undefined similarity propagates.
pub fn importance(x: &Tensor, y: &Tensor, center: bool) -> Result<Similarity> {
    Ok(match cka(x, y, center)? {
        Similarity::Defined(v) => Similarity::Defined((1.0 - v).clamp(0.0, 1.0)),
        Similarity::Undefined => Similarity::Undefined,
    })
}

/// Per-adapter importance snapshot for one epoch, with changes vs the previous epoch.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ImportanceRecord {
    pub epoch: usize,
    /// Per-layer importance, undefined entries recorded as 1.0.
    pub scores: Vec<f64>,
    /// Which entries were undefined rather than measured.
    pub undefined: Vec<bool>,
    /// `|Δ| / max(prev, 1e-8)` per layer; absent on the first record.
    pub rel_change: Option<Vec<f64>>,
    /// Raw `|Δ|` per layer; absent on the first record.
    pub abs_change: Option<Vec<f64>>,
}

/// Floor in the relative-change denominator, guarding a zero previous score.
pub const REL_CHANGE_EPS: f64 = 1e-8;

/// Stack the per-layer activations of several probe batches row-wise.
fn stacked_traces(model: &Model, probe: &[Batch]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if probe.is_empty() {
        return Err(Error::Config("probe set is empty".into()));
    }
    let l = model.cfg.n_layers;
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); l];
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); l];
    let mut rows = 0;
    for batch in probe {
        let trace = model.dual_forward(batch)?;
        rows += batch.n_seqs * batch.seq_len;
        for i in 0..l {
            xs[i].extend_from_slice(&trace.x[i].data);
            ys[i].extend_from_slice(&trace.y[i].data);
        }
    }
    let d = model.cfg.d_model;
    let build = |cols: Vec<Vec<f64>>| -> Result<Vec<Tensor>> {
        cols.into_iter().map(|data| Tensor::from_vec(rows, d, data)).collect()
    };
    Ok((build(xs)?, build(ys)?))
}

/// Measure every adapter's importance on the probe set and thread the change
/// statistics from the previous record.
pub fn epoch_importances(
    model: &Model,
    probe: &[Batch],
    epoch: usize,
    prev: Option<&ImportanceRecord>,
    center: bool,
) -> Result<ImportanceRecord> {
    let (xs, ys) = stacked_traces(model, probe)?;
    let mut scores = Vec::with_capacity(xs.len());
    let mut undefined = Vec::with_capacity(xs.len());
    for (x, y) in xs.iter().zip(&ys) {
        let imp = importance(x, y, center)?;
        scores.push(imp.score_or(1.0));
        undefined.push(!imp.is_defined());
    }
    let (rel_change, abs_change) = match prev {
        None => (None, None),
        Some(p) => {
            let abs: Vec<f64> =
                scores.iter().zip(&p.scores).map(|(c, o)| (c - o).abs()).collect();
            let rel: Vec<f64> = abs
                .iter()
                .zip(&p.scores)
                .map(|(a, o)| a / o.max(REL_CHANGE_EPS))
                .collect();
            (Some(rel), Some(abs))
        }
    };
    Ok(ImportanceRecord { epoch, scores, undefined, rel_change, abs_change })
}

/// Per-epoch, per-layer CKA between each snapshot's adapted activations and the final
/// model's, on one probe set. The final model compared with itself gives 1 everywhere.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryGrid {
    pub epochs: Vec<usize>,
    /// `grid[e][layer]`, aligned with `epochs`.
    pub grid: Vec<Vec<f64>>,
}

pub fn trajectory_similarity(
    snapshots: &[(usize, &Model)],
    final_model: &Model,
    probe: &[Batch],
    center: bool,
) -> Result<TrajectoryGrid> {
    let final_cfg = serde_json::to_string(&final_model.cfg).expect("config serializes");
    let final_x = adapted_stack(final_model, probe)?;
    let mut epochs = Vec::new();
    let mut grid = Vec::new();
    for (epoch, model) in snapshots {
        if serde_json::to_string(&model.cfg).expect("config serializes") != final_cfg {
            return Err(Error::Config(format!(
                "snapshot at epoch {epoch} has a different model configuration"
            )));
        }
        let xs = adapted_stack(model, probe)?;
        let mut row = Vec::with_capacity(xs.len());
        for (x, xf) in xs.iter().zip(&final_x) {
            row.push(cka(x, xf, center)?.score_or(0.0));
        }
        epochs.push(*epoch);
        grid.push(row);
    }
    Ok(TrajectoryGrid { epochs, grid })
}

fn adapted_stack(model: &Model, probe: &[Batch]) -> Result<Vec<Tensor>> {
    if probe.is_empty() {
        return Err(Error::Config("probe set is empty".into()));
    }
    let l = model.cfg.n_layers;
    let d = model.cfg.d_model;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); l];
    let mut rows = 0;
    for batch in probe {
        let xs = model.adapted_activations(batch)?;
        rows += batch.n_seqs * batch.seq_len;
        for i in 0..l {
            cols[i].extend_from_slice(&xs[i].data);
        }
    }
    cols.into_iter().map(|data| Tensor::from_vec(rows, d, data)).collect()
}
