//! Finite-difference gradient checking.
//!
//! Central differences with a small step are the ground truth every backward rule is
//! measured against, both in per-op unit tests and in the whole-model checks the
//! integration suite runs. All utilities perturb in f64 and report the worst relative
//! error seen, where relative error uses a unit floor so near-zero gradients are judged
//! on the absolute scale of finite-difference noise.

use crate::error::Result;
use crate::tape::ParamStore;
use crate::tensor::Tensor;

/// Default perturbation for central differences.
pub const DEFAULT_H: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1)`: relative for O(1) gradients, absolute near zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn fd_grad_vec<F>(theta: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work)?;
        work[i] = orig - h;
        let down = f(&work)?;
        work[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Central-difference gradient of a scalar loss with respect to one named parameter.
/// The loss closure sees the perturbed store; everything else in the store is pinned.
pub fn fd_param_grad<F>(store: &mut ParamStore, name: &str, h: f64, mut loss: F) -> Result<Tensor>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let pid = store.pid(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
    let (rows, cols) = (store.metas[pid].rows, store.metas[pid].cols);
    let mut grad = Tensor::zeros(rows, cols);
    for e in 0..rows * cols {
        let orig = store.values[pid].data[e];
        store.values[pid].data[e] = orig + h;
        let up = loss(store)?;
        store.values[pid].data[e] = orig - h;
        let down = loss(store)?;
        store.values[pid].data[e] = orig;
        grad.data[e] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst relative error between an analytic gradient map and central differences,
/// taken over every trainable parameter in the store.
pub fn max_param_grad_rel_err<F>(
    store: &mut ParamStore,
    analytic: &std::collections::BTreeMap<String, Tensor>,
    h: f64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let names: Vec<String> = store
        .metas
        .iter()
        .filter(|m| m.trainable)
        .map(|m| m.name.clone())
        .collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let a = analytic
            .get(&name)
            .unwrap_or_else(|| panic!("no analytic gradient for trainable parameter {name}"));
        let n = fd_param_grad(store, &name, h, &mut loss)?;
        assert_eq!((a.rows, a.cols), (n.rows, n.cols), "gradient shape mismatch for {name}");
        for (&av, &nv) in a.data.iter().zip(&n.data) {
            worst = worst.max(rel_err(av, nv));
        }
    }
    Ok(worst)
}

// ── built-in operator suite ─────────────────────────────────────────────────

use crate::rng::named_stream;
use crate::tape::{backward, Batch, RealCtx, Rec, H};

/// Result of one operator check: worst relative error across every trainable
/// parameter element involved.
#[derive(Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

struct Case {
    name: &'static str,
    /// (name, rows, cols, trainable); values drawn from a named stream per parameter.
    params: Vec<(&'static str, usize, usize, bool)>,
    out_rows: usize,
    out_cols: usize,
    build: fn(&mut RealCtx, &dyn Fn(&str) -> usize) -> Result<H>,
}

fn suite_batch() -> Batch {
    // Four sequences of three tokens over a 10-token vocabulary; ids repeat so the
    // embedding backward exercises scatter-add accumulation. Labels span 5 classes.
    Batch {
        tokens: vec![3, 7, 3, 0, 9, 1, 4, 4, 2, 7, 0, 5],
        labels: vec![0, 4, 2, 2],
        n_seqs: 4,
        seq_len: 3,
    }
}

fn run_case(case: &Case, h: f64) -> Result<OpCheck> {
    use crate::tape::ParamStore;

    let mut store = ParamStore::new();
    for &(name, rows, cols, trainable) in &case.params {
        let mut rng = named_stream(0xB0B, &format!("gradcheck.{}.{name}", case.name));
        store.push(name, Tensor::gaussian(rows, cols, 0.7, &mut rng), trainable);
    }
    // Fixed mixing weights fold any output shape to a scalar so every case ends in a
    // single loss value; they never train.
    let mut rng = named_stream(0xB0B, &format!("gradcheck.{}.mix", case.name));
    store.push("mix.row", Tensor::gaussian(1, case.out_rows, 0.7, &mut rng), false);
    store.push("mix.col", Tensor::gaussian(case.out_cols, 1, 0.7, &mut rng), false);

    let batch = suite_batch();
    let forward = |store: &ParamStore, want_tape: bool| -> Result<(f64, Option<_>)> {
        let mut ctx = RealCtx::training(store, &batch, 0, 0, 0xD1CE, 0);
        let pid = |name: &str| store.pid(name).expect("case parameter");
        let out = (case.build)(&mut ctx, &pid)?;
        let loss = if out.rows == 1 && out.cols == 1 {
            out
        } else {
            let row = ctx.param(pid("mix.row"));
            let col = ctx.param(pid("mix.col"));
            let folded = ctx.matmul(row, out)?;
            ctx.matmul(folded, col)?
        };
        let value = ctx.scalar(loss);
        if want_tape {
            let tape = ctx.into_tape();
            let grads = backward(&tape, store, loss, None)?;
            Ok((value, Some(grads)))
        } else {
            Ok((value, None))
        }
    };

    let (_, grads) = forward(&store, true)?;
    let analytic = grads.expect("tape requested").into_map(&store);
    let worst = max_param_grad_rel_err(&mut store, &analytic, h, |s| {
        forward(s, false).map(|(v, _)| v)
    })?;
    Ok(OpCheck { name: case.name, max_rel_err: worst })
}

/// Check every differentiable operator against central differences, each through at
/// least one nontrivial shape, including operators where the trainable input sits in
/// each operand slot. Returns one entry per case with its worst relative error.
pub fn op_suite(h: f64) -> Result<Vec<OpCheck>> {
    let cases: Vec<Case> = vec![
        Case {
            name: "matmul_lhs_3x4_4x5",
            params: vec![("p", 3, 4, true), ("w", 4, 5, false)],
            out_rows: 3,
            out_cols: 5,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let w = r.param(pid("w"));
                r.matmul(p, w)
            },
        },
        Case {
            name: "matmul_rhs_3x4_4x5",
            params: vec![("w", 3, 4, false), ("p", 4, 5, true)],
            out_rows: 3,
            out_cols: 5,
            build: |r, pid| {
                let w = r.param(pid("w"));
                let p = r.param(pid("p"));
                r.matmul(w, p)
            },
        },
        Case {
            name: "matmul_both_sides_2x6_6x3",
            params: vec![("p", 2, 6, true), ("q", 6, 3, true)],
            out_rows: 2,
            out_cols: 3,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let q = r.param(pid("q"));
                r.matmul(p, q)
            },
        },
        Case {
            name: "add_elementwise_4x5",
            params: vec![("p", 4, 5, true), ("q", 4, 5, true)],
            out_rows: 4,
            out_cols: 5,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let q = r.param(pid("q"));
                r.add(p, q)
            },
        },
        Case {
            name: "add_row_broadcast_4x5",
            params: vec![("p", 4, 5, true), ("b", 1, 5, true)],
            out_rows: 4,
            out_cols: 5,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let b = r.param(pid("b"));
                r.add(p, b)
            },
        },
        Case {
            name: "scale_3x7",
            params: vec![("p", 3, 7, true)],
            out_rows: 3,
            out_cols: 7,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.scale(p, -1.75)
            },
        },
        Case {
            name: "transpose_3x5",
            params: vec![("p", 3, 5, true)],
            out_rows: 5,
            out_cols: 3,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.transpose(p)
            },
        },
        Case {
            name: "row_softmax_4x6",
            params: vec![("p", 4, 6, true)],
            out_rows: 4,
            out_cols: 6,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.row_softmax(p)
            },
        },
        Case {
            name: "layer_norm_5x8",
            params: vec![("p", 5, 8, true), ("g", 1, 8, true), ("b", 1, 8, true)],
            out_rows: 5,
            out_cols: 8,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let g = r.param(pid("g"));
                let b = r.param(pid("b"));
                r.layer_norm(p, g, b, 1e-5)
            },
        },
        Case {
            name: "gelu_4x6",
            params: vec![("p", 4, 6, true)],
            out_rows: 4,
            out_cols: 6,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.gelu(p)
            },
        },
        Case {
            name: "dropout_p03_5x4",
            params: vec![("p", 5, 4, true)],
            out_rows: 5,
            out_cols: 4,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.dropout(p, 0.3)
            },
        },
        Case {
            name: "embedding_lookup_10x6",
            params: vec![("p", 10, 6, true)],
            out_rows: 12,
            out_cols: 6,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.token_embedding(p)
            },
        },
        Case {
            name: "cross_entropy_mean_4x5",
            params: vec![("p", 4, 5, true)],
            out_rows: 1,
            out_cols: 1,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.cross_entropy_mean(p)
            },
        },
        Case {
            name: "slice_rows_6x4_mid",
            params: vec![("p", 6, 4, true)],
            out_rows: 3,
            out_cols: 4,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.slice_rows(p, 2, 3)
            },
        },
        Case {
            name: "slice_cols_4x8_mid",
            params: vec![("p", 4, 8, true)],
            out_rows: 4,
            out_cols: 3,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.slice_cols(p, 4, 3)
            },
        },
        Case {
            name: "concat_rows_2x4_3x4",
            params: vec![("p", 2, 4, true), ("q", 3, 4, true)],
            out_rows: 5,
            out_cols: 4,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let q = r.param(pid("q"));
                r.concat_rows(&[p, q])
            },
        },
        Case {
            name: "concat_cols_3x2_3x5",
            params: vec![("p", 3, 2, true), ("q", 3, 5, true)],
            out_rows: 3,
            out_cols: 7,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let q = r.param(pid("q"));
                r.concat_cols(&[p, q])
            },
        },
        Case {
            name: "mean_pool_rows_6x5_g3",
            params: vec![("p", 6, 5, true)],
            out_rows: 2,
            out_cols: 5,
            build: |r, pid| {
                let p = r.param(pid("p"));
                r.mean_pool_rows(p, 3)
            },
        },
        Case {
            name: "block_matmul_nt_2blocks_of_3",
            params: vec![("p", 6, 5, true), ("q", 6, 5, true)],
            out_rows: 6,
            out_cols: 3,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let q = r.param(pid("q"));
                r.block_matmul_nt(p, q, 3)
            },
        },
        Case {
            name: "block_matmul_nt_rhs_only",
            params: vec![("w", 6, 5, false), ("p", 6, 5, true)],
            out_rows: 6,
            out_cols: 3,
            build: |r, pid| {
                let w = r.param(pid("w"));
                let p = r.param(pid("p"));
                r.block_matmul_nt(w, p, 3)
            },
        },
        Case {
            name: "block_matmul_nn_2blocks_of_3",
            params: vec![("p", 6, 3, true), ("q", 6, 5, true)],
            out_rows: 6,
            out_cols: 5,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let q = r.param(pid("q"));
                r.block_matmul_nn(p, q, 3)
            },
        },
        Case {
            name: "block_matmul_nn_lhs_only",
            params: vec![("p", 6, 3, true), ("w", 6, 5, false)],
            out_rows: 6,
            out_cols: 5,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let w = r.param(pid("w"));
                r.block_matmul_nn(p, w, 3)
            },
        },
        Case {
            name: "softmax_matmul_chain",
            params: vec![("p", 3, 4, true), ("v", 4, 4, false)],
            out_rows: 3,
            out_cols: 4,
            build: |r, pid| {
                let p = r.param(pid("p"));
                let v = r.param(pid("v"));
                let s = r.row_softmax(p)?;
                let u = r.matmul(s, v)?;
                r.gelu(u)
            },
        },
        Case {
            name: "attention_shaped_block",
            params: vec![("q", 6, 8, true), ("k", 6, 8, true), ("v", 6, 8, true)],
            out_rows: 3,
            out_cols: 16,
            build: |r, pid| {
                // Two 3-row sequences, two heads of width 4, softmax attention each,
                // heads concatenated then sequences stacked column-wise.
                let q = r.param(pid("q"));
                let k = r.param(pid("k"));
                let v = r.param(pid("v"));
                let mut seqs = Vec::new();
                for s in 0..2 {
                    let qs = r.slice_rows(q, s * 3, 3)?;
                    let ks = r.slice_rows(k, s * 3, 3)?;
                    let vs = r.slice_rows(v, s * 3, 3)?;
                    let mut heads = Vec::new();
                    for hd in 0..2 {
                        let qh = r.slice_cols(qs, hd * 4, 4)?;
                        let kh = r.slice_cols(ks, hd * 4, 4)?;
                        let vh = r.slice_cols(vs, hd * 4, 4)?;
                        let kt = r.transpose(kh)?;
                        let sc = r.matmul(qh, kt)?;
                        let sc = r.scale(sc, 0.5)?;
                        let at = r.row_softmax(sc)?;
                        heads.push(r.matmul(at, vh)?);
                    }
                    seqs.push(r.concat_cols(&heads)?);
                }
                r.concat_cols(&seqs)
            },
        },
        Case {
            name: "attention_blocked_heads",
            params: vec![("q", 6, 8, true), ("k", 6, 8, true), ("v", 6, 8, true)],
            out_rows: 6,
            out_cols: 8,
            build: |r, pid| {
                // Two 3-row sequences, two heads of width 4, the blocked formulation
                // the model uses: one scores/mix node pair per head over all blocks.
                let q = r.param(pid("q"));
                let k = r.param(pid("k"));
                let v = r.param(pid("v"));
                let mut heads = Vec::new();
                for hd in 0..2 {
                    let qh = r.slice_cols(q, hd * 4, 4)?;
                    let kh = r.slice_cols(k, hd * 4, 4)?;
                    let vh = r.slice_cols(v, hd * 4, 4)?;
                    let sc = r.block_matmul_nt(qh, kh, 3)?;
                    let sc = r.scale(sc, 0.5)?;
                    let at = r.row_softmax(sc)?;
                    heads.push(r.block_matmul_nn(at, vh, 3)?);
                }
                r.concat_cols(&heads)
            },
        },
        Case {
            name: "residual_norm_ffn_chain",
            params: vec![
                ("x", 4, 6, true),
                ("g", 1, 6, true),
                ("b", 1, 6, true),
                ("w1", 6, 9, true),
                ("w2", 9, 6, true),
            ],
            out_rows: 4,
            out_cols: 6,
            build: |r, pid| {
                let x = r.param(pid("x"));
                let g = r.param(pid("g"));
                let b = r.param(pid("b"));
                let w1 = r.param(pid("w1"));
                let w2 = r.param(pid("w2"));
                let n = r.layer_norm(x, g, b, 1e-5)?;
                let f = r.matmul(n, w1)?;
                let f = r.gelu(f)?;
                let f = r.matmul(f, w2)?;
                r.add(n, f)
            },
        },
    ];
    cases.iter().map(|c| run_case(c, h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_a_hand_quadratic() {
        // f(x) = x0^2 + 3 x0 x1, grad = [2 x0 + 3 x1, 3 x0].
        let theta = [2.0, -1.0];
        let g = fd_grad_vec(&theta, DEFAULT_H, |t| Ok(t[0] * t[0] + 3.0 * t[0] * t[1])).unwrap();
        assert!(rel_err(1.0, g[0]) < 1e-9);
        assert!(rel_err(6.0, g[1]) < 1e-9);
    }

    #[test]
    fn every_operator_backward_matches_central_differences() {
        for check in op_suite(DEFAULT_H).unwrap() {
            assert!(
                check.max_rel_err < 1e-5,
                "{}: worst relative error {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
