//! Post-hoc instruments for a trained model: Hessian spectrum estimates via
//! Hessian-vector products, 2-D loss-landscape slices, and the masked-delta
//! penalty that measures drift outside the still-active adapter coordinates.
//!
//! All three instruments see the model through [`Objective`], a flattened view
//! over the fine-tuned parameters (adapters and head, frozen or not — analysis
//! always works in the full fine-tuning subspace so runs with different freeze
//! histories stay comparable). The engine stays first-order: curvature comes
//! from central differences of gradients, never from second-order taping, so
//! tolerances below are budgets for that approximation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Model, ParamKind};
use crate::rng::named_stream;
use crate::tape::{backward, Batch, RealCtx};

/// Relative step scale for gradient central differences.
const HVP_EPS_SCALE: f64 = 1e-4;
/// Power-iteration acceptance threshold on the relative residual.
pub const SPECTRUM_TOL: f64 = 1e-4;
/// Power-iteration budget per eigenpair.
pub const SPECTRUM_MAX_ITER: usize = 200;

/// A twice-differentiable scalar objective over a flattened parameter vector.
/// `loss` and `grad` must describe the same deterministic function.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&mut self, theta: &[f64]) -> Result<f64>;
    fn grad(&mut self, theta: &[f64]) -> Result<Vec<f64>>;
    /// Contiguous (offset, len) spans that group coordinates into parameter
    /// blocks; landscape directions are norm-matched per block.
    fn blocks(&self) -> Vec<(usize, usize)> {
        vec![(0, self.dim())]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ── model objective ─────────────────────────────────────────────────────────

/// The mean evaluation loss of a model over a fixed batch set, as a function
/// of its adapter and head parameters. Dropout is disabled so the surface is
/// deterministic; base weights are constants.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    model: Model,
    batches: Vec<Batch>,
    pids: Vec<usize>,
    spans: Vec<(usize, usize)>,
    dim: usize,
    cut: usize,
    total_seqs: usize,
}

impl ModelObjective {
    pub fn new(model: &Model, batches: &[Batch]) -> Result<ModelObjective> {
        if batches.is_empty() {
            return Err(Error::Config("objective needs at least one batch".into()));
        }
        let mut model = model.clone();
        model.cfg.lora_dropout = 0.0;
        let thawed = vec![false; model.cfg.n_layers];
        model.sync_trainability(&thawed);
        let cut = model.cut(&thawed);
        let mut pids = Vec::new();
        let mut spans = Vec::new();
        let mut dim = 0;
        for pid in 0..model.store.metas.len() {
            if matches!(model.kind_of(pid), ParamKind::Base) {
                continue;
            }
            let len = model.store.metas[pid].elems();
            pids.push(pid);
            spans.push((dim, len));
            dim += len;
        }
        let total_seqs = batches.iter().map(|b| b.n_seqs).sum();
        Ok(ModelObjective { model, batches: batches.to_vec(), pids, spans, dim, cut, total_seqs })
    }

    /// Current parameter vector in flattening order.
    pub fn theta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for &pid in &self.pids {
            out.extend_from_slice(&self.model.store.values[pid].data);
        }
        out
    }

    fn scatter(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::Config(format!(
                "parameter vector has {} coordinates, objective expects {}",
                theta.len(),
                self.dim
            )));
        }
        for (i, &pid) in self.pids.iter().enumerate() {
            let (off, len) = self.spans[i];
            self.model.store.values[pid].data.copy_from_slice(&theta[off..off + len]);
        }
        Ok(())
    }
}

impl Objective for ModelObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&mut self, theta: &[f64]) -> Result<f64> {
        self.scatter(theta)?;
        let mut acc = 0.0;
        for b in &self.batches {
            let (loss, _) = self.model.eval_batch(b)?;
            acc += loss * b.n_seqs as f64;
        }
        Ok(acc / self.total_seqs as f64)
    }

    fn grad(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        self.scatter(theta)?;
        let mut flat = vec![0.0; self.dim];
        for b in &self.batches {
            let mut ctx =
                RealCtx::training(&self.model.store, b, self.model.cfg.n_layers, self.cut, 0, 0);
            let out = self.model.loss_forward(&mut ctx)?;
            let loss = out.loss;
            let tape = ctx.into_tape();
            let grads = backward(&tape, &self.model.store, loss, Some(self.cut))?;
            let w = b.n_seqs as f64 / self.total_seqs as f64;
            for (i, &pid) in self.pids.iter().enumerate() {
                let (off, len) = self.spans[i];
                if let Some(g) = &grads.by_pid[pid] {
                    for (dst, src) in flat[off..off + len].iter_mut().zip(&g.data) {
                        *dst += w * src;
                    }
                }
            }
        }
        Ok(flat)
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        self.spans.clone()
    }
}

/// A quadratic objective ½·θᵀAθ with a known Hessian, for validating the
/// instruments against analytic and dense-solver oracles.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub a: Vec<Vec<f64>>,
}

impl Quadratic {
    pub fn diag(entries: &[f64]) -> Quadratic {
        let m = entries.len();
        let mut a = vec![vec![0.0; m]; m];
        for (i, &d) in entries.iter().enumerate() {
            a[i][i] = d;
        }
        Quadratic { a }
    }

    /// Dense symmetric matrix with the given spectrum: A = Q·diag(eigs)·Qᵀ for
    /// a random orthonormal Q, so the true eigenvalues are known exactly.
    pub fn from_spectrum(eigs: &[f64], seed: u64) -> Quadratic {
        let m = eigs.len();
        let mut rng = named_stream(seed, "analysis.spectrum.q");
        // Gram-Schmidt on a random Gaussian matrix (full rank with probability 1).
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(m);
        while q.len() < m {
            let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for u in &q {
                let c = dot(&v, u);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= c * y;
                }
            }
            let n = norm(&v);
            if n > 1e-8 {
                v.iter_mut().for_each(|x| *x /= n);
                q.push(v);
            }
        }
        let mut a = vec![vec![0.0; m]; m];
        for (r, row) in a.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = (0..m).map(|k| q[k][r] * eigs[k] * q[k][c]).sum();
            }
        }
        Quadratic { a }
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn loss(&mut self, theta: &[f64]) -> Result<f64> {
        let g = self.grad(theta)?;
        Ok(0.5 * dot(theta, &g))
    }

    fn grad(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.a.iter().map(|row| dot(row, theta)).collect())
    }
}

// ── Hessian-vector products and spectrum ────────────────────────────────────

/// H·v by central difference of gradients at θ:
/// (∇L(θ+εv) − ∇L(θ−εv)) / 2ε with ε = 1e-4·(1+‖θ‖)/‖v‖.
pub fn hvp(obj: &mut dyn Objective, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let vn = norm(v);
    if vn == 0.0 {
        return Err(Error::Numeric("hvp direction has zero norm".into()));
    }
    let eps = HVP_EPS_SCALE * (1.0 + norm(theta)) / vn;
    let shift = |sign: f64| -> Vec<f64> {
        theta.iter().zip(v).map(|(t, d)| t + sign * eps * d).collect()
    };
    let gp = obj.grad(&shift(1.0))?;
    let gm = obj.grad(&shift(-1.0))?;
    let hv: Vec<f64> = gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite Hessian-vector product".into()));
    }
    Ok(hv)
}

/// Top-k eigenvalue estimates, largest magnitude first.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    #[serde(skip)]
    pub vectors: Vec<Vec<f64>>,
}

/// Power iteration on `hvp` with deflation against the eigenvectors already
/// accepted. Rayleigh quotients recover signed eigenvalues; a pair is accepted
/// when ‖Hv − λv‖ / |λ| drops below `tol`. Non-convergence is reported through
/// the flags, not as an error, so a partial spectrum still comes back.
pub fn top_k_eigs(
    obj: &mut dyn Objective,
    theta: &[f64],
    k: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<Spectrum> {
    if k == 0 {
        return Err(Error::Config("spectrum needs k >= 1".into()));
    }
    let dim = obj.dim();
    let k = k.min(dim);
    let mut spec = Spectrum {
        eigenvalues: Vec::new(),
        residuals: Vec::new(),
        iterations: Vec::new(),
        converged: Vec::new(),
        vectors: Vec::new(),
    };
    let deflate = |w: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for u in basis {
            let c = dot(w, u);
            for (x, y) in w.iter_mut().zip(u) {
                *x -= c * y;
            }
        }
    };
    for j in 0..k {
        let mut rng = named_stream(seed, &format!("analysis.eig.{j}"));
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        deflate(&mut v, &spec.vectors);
        let n = norm(&v);
        if n < 1e-12 {
            return Err(Error::Numeric("could not seed a direction outside the accepted eigenspace".into()));
        }
        v.iter_mut().for_each(|x| *x /= n);

        let mut lambda = 0.0;
        let mut residual = f64::INFINITY;
        let mut iters = 0;
        let mut converged = false;
        for it in 1..=max_iter {
            iters = it;
            let mut w = hvp(obj, theta, &v)?;
            deflate(&mut w, &spec.vectors);
            lambda = dot(&v, &w);
            let r: Vec<f64> = w.iter().zip(&v).map(|(wi, vi)| wi - lambda * vi).collect();
            residual = norm(&r) / lambda.abs().max(1e-12);
            if residual < tol {
                converged = true;
                break;
            }
            let wn = norm(&w);
            if wn < 1e-300 {
                // v is (numerically) in the null space: an exact λ = 0 eigenpair.
                lambda = 0.0;
                residual = 0.0;
                converged = true;
                break;
            }
            v = w.into_iter().map(|x| x / wn).collect();
        }
        spec.eigenvalues.push(lambda);
        spec.residuals.push(residual);
        spec.iterations.push(iters);
        spec.converged.push(converged);
        spec.vectors.push(v);
    }
    // Power iteration extracts in roughly |λ|-descending order already; make it exact.
    let mut order: Vec<usize> = (0..spec.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        spec.eigenvalues[b].abs().partial_cmp(&spec.eigenvalues[a].abs()).unwrap()
    });
    let pick = |xs: &[f64]| order.iter().map(|&i| xs[i]).collect::<Vec<_>>();
    spec.eigenvalues = pick(&spec.eigenvalues);
    spec.residuals = pick(&spec.residuals);
    spec.iterations = order.iter().map(|&i| spec.iterations[i]).collect();
    spec.converged = order.iter().map(|&i| spec.converged[i]).collect();
    spec.vectors = order.iter().map(|&i| spec.vectors[i].clone()).collect();
    Ok(spec)
}

/// Dense Hessian estimate, one `hvp` per basis vector, symmetrized. Quadratic
/// cost in the dimension — an oracle for small objectives, not an instrument.
pub fn dense_hessian(obj: &mut dyn Objective, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    let m = obj.dim();
    let mut h = vec![vec![0.0; m]; m];
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        let col = hvp(obj, theta, &e)?;
        for r in 0..m {
            h[r][i] = col[r];
        }
    }
    for r in 0..m {
        for c in (r + 1)..m {
            let s = 0.5 * (h[r][c] + h[c][r]);
            h[r][c] = s;
            h[c][r] = s;
        }
    }
    Ok(h)
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted by
/// magnitude descending. Independent of the power-iteration path on purpose.
pub fn jacobi_eigenvalues(matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = matrix.len();
    let mut a = matrix.to_vec();
    for (i, row) in a.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Config("jacobi needs a square matrix".into()));
        }
        for (j, &x) in row.iter().enumerate() {
            if (x - matrix[j][i]).abs() > 1e-9 * (1.0 + x.abs()) {
                return Err(Error::Config("jacobi needs a symmetric matrix".into()));
            }
        }
    }
    let off = |a: &Vec<Vec<f64>>| -> f64 {
        let mut s = 0.0;
        for r in 0..m {
            for c in 0..m {
                if r != c {
                    s += a[r][c] * a[r][c];
                }
            }
        }
        s.sqrt()
    };
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        if off(&a) <= 1e-12 * scale {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..m).map(|i| a[i][i]).collect();
    eigs.sort_by(|x, y| y.abs().partial_cmp(&x.abs()).unwrap());
    Ok(eigs)
}

// ── loss-landscape slices ───────────────────────────────────────────────────

/// A 2-D loss slice: losses over θ + α·d1 + β·d2 on a symmetric grid whose
/// center is the unperturbed loss.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LandscapeGrid {
    /// Shared axis coordinates for α and β; odd length, symmetric around 0.
    pub coords: Vec<f64>,
    /// `losses[i][j]` is the loss at (α = coords[i], β = coords[j]).
    pub losses: Vec<Vec<f64>>,
    #[serde(skip)]
    pub d1: Vec<f64>,
    #[serde(skip)]
    pub d2: Vec<f64>,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        let c = self.coords.len() / 2;
        self.losses[c][c]
    }
}

/// Worker pool for grid evaluation, capped by the `SAFETUNE_THREADS` env var.
pub fn thread_pool() -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("SAFETUNE_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder.build().expect("worker pool")
}

/// Evaluate an n×n loss slice through θ along two random directions.
///
/// Directions are drawn per coordinate, rescaled block-by-block to the norm of
/// the matching parameter block (so every parameter is perturbed in proportion
/// to its own scale; blocks that are exactly zero stay unperturbed), then
/// Gram-Schmidt orthogonalized and normalized to unit length. Grid cells are
/// independent and evaluated in parallel on clones; assembly is in index
/// order, so the grid is identical no matter the worker count.
pub fn landscape<O: Objective + Clone + Send + Sync>(
    obj: &O,
    theta: &[f64],
    range: f64,
    n: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    use rayon::prelude::*;

    if n % 2 == 0 || n < 3 {
        return Err(Error::Config(format!("landscape grid size {n} must be odd and at least 3")));
    }
    if !(range > 0.0) {
        return Err(Error::Config(format!("landscape range {range} must be positive")));
    }
    if theta.len() != obj.dim() {
        return Err(Error::Config("parameter vector length differs from objective dim".into()));
    }
    let draw = |name: &str| -> Vec<f64> {
        let mut rng = named_stream(seed, name);
        (0..theta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let mut d1 = draw("analysis.dir.a");
    let mut d2 = draw("analysis.dir.b");
    for (off, len) in obj.blocks() {
        let bn = norm(&theta[off..off + len]);
        for d in [&mut d1, &mut d2] {
            let dn = norm(&d[off..off + len]);
            let factor = if dn > 0.0 { bn / dn } else { 0.0 };
            d[off..off + len].iter_mut().for_each(|x| *x *= factor);
        }
    }
    let n1 = norm(&d1);
    if n1 < 1e-12 {
        return Err(Error::Numeric("landscape directions vanished; parameters are all zero".into()));
    }
    d1.iter_mut().for_each(|x| *x /= n1);
    let c = dot(&d1, &d2);
    for (x, y) in d2.iter_mut().zip(&d1) {
        *x -= c * y;
    }
    let n2 = norm(&d2);
    if n2 < 1e-12 {
        return Err(Error::Numeric("landscape directions are collinear".into()));
    }
    d2.iter_mut().for_each(|x| *x /= n2);

    let coords: Vec<f64> =
        (0..n).map(|i| range * (2.0 * i as f64 / (n as f64 - 1.0) - 1.0)).collect();
    let center = n / 2;
    let pool = thread_pool();
    let losses: Result<Vec<Vec<f64>>> = pool.install(|| {
        coords
            .par_iter()
            .enumerate()
            .map(|(i, &alpha)| {
                let mut o = obj.clone();
                coords
                    .iter()
                    .enumerate()
                    .map(|(j, &beta)| {
                        if i == center && j == center {
                            // The unperturbed point, bit for bit.
                            o.loss(theta)
                        } else {
                            let point: Vec<f64> = theta
                                .iter()
                                .zip(&d1)
                                .zip(&d2)
                                .map(|((t, a), b)| t + alpha * a + beta * b)
                                .collect();
                            o.loss(&point)
                        }
                    })
                    .collect()
            })
            .collect()
    });
    Ok(LandscapeGrid { coords, losses: losses?, d1, d2 })
}

// ── masked-delta penalty ────────────────────────────────────────────────────

/// Drift measurement inputs: the current and initial fine-tuning vectors plus
/// the 0/1 activity mask (true = coordinate still actively adapted).
#[derive(Debug, Clone)]
pub struct MaskedDelta {
    pub theta: Vec<f64>,
    pub theta0: Vec<f64>,
    pub active: Vec<bool>,
}

impl MaskedDelta {
    pub fn new(theta: Vec<f64>, theta0: Vec<f64>, active: Vec<bool>) -> Result<MaskedDelta> {
        if theta.len() != theta0.len() || theta.len() != active.len() {
            return Err(Error::Config(format!(
                "masked delta dimensions disagree: {} / {} / {}",
                theta.len(),
                theta0.len(),
                active.len()
            )));
        }
        Ok(MaskedDelta { theta, theta0, active })
    }

    /// Number of coordinates the mask keeps active (the mask's rank).
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// ‖(I − M)(θ − θ0)‖²: squared drift on the inactive coordinates. Frozen
/// adapters land in the inactive block, so their contribution is constant from
/// their freeze epoch on; this is a post-hoc measurement, never a loss term.
pub fn reg_penalty(delta: &MaskedDelta) -> f64 {
    delta
        .theta
        .iter()
        .zip(&delta.theta0)
        .zip(&delta.active)
        .filter(|&(_, &active)| !active)
        .map(|((t, t0), _)| (t - t0) * (t - t0))
        .sum()
}

/// Build the masked delta for a run: θ from the current model, θ0 from the
/// initial one, mask active on the head and on adapters of unfrozen layers.
pub fn masked_delta(current: &Model, initial: &Model, frozen: &[bool]) -> Result<MaskedDelta> {
    let same_cfg = serde_json::to_string(&current.cfg).expect("config serializes")
        == serde_json::to_string(&initial.cfg).expect("config serializes");
    if !same_cfg || current.placement != initial.placement {
        return Err(Error::Config("masked delta needs models from the same run".into()));
    }
    if frozen.len() != current.cfg.n_layers {
        return Err(Error::Config("freeze mask length differs from layer count".into()));
    }
    let mut theta = Vec::new();
    let mut theta0 = Vec::new();
    let mut active = Vec::new();
    for pid in 0..current.store.metas.len() {
        let is_active = match current.kind_of(pid) {
            ParamKind::Base => continue,
            ParamKind::Head => true,
            ParamKind::Adapter { layer } => !frozen[layer],
        };
        theta.extend_from_slice(&current.store.values[pid].data);
        theta0.extend_from_slice(&initial.store.values[pid].data);
        active.extend(std::iter::repeat(is_active).take(current.store.metas[pid].elems()));
    }
    MaskedDelta::new(theta, theta0, active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_task, Dataset, TaskKind};
    use crate::model::ModelConfig;

    struct Linear {
        g: Vec<f64>,
    }

    impl Objective for Linear {
        fn dim(&self) -> usize {
            self.g.len()
        }
        fn loss(&mut self, theta: &[f64]) -> Result<f64> {
            Ok(dot(&self.g, theta))
        }
        fn grad(&mut self, _theta: &[f64]) -> Result<Vec<f64>> {
            Ok(self.g.clone())
        }
    }

    fn tiny_objective() -> ModelObjective {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 11,
            max_seq: 6,
            n_classes: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_dropout: 0.1,
        };
        let model = Model::init(&cfg, 3).unwrap();
        let ds = gen_task(TaskKind::Parity, 20, 4, cfg.vocab_size, 5).unwrap();
        let batches = Dataset::batches(ds.train(), 8, true);
        ModelObjective::new(&model, &batches).unwrap()
    }

    #[test]
    fn hvp_recovers_a_diagonal_hessian_and_kills_linear_terms() {
        let mut q = Quadratic::diag(&[1.0, 2.0, 3.0]);
        let hv = hvp(&mut q, &[0.3, -0.1, 0.7], &[0.0, 1.0, 0.0]).unwrap();
        assert!((hv[0]).abs() < 1e-6 && (hv[1] - 2.0).abs() < 1e-6 && (hv[2]).abs() < 1e-6);

        let mut lin = Linear { g: vec![0.4, -2.0, 9.0] };
        let hv = hvp(&mut lin, &[1.0, 1.0, 1.0], &[0.5, 0.5, -0.5]).unwrap();
        assert!(hv.iter().all(|x| x.abs() < 1e-6));

        assert!(hvp(&mut q, &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn hvp_is_linear_and_symmetric_on_a_random_quadratic() {
        let mut q = Quadratic::from_spectrum(&[4.0, -2.5, 1.5, 0.5], 11);
        let theta = vec![0.2, -0.4, 0.1, 0.9];
        let mut rng = named_stream(7, "test.hvp");
        let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hu = hvp(&mut q, &theta, &u).unwrap();
        let hv = hvp(&mut q, &theta, &v).unwrap();
        let sym = (dot(&hu, &v) - dot(&u, &hv)).abs() / dot(&hu, &v).abs().max(1e-12);
        assert!(sym < 1e-4, "symmetry violation {sym}");

        let combo: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let hc = hvp(&mut q, &theta, &combo).unwrap();
        for i in 0..4 {
            let want = 2.0 * hu[i] - 3.0 * hv[i];
            assert!((hc[i] - want).abs() <= 1e-4 * (1.0 + want.abs()), "linearity at {i}");
        }
    }

    #[test]
    fn power_iteration_matches_known_and_dense_spectra() {
        let mut q = Quadratic::diag(&[5.0, -3.0, 1.0]);
        let spec = top_k_eigs(&mut q, &[0.0; 3], 3, SPECTRUM_TOL, SPECTRUM_MAX_ITER, 2).unwrap();
        let want = [5.0, -3.0, 1.0];
        for (got, want) in spec.eigenvalues.iter().zip(want) {
            assert!((got - want).abs() < 1e-4 * want.abs(), "got {got}, want {want}");
        }
        assert!(spec.converged.iter().all(|&c| c));
        assert!(dot(&spec.vectors[0], &spec.vectors[1]).abs() < 1e-6);

        // Against the dense Jacobi oracle on a non-diagonal matrix.
        let mut q = Quadratic::from_spectrum(&[6.0, 4.5, -4.0, 2.0, 1.0, 0.5], 19);
        let h = dense_hessian(&mut q, &[0.0; 6]).unwrap();
        let dense = jacobi_eigenvalues(&h).unwrap();
        let spec = top_k_eigs(&mut q, &[0.0; 6], 4, SPECTRUM_TOL, SPECTRUM_MAX_ITER, 3).unwrap();
        for (got, want) in spec.eigenvalues.iter().zip(&dense) {
            assert!((got - want).abs() < 1e-4 * want.abs(), "got {got}, want {want}");
        }
    }

    #[test]
    fn single_eigenpair_on_a_positive_definite_quadratic() {
        let mut q = Quadratic::diag(&[0.5, 7.0, 2.0]);
        let spec = top_k_eigs(&mut q, &[0.0; 3], 1, SPECTRUM_TOL, SPECTRUM_MAX_ITER, 4).unwrap();
        assert!((spec.eigenvalues[0] - 7.0).abs() < 1e-4 * 7.0);
    }

    #[test]
    fn landscape_center_is_the_unperturbed_loss_and_seeds_reproduce() {
        let obj = tiny_objective();
        let theta = obj.theta();
        let unperturbed = obj.clone().loss(&theta).unwrap();
        let grid = landscape(&obj, &theta, 0.5, 5, 21).unwrap();
        assert_eq!(grid.center().to_bits(), unperturbed.to_bits());
        assert_eq!(grid.coords[2], 0.0);
        assert!((norm(&grid.d1) - 1.0).abs() < 1e-12);
        assert!((norm(&grid.d2) - 1.0).abs() < 1e-12);
        assert!(dot(&grid.d1, &grid.d2).abs() < 1e-10);
        assert!(grid.losses.iter().flatten().all(|l| l.is_finite()));

        let again = landscape(&obj, &theta, 0.5, 5, 21).unwrap();
        for (a, b) in grid.losses.iter().flatten().zip(again.losses.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(landscape(&obj, &theta, 0.5, 4, 21).is_err(), "even grid must be rejected");
        assert!(landscape(&obj, &theta, 0.0, 5, 21).is_err(), "zero range must be rejected");
    }

    #[test]
    fn penalty_examples_and_mask_bookkeeping() {
        let d = MaskedDelta::new(vec![1.0, 2.0], vec![1.0, 2.0], vec![false, false]).unwrap();
        assert_eq!(reg_penalty(&d), 0.0);
        let d = MaskedDelta::new(vec![9.0, -4.0], vec![0.0, 0.0], vec![true, true]).unwrap();
        assert_eq!(reg_penalty(&d), 0.0);
        let d = MaskedDelta::new(vec![1.0, 2.0, 3.0], vec![0.0; 3], vec![true, false, true]).unwrap();
        assert_eq!(reg_penalty(&d), 4.0);
        assert_eq!(d.active_count(), 2);
        assert!(MaskedDelta::new(vec![1.0], vec![1.0, 2.0], vec![true]).is_err());
    }

    #[test]
    fn masked_delta_tracks_frozen_adapters() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 11,
            max_seq: 6,
            n_classes: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_dropout: 0.0,
        };
        let initial = Model::init(&cfg, 3).unwrap();
        let mut current = initial.clone();
        // Drift one frozen-layer adapter coordinate and one head coordinate.
        let pid_a = current.store.pid("layer.0.attn.q_adapter.a").unwrap();
        current.store.values[pid_a].data[0] += 2.0;
        let pid_h = current.store.pid("head.w").unwrap();
        current.store.values[pid_h].data[0] += 5.0;

        let d = masked_delta(&current, &initial, &[true, false]).unwrap();
        // Only the frozen-layer drift counts; the head is always active.
        assert_eq!(reg_penalty(&d), 4.0);
        let per_layer_adapter: usize = 2 * (cfg.d_model * cfg.lora_rank + cfg.lora_rank * cfg.d_model);
        let head = cfg.d_model * cfg.n_classes + cfg.n_classes;
        assert_eq!(d.active_count(), per_layer_adapter + head);
        assert!(masked_delta(&current, &initial, &[true]).is_err());
    }
}
