//! The curvature instrument, validated then applied: power iteration with
//! deflation recovers a constructed spectrum exactly, matches a dense Jacobi
//! oracle on a random quadratic, and then estimates the top eigenvalues of a
//! trained model's loss surface.
//!
//! ```text
//! cargo run --example hessian_spectrum
//! ```

use safetune::analysis::{
    dense_hessian, jacobi_eigenvalues, top_k_eigs, ModelObjective, Quadratic, SPECTRUM_MAX_ITER,
    SPECTRUM_TOL,
};
use safetune::data::{gen_task, Dataset, TaskKind};
use safetune::model::{Model, ModelConfig};

fn main() -> safetune::Result<()> {
    // A 12-parameter quadratic with a spectrum we chose ourselves.
    let truth = [9.0, -6.0, 4.0, 2.5, -1.5, 1.0, 0.8, 0.5, 0.3, 0.2, 0.1, 0.05];
    let mut q = Quadratic::from_spectrum(&truth, 17);
    let zero = vec![0.0; truth.len()];
    let spec = top_k_eigs(&mut q, &zero, 5, SPECTRUM_TOL, SPECTRUM_MAX_ITER, 1)?;
    println!("constructed spectrum, top-5 by |λ|:");
    println!("{:>12} {:>12} {:>10} {:>6}", "estimate", "truth", "residual", "iters");
    for (i, ((l, r), it)) in
        spec.eigenvalues.iter().zip(&spec.residuals).zip(&spec.iterations).enumerate()
    {
        println!("{l:>12.6} {:>12.6} {r:>10.2e} {it:>6}", truth[i]);
    }

    // Cross-check against a dense finite-difference Hessian + Jacobi rotations.
    let dense = jacobi_eigenvalues(&dense_hessian(&mut q, &zero)?)?;
    let worst: f64 = spec
        .eigenvalues
        .iter()
        .zip(&dense)
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max);
    println!("worst relative deviation from the dense oracle: {worst:.2e}");

    // Now the real thing: top curvature directions of a small trained model.
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 12,
        n_heads: 2,
        d_ff: 24,
        vocab_size: 16,
        max_seq: 8,
        n_classes: 2,
        lora_rank: 2,
        lora_alpha: 8.0,
        lora_dropout: 0.0,
    };
    let model = Model::init(&cfg, 23)?;
    let ds = gen_task(TaskKind::Parity, 80, 5, cfg.vocab_size, 23)?;
    let batches = Dataset::batches(ds.valid(), 8, false);
    let mut obj = ModelObjective::new(&model, &batches)?;
    let theta = obj.theta();
    let spec = top_k_eigs(&mut obj, &theta, 3, 1e-2, 60, 2)?;
    println!("\nmodel loss surface at init ({} fine-tuned coordinates):", theta.len());
    for ((l, r), c) in spec.eigenvalues.iter().zip(&spec.residuals).zip(&spec.converged) {
        println!("  λ ≈ {l:>12.6}   residual {r:.2e}   converged: {c}");
    }
    Ok(())
}
