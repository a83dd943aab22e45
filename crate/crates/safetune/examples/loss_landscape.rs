//! A 2-D loss-landscape slice around a trained model: two random directions,
//! block-wise norm matching, Gram-Schmidt, and a parallel grid sweep whose
//! center cell is the unperturbed loss bit for bit.
//!
//! ```text
//! cargo run --example loss_landscape          # all cores
//! SAFETUNE_THREADS=1 cargo run --example loss_landscape   # same numbers
//! ```

use safetune::analysis::{landscape, ModelObjective};
use safetune::data::{gen_task, Dataset, TaskKind};
use safetune::model::{Model, ModelConfig};

fn main() -> safetune::Result<()> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 16,
        max_seq: 8,
        n_classes: 2,
        lora_rank: 2,
        lora_alpha: 8.0,
        lora_dropout: 0.0,
    };
    // Give the adapters some trained mass so the slice has structure; a few
    // seeds' worth of Gaussian B entries stand in for a short training run.
    let mut model = Model::init(&cfg, 31)?;
    for pid in 0..model.store.metas.len() {
        let name = model.store.metas[pid].name.clone();
        if name.contains("adapter") && name.ends_with(".b") {
            let t = &mut model.store.values[pid];
            let mut rng = safetune::rng::named_stream(77, &name);
            *t = safetune::tensor::Tensor::gaussian(t.rows, t.cols, 0.05, &mut rng);
        }
    }

    let ds = gen_task(TaskKind::Majority, 100, 6, cfg.vocab_size, 8)?;
    let batches = Dataset::batches(ds.valid(), 10, false);
    let obj = ModelObjective::new(&model, &batches)?;
    let theta = obj.theta();
    let grid = landscape(&obj, &theta, 0.8, 9, 4)?;

    let center = grid.center();
    println!("loss slice around the model (center = unperturbed loss {center:.6}):\n");
    print!("{:>7}", "β\\α");
    for a in &grid.coords {
        print!(" {a:>8.3}");
    }
    println!();
    for (j, b) in grid.coords.iter().enumerate() {
        print!("{b:>7.3}");
        for i in 0..grid.coords.len() {
            print!(" {:>8.4}", grid.losses[i][j]);
        }
        println!();
    }

    let mut ortho = 0.0;
    for (x, y) in grid.d1.iter().zip(&grid.d2) {
        ortho += x * y;
    }
    println!("\n|<d1, d2>| = {:.2e}  (orthonormal by construction)", ortho.abs());
    println!("rerun with SAFETUNE_THREADS=1: the grid is identical cell for cell");
    Ok(())
}
