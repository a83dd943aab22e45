//! Train the same small parity task under three freezing policies — none,
//! SAFE, and random-drop — and compare what each run costs and learns.
//!
//! ```text
//! cargo run --example train_policies
//! ```
//!
//! Run directories land under `target/example_runs/policies/`; the printed
//! table is the same comparison `safetune report` produces from those files.

use std::path::PathBuf;

use safetune::model::ModelConfig;
use safetune::optim::AdamWConfig;
use safetune::run::{cmd_report, cmd_train, RunConfig, TaskConfig, TrainSection};
use safetune::schedule::{Policy, ScheduleConfig, Warmup};
use safetune::data::TaskKind;

fn main() -> safetune::Result<()> {
    let root = PathBuf::from("target/example_runs/policies");
    let base = RunConfig {
        seed: 5,
        out_dir: String::new(),
        model: ModelConfig {
            n_layers: 4,
            d_model: 24,
            n_heads: 2,
            d_ff: 48,
            vocab_size: 16,
            max_seq: 8,
            n_classes: 2,
            lora_rank: 2,
            lora_alpha: 8.0,
            lora_dropout: 0.1,
        },
        task: TaskConfig { kind: TaskKind::Parity, n: 600, seq_len: 6 },
        optim: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
        schedule: ScheduleConfig {
            policy: Policy::Safe,
            tau_final: 0.35,
            warmup: Warmup::Auto { cap: 4 },
            t_f: 10,
            total_epochs: 12,
        },
        train: TrainSection { batch_size: 24, probe_rows: 60, centered_cka: true },
    };

    let policies = [
        ("none", Policy::None),
        ("safe", Policy::Safe),
        ("random", Policy::RandomDrop { rate: 0.5, seed: 5 }),
    ];
    let mut dirs = Vec::new();
    for (name, policy) in policies {
        let mut cfg = base.clone();
        cfg.schedule.policy = policy;
        cfg.out_dir = root.join(name).to_string_lossy().into_owned();
        let summary = cmd_train(&cfg)?;
        println!(
            "{name:<7} acc {:.3}  t_w {:?}  freezes {}  activation −{:.1}%  bwd flops −{:.1}%",
            summary.final_valid_accuracy,
            summary.t_w,
            summary.freeze_count,
            summary.activation_reduction_pct,
            summary.backward_flop_reduction_pct,
        );
        dirs.push(PathBuf::from(&cfg.out_dir));
    }

    println!("\nside-by-side (deltas vs the `none` baseline):");
    print!("{}", cmd_report(&dirs)?);
    Ok(())
}
