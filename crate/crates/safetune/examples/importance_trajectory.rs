//! Per-epoch adapter importance and the representation trajectory: train a
//! SAFE run, then replay its snapshots against the final model to see each
//! layer's representation converge (the final row is 1.0 by construction).
//!
//! ```text
//! cargo run --example importance_trajectory
//! ```

use std::path::{Path, PathBuf};

use safetune::data::TaskKind;
use safetune::model::ModelConfig;
use safetune::optim::AdamWConfig;
use safetune::run::{cmd_analyze, cmd_train, AnalysisKind, RunConfig, TaskConfig, TrainSection};
use safetune::schedule::{Policy, ScheduleConfig, Warmup};

fn main() -> safetune::Result<()> {
    let out = PathBuf::from("target/example_runs/trajectory");
    let cfg = RunConfig {
        seed: 3,
        out_dir: out.to_string_lossy().into_owned(),
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
    cmd_train(&cfg)?;

    // Importance per adapter, straight from the metrics log.
    println!("adapter importance by epoch (rows: epochs; cols: layers 0..{}):", cfg.model.n_layers - 1);
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).expect("metrics exist");
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let scores: Vec<f64> = v["importance"]["scores"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s.as_f64().unwrap())
            .collect();
        let frozen: Vec<bool> =
            v["frozen"].as_array().unwrap().iter().map(|b| b.as_bool().unwrap()).collect();
        let cells: Vec<String> = scores
            .iter()
            .zip(&frozen)
            .map(|(s, &f)| format!("{s:>7.4}{}", if f { "*" } else { " " }))
            .collect();
        println!("  epoch {:>2}  {}", v["epoch"], cells.join(" "));
    }
    println!("  (* = frozen at that epoch)");

    // Representation trajectory vs the final model, per layer.
    let path = cmd_analyze(Path::new(&cfg.out_dir), AnalysisKind::Trajectory)?;
    println!("\nCKA to the final representation (from {}):", path.display());
    print!("{}", std::fs::read_to_string(path).expect("trajectory exists"));
    Ok(())
}
