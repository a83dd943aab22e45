//! Experiment runner: run configuration, the epoch loop, and the four commands
//! the CLI exposes (`train`, `profile`, `analyze`, `report`).
//!
//! Every epoch follows the same shape: probe the model on the held-out probe
//! split, score adapter importance, let the scheduler decide freezes (effective
//! for this epoch's steps), run the gradient steps with the current
//! backpropagation cut, then log metrics and resource numbers. Decisions land
//! before any step of the epoch, so "frozen at epoch t" is unambiguous in the
//! logs.
//!
//! A run directory is self-describing: the effective config is serialized into
//! it before training starts, and re-running that config reproduces the
//! metrics file byte for byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::analysis::{
    self, landscape, masked_delta, reg_penalty, top_k_eigs, ModelObjective, SPECTRUM_MAX_ITER,
    SPECTRUM_TOL,
};
use crate::checkpoint::Checkpoint;
use crate::data::{gen_task, Dataset, Example, TaskKind};
use crate::error::{Error, Result};
use crate::importance::{epoch_importances, trajectory_similarity, ImportanceRecord};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::resource::{epoch_report, step_costs, ResourceReport};
use crate::rng::named_stream;
use crate::schedule::{FreezeEvent, Policy, ScheduleConfig, Scheduler};
use crate::tape::{backward, Batch, RealCtx};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOURCES_FILE: &str = "resources.csv";
pub const FREEZE_PATTERN_FILE: &str = "freeze_pattern.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STATUS_FILE: &str = "status.json";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const PROFILE_FILE: &str = "profile.csv";
pub const REPORT_FILE: &str = "report.csv";

pub const RESOURCES_HEADER: &str = "epoch,activation_bytes,optimizer_bytes,fwd_flops,bwd_flops";
pub const PROFILE_HEADER: &str = "layer,val_accuracy,activation_bytes";
pub const REPORT_HEADER: &str = "run,accuracy,activation_bytes,optimizer_bytes,bwd_flops,\
frozen_fraction,accuracy_delta_pct,activation_bytes_delta_pct,optimizer_bytes_delta_pct,\
bwd_flops_delta_pct,frozen_fraction_delta_pts";

/// Loss-slice defaults for `analyze landscape`.
pub const LANDSCAPE_RANGE: f64 = 0.5;
pub const LANDSCAPE_GRID: usize = 11;
/// Eigenpair count for `analyze spectrum`.
pub const SPECTRUM_K: usize = 5;

// ── configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub n: usize,
    pub seq_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { kind: TaskKind::Parity, n: 10_000, seq_len: 8 }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    /// Target number of probe rows (rounded up to whole sequences); the probe
    /// set is fixed for the whole run and disjoint from the training split.
    pub probe_rows: usize,
    /// Column-center activations before the similarity computation.
    pub centered_cka: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { batch_size: 50, probe_rows: 512, centered_cka: true }
    }
}

/// Everything a run needs; fully serialized into the run directory so any run
/// is reproducible from its saved config alone.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optim: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "run_out".into(),
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            optim: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.task.seq_len == 0 || self.task.seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "task.seq_len {} outside 1..=model.max_seq {}",
                self.task.seq_len, self.model.max_seq
            )));
        }
        let want = self.task.kind.n_classes(self.model.vocab_size);
        if self.model.n_classes != want {
            return Err(Error::Config(format!(
                "model.n_classes is {} but task.kind {} needs {}",
                self.model.n_classes, self.task.kind, want
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.batch_size > self.task.n * 8 / 10 {
            return Err(Error::Config(format!(
                "train.batch_size {} exceeds the training split of {}",
                self.train.batch_size,
                self.task.n * 8 / 10
            )));
        }
        if self.train.probe_rows < 2 {
            return Err(Error::Config("train.probe_rows must be at least 2".into()));
        }
        Ok(())
    }

    /// Apply the `--policy {safe,none,random}` CLI override. Random keeps the
    /// configured rate when the config already uses it, otherwise drops half
    /// the adapters, keyed to the run seed.
    pub fn with_policy(mut self, name: &str) -> Result<RunConfig> {
        self.schedule.policy = match name {
            "safe" => Policy::Safe,
            "none" => Policy::None,
            "random" => match self.schedule.policy {
                Policy::RandomDrop { .. } => self.schedule.policy,
                _ => Policy::RandomDrop { rate: 0.5, seed: self.seed },
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown policy `{other}` (expected safe, none, or random)"
                )))
            }
        };
        Ok(self)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// ── shared run plumbing ─────────────────────────────────────────────────────

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_status(dir: &Path, state: &str) -> Result<()> {
    write_text(&dir.join(STATUS_FILE), &format!("{{\"state\":\"{state}\"}}\n"))
}

/// The fixed probe set: whole sequences off the probe split, enough to cover
/// the requested row count, packed in evaluation-sized batches.
fn probe_batches(ds: &Dataset, cfg: &RunConfig) -> Vec<Batch> {
    let want_seqs = cfg.train.probe_rows.div_ceil(cfg.task.seq_len).max(1);
    let take = want_seqs.min(ds.probe().len());
    Dataset::batches(&ds.probe()[..take], cfg.train.batch_size, false)
}

fn valid_batches(ds: &Dataset, cfg: &RunConfig) -> Vec<Batch> {
    Dataset::batches(ds.valid(), cfg.train.batch_size, false)
}

/// Sequence-weighted mean loss and accuracy over a batch list.
fn evaluate(model: &Model, batches: &[Batch]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut acc = 0.0;
    let mut n = 0usize;
    for b in batches {
        let (l, a) = model.eval_batch(b)?;
        loss += l * b.n_seqs as f64;
        acc += a * b.n_seqs as f64;
        n += b.n_seqs;
    }
    Ok((loss / n as f64, acc / n as f64))
}

/// One epoch line in the metrics JSONL log.
#[derive(serde::Serialize)]
struct EpochMetrics<'a> {
    epoch: usize,
    train_loss: f64,
    valid_loss: f64,
    valid_accuracy: f64,
    cut: usize,
    frozen: &'a [bool],
    freeze_events: &'a [FreezeEvent],
    importance: &'a ImportanceRecord,
    resources: &'a ResourceReport,
}

/// End-of-run summary; the integrated reductions compare the epochs after
/// warm-up against the never-frozen per-step cost of the same config.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub final_valid_loss: f64,
    pub final_valid_accuracy: f64,
    pub t_w: Option<usize>,
    pub freeze_count: usize,
    pub frozen_fraction: f64,
    pub activation_reduction_pct: f64,
    pub backward_flop_reduction_pct: f64,
    pub wall_seconds: f64,
}

/// Train with adapters on every layer; writes the run directory, returns the summary.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    train_run(cfg, &vec![true; cfg.model.n_layers])
}

fn train_run(cfg: &RunConfig, placement: &[bool]) -> Result<RunSummary> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    let snap_dir = out_dir.join(SNAPSHOT_DIR);
    std::fs::create_dir_all(&snap_dir).map_err(|e| Error::io(snap_dir.display().to_string(), e))?;
    let config_text = toml::to_string_pretty(cfg).expect("config serializes");
    write_text(&out_dir.join(CONFIG_FILE), &config_text)?;
    write_status(&out_dir, "running")?;
    match train_run_inner(cfg, placement, &out_dir, &snap_dir) {
        Ok(summary) => {
            write_status(&out_dir, "complete")?;
            Ok(summary)
        }
        Err(e) => {
            // Best effort: the directory stays marked incomplete.
            let _ = write_status(&out_dir, "incomplete");
            Err(e)
        }
    }
}

fn train_run_inner(
    cfg: &RunConfig,
    placement: &[bool],
    out_dir: &Path,
    snap_dir: &Path,
) -> Result<RunSummary> {
    let started = std::time::Instant::now();
    let ds = gen_task(cfg.task.kind, cfg.task.n, cfg.task.seq_len, cfg.model.vocab_size, cfg.seed)?;
    let probe = probe_batches(&ds, cfg);
    let valid = valid_batches(&ds, cfg);

    let mut model = Model::init_with_placement(&cfg.model, cfg.seed, placement)?;
    let mut optimizer = AdamW::new(cfg.optim, &model.store);
    let mut scheduler = Scheduler::new(cfg.schedule, cfg.model.n_layers)?;

    let open = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        let path = out_dir.join(name);
        let f = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(std::io::BufWriter::new(f))
    };
    let io_err = |e: std::io::Error| Error::io(out_dir.display().to_string(), e);
    let mut metrics = open(METRICS_FILE)?;
    let mut resources = open(RESOURCES_FILE)?;
    let mut pattern = open(FREEZE_PATTERN_FILE)?;
    writeln!(resources, "{RESOURCES_HEADER}").map_err(io_err)?;
    let header: Vec<String> = (0..cfg.model.n_layers).map(|i| format!("adapter_{i}")).collect();
    writeln!(pattern, "epoch,{}", header.join(",")).map_err(io_err)?;

    Checkpoint::snapshot(&model, scheduler.frozen_mask(), &scheduler.state.freeze_epoch, 0)
        .write(&snap_dir.join("init.bin"))?;

    // Never-frozen per-step cost of this config: the reduction baseline.
    let thawed = vec![false; cfg.model.n_layers];
    let base =
        step_costs(&cfg.model, placement, &thawed, cfg.train.batch_size, cfg.task.seq_len)?;

    let mut prev_record: Option<ImportanceRecord> = None;
    let mut frozen_cell = vec![0.0f64; cfg.model.n_layers];
    let mut reports: Vec<ResourceReport> = Vec::new();
    let mut global_step: u64 = 0;
    let mut final_eval = (f64::NAN, f64::NAN);

    for epoch in 0..cfg.schedule.total_epochs {
        // Probe and decide before any gradient step of the epoch.
        let record =
            epoch_importances(&model, &probe, epoch, prev_record.as_ref(), cfg.train.centered_cka)?;
        let newly = scheduler.observe(record.clone())?;
        for &layer in &newly {
            frozen_cell[layer] = record.scores[layer];
        }
        let frozen = scheduler.frozen_mask().to_vec();
        model.sync_trainability(&frozen);
        optimizer.sync(&model.store);
        let cut = model.cut(&frozen);
        let plan = step_costs(&cfg.model, placement, &frozen, cfg.train.batch_size, cfg.task.seq_len)?;

        let mut order: Vec<usize> = ds.train_range().collect();
        order.shuffle(&mut named_stream(cfg.seed, &format!("train.order.{epoch}")));
        let shuffled: Vec<Example> = order.iter().map(|&i| ds.examples[i].clone()).collect();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in Dataset::batches(&shuffled, cfg.train.batch_size, true) {
            let mut ctx = RealCtx::training(
                &model.store,
                &batch,
                cfg.model.n_layers,
                cut,
                cfg.seed,
                global_step,
            );
            let out = model.loss_forward(&mut ctx)?;
            loss_sum += ctx.scalar(out.loss);
            let tape = ctx.into_tape();
            debug_assert_eq!(tape.retained_bytes(), plan.activation_bytes);
            debug_assert_eq!(tape.fwd_flops(), plan.forward_flops);
            let grads = backward(&tape, &model.store, out.loss, Some(cut))?;
            debug_assert_eq!(grads.bwd_flops, plan.backward_flops);
            optimizer.step(&mut model.store, &grads)?;
            global_step += 1;
            steps += 1;
        }

        let (valid_loss, valid_accuracy) = evaluate(&model, &valid)?;
        final_eval = (valid_loss, valid_accuracy);
        let report = epoch_report(
            epoch,
            &cfg.model,
            placement,
            &frozen,
            cfg.train.batch_size,
            cfg.task.seq_len,
        )?;
        let events: Vec<FreezeEvent> =
            scheduler.state.events.iter().filter(|e| e.epoch == epoch).cloned().collect();
        let line = EpochMetrics {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            valid_loss,
            valid_accuracy,
            cut,
            frozen: &frozen,
            freeze_events: &events,
            importance: &record,
            resources: &report,
        };
        writeln!(metrics, "{}", serde_json::to_string(&line).expect("metrics serialize"))
            .map_err(io_err)?;
        writeln!(
            resources,
            "{},{},{},{},{}",
            epoch,
            report.activation_bytes,
            report.optimizer_bytes,
            report.forward_flops,
            report.backward_flops
        )
        .map_err(io_err)?;
        let cells: Vec<String> = (0..cfg.model.n_layers)
            .map(|i| if frozen[i] { format!("{}", frozen_cell[i]) } else { "0".into() })
            .collect();
        writeln!(pattern, "{epoch},{}", cells.join(",")).map_err(io_err)?;
        metrics.flush().map_err(io_err)?;
        resources.flush().map_err(io_err)?;
        pattern.flush().map_err(io_err)?;

        Checkpoint::snapshot(&model, &frozen, &scheduler.state.freeze_epoch, epoch)
            .write(&snap_dir.join(format!("epoch_{epoch:04}.bin")))?;
        reports.push(report);
        prev_record = Some(record);
    }

    let frozen = scheduler.frozen_mask().to_vec();
    Checkpoint::full(&model, &frozen, &scheduler.state.freeze_epoch, cfg.schedule.total_epochs)
        .write(&out_dir.join(CHECKPOINT_FILE))?;

    // Integrate actual per-step costs over the epochs strictly after warm-up
    // and compare against the never-frozen baseline.
    let t_w = scheduler.state.t_w;
    let window: Vec<&ResourceReport> = match t_w {
        Some(tw) => reports.iter().filter(|r| r.epoch > tw).collect(),
        None => Vec::new(),
    };
    let reduction = |actual: &dyn Fn(&ResourceReport) -> u64, base: u64| -> f64 {
        if window.is_empty() || base == 0 {
            return 0.0;
        }
        let got: u64 = window.iter().map(|r| actual(r)).sum();
        100.0 * (1.0 - got as f64 / (base as f64 * window.len() as f64))
    };
    let placed = placement.iter().filter(|&&p| p).count();
    let summary = RunSummary {
        epochs: cfg.schedule.total_epochs,
        final_valid_loss: final_eval.0,
        final_valid_accuracy: final_eval.1,
        t_w,
        freeze_count: scheduler.state.events.len(),
        frozen_fraction: if placed == 0 {
            0.0
        } else {
            frozen.iter().zip(placement).filter(|&(&f, &p)| f && p).count() as f64 / placed as f64
        },
        activation_reduction_pct: reduction(&|r| r.activation_bytes, base.activation_bytes),
        backward_flop_reduction_pct: reduction(&|r| r.backward_flops, base.backward_flops),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_text(
        &out_dir.join(SUMMARY_FILE),
        &format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serializes")),
    )?;
    Ok(summary)
}

// ── profile ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProfileRow {
    pub layer: usize,
    pub val_accuracy: f64,
    pub activation_bytes: u64,
}

/// Train one single-adapter variant per layer (same seed, so shared weights are
/// bit-identical across variants) and tabulate final accuracy against the
/// modeled per-step activation bytes. Freezing is disabled inside the variants:
/// this is an ablation instrument, not a policy run.
pub fn cmd_profile(cfg: &RunConfig) -> Result<Vec<ProfileRow>> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rows = Vec::new();
    for layer in 0..cfg.model.n_layers {
        let placement: Vec<bool> = (0..cfg.model.n_layers).map(|i| i == layer).collect();
        let mut variant = cfg.clone();
        variant.schedule.policy = Policy::None;
        variant.out_dir =
            out_dir.join(format!("layer_{layer}")).to_string_lossy().into_owned();
        let summary = train_run(&variant, &placement)?;
        let thawed = vec![false; cfg.model.n_layers];
        let costs =
            step_costs(&cfg.model, &placement, &thawed, cfg.train.batch_size, cfg.task.seq_len)?;
        rows.push(ProfileRow {
            layer,
            val_accuracy: summary.final_valid_accuracy,
            activation_bytes: costs.activation_bytes,
        });
    }
    let mut csv = String::from(PROFILE_HEADER);
    for r in &rows {
        csv.push_str(&format!("\n{},{},{}", r.layer, r.val_accuracy, r.activation_bytes));
    }
    csv.push('\n');
    write_text(&out_dir.join(PROFILE_FILE), &csv)?;
    Ok(rows)
}

// ── analyze ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisKind {
    Landscape,
    Spectrum,
    Penalty,
    Trajectory,
}

impl std::str::FromStr for AnalysisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<AnalysisKind> {
        match s {
            "landscape" => Ok(AnalysisKind::Landscape),
            "spectrum" => Ok(AnalysisKind::Spectrum),
            "penalty" => Ok(AnalysisKind::Penalty),
            "trajectory" => Ok(AnalysisKind::Trajectory),
            other => Err(Error::Config(format!(
                "unknown analysis `{other}` (expected landscape, spectrum, penalty, or trajectory)"
            ))),
        }
    }
}

/// Run one analysis against a completed run directory's final checkpoint.
/// Returns the path of the file it wrote.
pub fn cmd_analyze(run_dir: &Path, which: AnalysisKind) -> Result<PathBuf> {
    let cfg = load_config(&run_dir.join(CONFIG_FILE))?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        return Err(Error::Checkpoint(format!(
            "{} has no final checkpoint; the run is incomplete",
            run_dir.display()
        )));
    }
    let ckpt = Checkpoint::read(&ckpt_path)?;
    let model = ckpt.to_model()?;
    let ds = gen_task(cfg.task.kind, cfg.task.n, cfg.task.seq_len, cfg.model.vocab_size, cfg.seed)?;

    match which {
        AnalysisKind::Landscape => {
            let obj = ModelObjective::new(&model, &valid_batches(&ds, &cfg))?;
            let theta = obj.theta();
            let grid = landscape(&obj, &theta, LANDSCAPE_RANGE, LANDSCAPE_GRID, cfg.seed)?;
            let mut csv = String::from("alpha,beta,loss");
            for (i, &alpha) in grid.coords.iter().enumerate() {
                for (j, &beta) in grid.coords.iter().enumerate() {
                    csv.push_str(&format!("\n{alpha},{beta},{}", grid.losses[i][j]));
                }
            }
            csv.push('\n');
            let path = run_dir.join("landscape.csv");
            write_text(&path, &csv)?;
            Ok(path)
        }
        AnalysisKind::Spectrum => {
            let mut obj = ModelObjective::new(&model, &valid_batches(&ds, &cfg))?;
            let theta = obj.theta();
            let spec =
                top_k_eigs(&mut obj, &theta, SPECTRUM_K, SPECTRUM_TOL, SPECTRUM_MAX_ITER, cfg.seed)?;
            #[derive(serde::Serialize)]
            struct SpectrumFile<'a> {
                k: usize,
                tol: f64,
                #[serde(flatten)]
                spectrum: &'a analysis::Spectrum,
            }
            let path = run_dir.join("spectrum.json");
            let body = serde_json::to_string_pretty(&SpectrumFile {
                k: SPECTRUM_K,
                tol: SPECTRUM_TOL,
                spectrum: &spec,
            })
            .expect("spectrum serializes");
            write_text(&path, &format!("{body}\n"))?;
            Ok(path)
        }
        AnalysisKind::Penalty => {
            let mut initial = model.clone();
            Checkpoint::read(&run_dir.join(SNAPSHOT_DIR).join("init.bin"))?
                .apply_to(&mut initial)?;
            let delta = masked_delta(&model, &initial, &ckpt.meta.frozen)?;
            #[derive(serde::Serialize)]
            struct PenaltyFile {
                penalty: f64,
                active_coordinates: usize,
                total_coordinates: usize,
                frozen: Vec<bool>,
            }
            let body = serde_json::to_string_pretty(&PenaltyFile {
                penalty: reg_penalty(&delta),
                active_coordinates: delta.active_count(),
                total_coordinates: delta.theta.len(),
                frozen: ckpt.meta.frozen.clone(),
            })
            .expect("penalty serializes");
            let path = run_dir.join("penalty.json");
            write_text(&path, &format!("{body}\n"))?;
            Ok(path)
        }
        AnalysisKind::Trajectory => {
            let snap_dir = run_dir.join(SNAPSHOT_DIR);
            let mut epochs = Vec::new();
            for e in 0..cfg.schedule.total_epochs {
                let p = snap_dir.join(format!("epoch_{e:04}.bin"));
                if p.exists() {
                    epochs.push((e, p));
                }
            }
            if epochs.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "{} has no per-epoch snapshots",
                    snap_dir.display()
                )));
            }
            let mut models = Vec::with_capacity(epochs.len());
            for (e, p) in &epochs {
                let mut m = model.clone();
                Checkpoint::read(p)?.apply_to(&mut m)?;
                models.push((*e, m));
            }
            let snapshots: Vec<(usize, &Model)> =
                models.iter().map(|(e, m)| (*e, m)).collect();
            let probe = probe_batches(&ds, &cfg);
            let grid =
                trajectory_similarity(&snapshots, &model, &probe, cfg.train.centered_cka)?;
            let cols: Vec<String> =
                (0..cfg.model.n_layers).map(|i| format!("layer_{i}")).collect();
            let mut csv = format!("epoch,{}", cols.join(","));
            for (e, row) in grid.epochs.iter().zip(&grid.grid) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                csv.push_str(&format!("\n{e},{}", cells.join(",")));
            }
            csv.push('\n');
            let path = run_dir.join("trajectory.csv");
            write_text(&path, &csv)?;
            Ok(path)
        }
    }
}

// ── report ──────────────────────────────────────────────────────────────────

struct RunFacts {
    name: String,
    task: TaskConfig,
    vocab_size: usize,
    accuracy: f64,
    activation_bytes: u64,
    optimizer_bytes: u64,
    bwd_flops: u64,
    frozen_fraction: f64,
}

fn read_run_facts(dir: &Path) -> Result<RunFacts> {
    let cfg = load_config(&dir.join(CONFIG_FILE))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&summary_path)
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;
    let summary: RunSummary = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", summary_path.display())))?;
    let res_path = dir.join(RESOURCES_FILE);
    let res = std::fs::read_to_string(&res_path)
        .map_err(|e| Error::io(res_path.display().to_string(), e))?;
    let last = res
        .lines()
        .filter(|l| !l.trim().is_empty())
        .last()
        .ok_or_else(|| Error::Config(format!("{}: empty resources file", res_path.display())))?;
    let cols: Vec<&str> = last.split(',').collect();
    if cols.len() != 5 || cols[0] == "epoch" {
        return Err(Error::Config(format!("{}: malformed final row", res_path.display())));
    }
    let parse = |i: usize| -> Result<u64> {
        cols[i]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad number `{}`", res_path.display(), cols[i])))
    };
    Ok(RunFacts {
        name: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        task: cfg.task,
        vocab_size: cfg.model.vocab_size,
        accuracy: summary.final_valid_accuracy,
        activation_bytes: parse(1)?,
        optimizer_bytes: parse(2)?,
        bwd_flops: parse(4)?,
        frozen_fraction: summary.frozen_fraction,
    })
}

/// Side-by-side comparison of ≥2 completed runs on the same task, with
/// percentage deltas against the first run. Returns the CSV text.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<String> {
    if run_dirs.len() < 2 {
        return Err(Error::Config(format!(
            "report needs at least 2 run directories, got {}",
            run_dirs.len()
        )));
    }
    let facts: Vec<RunFacts> = run_dirs.iter().map(|d| read_run_facts(d)).collect::<Result<_>>()?;
    let first = &facts[0];
    for f in &facts[1..] {
        if f.task != first.task || f.vocab_size != first.vocab_size {
            return Err(Error::Config(format!(
                "run {} uses a different task than {}; refusing to compare",
                f.name, first.name
            )));
        }
    }
    let pct = |x: f64, x0: f64| -> f64 {
        if x0 == 0.0 {
            if x == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            100.0 * (x - x0) / x0
        }
    };
    let mut csv = String::from(REPORT_HEADER);
    for f in &facts {
        csv.push_str(&format!(
            "\n{},{},{},{},{},{},{},{},{},{},{}",
            f.name,
            f.accuracy,
            f.activation_bytes,
            f.optimizer_bytes,
            f.bwd_flops,
            f.frozen_fraction,
            pct(f.accuracy, first.accuracy),
            pct(f.activation_bytes as f64, first.activation_bytes as f64),
            pct(f.optimizer_bytes as f64, first.optimizer_bytes as f64),
            pct(f.bwd_flops as f64, first.bwd_flops as f64),
            100.0 * (f.frozen_fraction - first.frozen_fraction),
        ));
    }
    csv.push('\n');
    Ok(csv)
}
