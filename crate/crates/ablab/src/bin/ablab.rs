//! Command-line surface: dataset generation, training, evaluation, oracle
//! certification, and the gamma/overlap sweeps, all driven by JSON configs.
//!
//! Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure.

use ablab::bootstrap::TrainError;
use ablab::evalkit::write_csv;
use ablab::oracle::{contraction_ratio, td_tabular, value_iteration, DiscreteMdp};
use ablab::run::{
    checkpoint_dir, eval_checkpoint, latest_checkpoint, EvalOptions, RunConfig, RunError,
    TrainData, Trainer,
};
use ablab::synthdata::{self, read_dataset, write_dataset, SceneConfig};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "ablab", version, about = "Annotation-bootstrapping lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model; resumable from the latest checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint of a training run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Step number, or the latest checkpoint when omitted.
        #[arg(long)]
        checkpoint: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify the discrete fixed point: value iteration, contraction, TD.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gamma or overlap sweep and emit sweep.csv.
    Sweep {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    scene: SceneConfig,
    n_scenes: usize,
    resolution: usize,
    seed: u64,
}

/// On-disk train config: the run config plus an optional dataset directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    #[serde(flatten)]
    run: RunConfig,
    #[serde(default)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleConfig {
    scene: SceneConfig,
    n_scenes: usize,
    sizes: Vec<usize>,
    gamma: f64,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_td_steps")]
    td_steps: u64,
    #[serde(default = "default_sync")]
    sync_every: u64,
    #[serde(default = "default_pairs")]
    pairs: usize,
}

fn default_tol() -> f64 {
    1e-12
}
fn default_td_steps() -> u64 {
    2_000_000
}
fn default_sync() -> u64 {
    1000
}
fn default_pairs() -> usize {
    100
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, force } => cmd_gen_data(&config, &out, force),
        Command::Train { config, out, force, resume } => cmd_train(&config, &out, force, resume),
        Command::Eval { run, checkpoint, out } => cmd_eval(&run, checkpoint, out.as_deref()),
        Command::Oracle { config, out } => cmd_oracle(&config, out.as_deref()),
        Command::Sweep { kind, config, out, force } => cmd_sweep(&kind, &config, &out, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ablab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &RunError) -> u8 {
    match e {
        RunError::Io(_) | RunError::Checkpoint(_) => EXIT_IO,
        RunError::Data(d) => match d {
            synthdata::DataError::Io(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        },
        RunError::Train(TrainError::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}

/// Refuse to reuse a non-empty output directory unless forced.
fn guard_out_dir(out: &Path, force: bool) -> Result<(), RunError> {
    if !force
        && out.exists()
        && std::fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false)
    {
        return Err(RunError::Config(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    Ok(())
}

fn worker_count() -> usize {
    std::env::var("ABLAB_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn cmd_gen_data(config: &Path, out: &Path, force: bool) -> Result<(), RunError> {
    let cfg: GenDataConfig = read_config(config)?;
    cfg.scene.validate().map_err(RunError::Data)?;
    guard_out_dir(out, force)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes as u64 {
        scenes.push(synthdata::generate_scene(&mut rng, &cfg.scene, i).map_err(RunError::Data)?);
    }
    let ds = synthdata::Dataset {
        grid: cfg.scene.grid,
        vocab: cfg.scene.vocab,
        resolution: cfg.resolution,
        scenes,
    };
    write_dataset(out, &ds).map_err(RunError::Data)?;
    println!("wrote {} scenes to {}", ds.scenes.len(), out.display());
    Ok(())
}

fn load_train_data(cfg: &TrainFileConfig) -> Result<TrainData, RunError> {
    match &cfg.data_dir {
        Some(dir) => {
            let ds = read_dataset(dir).map_err(RunError::Data)?;
            if ds.grid != cfg.run.scene.grid || ds.vocab != cfg.run.scene.vocab {
                return Err(RunError::Config(format!(
                    "dataset at {} is {}x{} grid / {} glyphs, config wants {} / {}",
                    dir.display(),
                    ds.grid,
                    ds.grid,
                    ds.vocab,
                    cfg.run.scene.grid,
                    cfg.run.scene.vocab
                )));
            }
            Ok(TrainData::from_scenes(ds.scenes))
        }
        None => Ok(TrainData::generate(&cfg.run.scene, cfg.run.n_scenes, cfg.run.train.seed)
            .map_err(RunError::Data)?),
    }
}

/// Persist the resolved config plus everything needed to reproduce the run.
fn write_run_manifest(out: &Path, cfg: &TrainFileConfig) -> Result<(), RunError> {
    std::fs::create_dir_all(out)?;
    let resolved = serde_json::json!({
        "config": cfg,
        "seed": cfg.run.train.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "workers": worker_count(),
    });
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&resolved)?)?;
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, force: bool, resume: bool) -> Result<(), RunError> {
    let cfg: TrainFileConfig = read_config(config)?;
    cfg.run.validate()?;
    if !resume {
        guard_out_dir(out, force)?;
    }
    let data = load_train_data(&cfg)?;
    let mut trainer = if resume {
        match latest_checkpoint(out) {
            Some((_, ckpt)) => Trainer::resume(cfg.run.clone(), data, &ckpt)?,
            None => Trainer::new(cfg.run.clone(), data)?,
        }
    } else {
        Trainer::new(cfg.run.clone(), data)?
    };
    write_run_manifest(out, &cfg)?;
    let until = cfg.run.train.total_steps;
    trainer.run_until(out, until, |_, step| {
        println!("checkpoint at step {step}");
        Ok(())
    })?;
    println!("trained to step {until} in {}", out.display());
    Ok(())
}

fn cmd_eval(run: &Path, checkpoint: Option<u64>, out: Option<&Path>) -> Result<(), RunError> {
    let manifest: serde_json::Value = read_config(&run.join("config.json"))?;
    let cfg: TrainFileConfig = serde_json::from_value(manifest["config"].clone())
        .map_err(|e| RunError::Config(format!("bad run manifest: {e}")))?;
    let ckpt = match checkpoint {
        Some(step) => {
            let dir = checkpoint_dir(run, step);
            if !dir.exists() {
                return Err(RunError::Config(format!(
                    "checkpoint {step} not found under {}",
                    run.display()
                )));
            }
            dir
        }
        None => {
            latest_checkpoint(run)
                .ok_or_else(|| {
                    RunError::Config(format!("no checkpoints under {}", run.display()))
                })?
                .1
        }
    };
    let data = load_train_data(&cfg)?;
    let trainer = Trainer::resume(cfg.run.clone(), data, &ckpt)?;
    let opts = EvalOptions {
        with_oracle_gap: matches!(cfg.run.crops, ablab::run::CropKind::Lattice { .. })
            && cfg.run.model.variant == ablab::models::Variant::Clip,
        ..Default::default()
    };
    let report = eval_checkpoint(&trainer, &opts)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.join("eval_report.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_oracle(config: &Path, out: Option<&Path>) -> Result<(), RunError> {
    let cfg: OracleConfig = read_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes as u64 {
        scenes.push(synthdata::generate_scene(&mut rng, &cfg.scene, i).map_err(RunError::Data)?);
    }
    let mdp = DiscreteMdp::build(scenes, &cfg.sizes, cfg.gamma)
        .map_err(|e| RunError::Config(e.to_string()))?;
    let (qstar, sweeps, residual) =
        value_iteration(&mdp, cfg.tol).map_err(|e| RunError::Config(e.to_string()))?;
    let contraction = contraction_ratio(&mdp, cfg.pairs, &mut rng);
    let lr = |t: u64| 0.5 / (1.0 + t as f64 / 10_000.0);
    let td = td_tabular(&mdp, cfg.td_steps, lr, cfg.sync_every, &mut rng);
    let td_dist = td.sup_dist(&qstar);
    let report = serde_json::json!({
        "states": mdp.n_states,
        "actions": mdp.n_actions,
        "annotations": mdp.l,
        "gamma": cfg.gamma,
        "sweeps": sweeps,
        "residual": residual,
        "contraction_max_ratio": contraction,
        "td_vs_vi_sup_dist": td_dist,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => std::fs::write(p, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

const GAMMA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.9];
const OVERLAP_BANDS: [(f64, f64); 4] = [(0.0, 0.1), (0.1, 0.3), (0.3, 0.6), (0.6, 1.0)];

fn cmd_sweep(kind: &str, config: &Path, out: &Path, force: bool) -> Result<(), RunError> {
    let cfg: TrainFileConfig = read_config(config)?;
    cfg.run.validate()?;
    guard_out_dir(out, force)?;
    std::fs::create_dir_all(out)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    match kind {
        "gamma" => {
            for &gamma in &GAMMA_GRID {
                let mut run_cfg = cfg.run.clone();
                run_cfg.train.gamma = gamma;
                let setting = format!("{gamma}");
                let sub = out.join(format!("gamma_{gamma}"));
                sweep_one(&cfg, run_cfg, &sub, "gamma", &setting, &mut rows)?;
            }
        }
        "overlap" => {
            for &(lo, hi) in &OVERLAP_BANDS {
                let mut run_cfg = cfg.run.clone();
                run_cfg.pair_iou_band = Some((lo, hi));
                run_cfg.train.n_views = 2;
                let setting = format!("{lo}-{hi}");
                let sub = out.join(format!("band_{lo}_{hi}"));
                match sweep_one(&cfg, run_cfg, &sub, "overlap", &setting, &mut rows) {
                    Ok(()) => {}
                    Err(RunError::Unsatisfiable(band, rejections)) => {
                        rows.push(vec![
                            "overlap".into(),
                            setting,
                            "unsatisfiable".into(),
                            format!("band [{}, {}) after {rejections} rejections", band.0, band.1),
                        ]);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        other => {
            return Err(RunError::Config(format!(
                "unknown sweep kind {other:?}, expected gamma or overlap"
            )));
        }
    }
    write_csv(&out.join("sweep.csv"), &["kind", "setting", "metric", "value"], &rows)?;
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

fn sweep_one(
    file_cfg: &TrainFileConfig,
    run_cfg: RunConfig,
    sub: &Path,
    kind: &str,
    setting: &str,
    rows: &mut Vec<Vec<String>>,
) -> Result<(), RunError> {
    let data = load_train_data(&TrainFileConfig {
        run: run_cfg.clone(),
        data_dir: file_cfg.data_dir.clone(),
    })?;
    let mut trainer = Trainer::new(run_cfg.clone(), data)?;
    let until = run_cfg.train.total_steps;
    let mut last_reward = f64::NAN;
    let mut last_value = f64::NAN;
    std::fs::create_dir_all(sub)?;
    while trainer.state.step < until {
        let m = trainer.step_once()?;
        last_reward = m.reward_loss;
        last_value = m.value_loss;
    }
    trainer.save(&checkpoint_dir(sub, until))?;

    let opts = EvalOptions::default();
    let report = eval_checkpoint(&trainer, &opts)?;
    let push = |rows: &mut Vec<Vec<String>>, metric: &str, value: String| {
        rows.push(vec![kind.into(), setting.into(), metric.into(), value]);
    };
    push(rows, "reward_loss", format!("{last_reward}"));
    push(rows, "value_loss", format!("{last_value}"));
    for p in &report.probes {
        push(rows, &format!("probe_{}", p.task), format!("{}", p.accuracy));
    }
    for (i, acc) in report.bucket_accuracy.iter().enumerate() {
        let v = acc.map_or("null".to_string(), |a| format!("{a}"));
        push(rows, &format!("bucket_{i}"), v);
    }
    if kind == "overlap" {
        // Realized IoU measured from freshly emitted pairs of this setting.
        let mut rng = ChaCha8Rng::seed_from_u64(0xFEED);
        let ann = ablab::bootstrap::AnnotationRef::VocabIds((0..run_cfg.model.vocab).collect());
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..25 {
            let batch = trainer.sample_transitions(&mut rng, ann.clone())?;
            for b in 0..batch.b {
                total += ablab::geometry::iou(
                    &batch.views[b * 2].bbox,
                    &batch.views[b * 2 + 1].bbox,
                );
                count += 1;
            }
        }
        push(rows, "realized_mean_iou", format!("{}", total / count as f64));
    }
    Ok(())
}
