use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use lgmnet::checkpoint::{load_checkpoint, save_checkpoint};
use lgmnet::data::{generate_dataset, split_meta, SplitSide, DEFAULT_QUERY_PER_CLASS};
use lgmnet::error::{Error, Result};
use lgmnet::eval::baseline::{compare_sources, BASELINE_LR, BASELINE_STEPS};
use lgmnet::eval::boundary::{export_boundary, task_points_csv, ClassifierRegistry, SourceInputs, DEFAULT_RESOLUTION};
use lgmnet::eval::weights::{export_weight_distribution, pca_2d, projection_csv, separation};
use lgmnet::eval::{evaluate, mean_and_half_width, EvalRequest, StrategyRegistry};
use lgmnet::gradcheck::{check_ops, check_pipeline, TOLERANCE};
use lgmnet::targetnet::TargetArchitecture;
use lgmnet::training::{log_csv, sample_seeded_task, ModelState, TrainConfig};

#[derive(Parser)]
#[command(
    name = "lgmnet",
    version,
    about = "Few-shot learning by generating matching-network weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model and write a checkpoint.
    Train(TrainArgs),
    /// Accuracy on freshly sampled unseen tasks, printed as JSON.
    Eval(EvalArgs),
    /// Grid of predicted labels for one task.
    Boundary(BoundaryArgs),
    /// Direct-training and random-weight baselines on unseen tasks.
    Baseline(BaselineArgs),
    /// Sampled generated weights and their 2D PCA projection.
    WeightsViz(WeightsArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
}

#[derive(Copy, Clone, ValueEnum)]
enum Side {
    Train,
    Test,
}

impl From<Side> for SplitSide {
    fn from(s: Side) -> Self {
        match s {
            Side::Train => SplitSide::Train,
            Side::Test => SplitSide::Test,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "blobs")]
    dataset: String,
    #[command(flatten)]
    task: TaskArgs,
    /// Total batches to reach (counting batches already in a resumed model).
    #[arg(long, default_value_t = 20_000)]
    batches: u64,
    #[arg(long, default_value_t = 16)]
    tasks_per_batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (batch, lr, mean_loss, mean_train_acc).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    no_itn: bool,
    #[arg(long)]
    no_wn: bool,
    #[arg(long)]
    no_tce: bool,
    /// Use the context mean instead of a sample during training.
    #[arg(long)]
    deterministic_context: bool,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    /// Print progress every this many batches (0 disables).
    #[arg(long, default_value_t = 500)]
    report_every: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 500)]
    tasks: usize,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "plain")]
    mode: String,
    #[arg(long, default_value_t = 10)]
    ensemble_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "test")]
    side: Side,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_bbox(s: &str) -> std::result::Result<[f32; 4], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected x_min,x_max,y_min,y_max".to_string())
}

#[derive(Args)]
struct BoundaryArgs {
    /// Trained model; required for the `generated` classifier.
    #[arg(long)]
    model: Option<PathBuf>,
    /// generated, random-prior or direct-train.
    #[arg(long, default_value = "generated")]
    classifier: String,
    /// Dataset when no model is given.
    #[arg(long, default_value = "blobs")]
    dataset: String,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    grid_resolution: usize,
    /// x_min,x_max,y_min,y_max
    #[arg(long, value_parser = parse_bbox, allow_hyphen_values = true, default_value = "-1.2,1.2,-1.2,1.2")]
    bbox: [f32; 4],
    /// Output prefix; writes `<out>.grid.csv` and `<out>.points.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    /// Trained model to compare against; its dataset is used.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "circles")]
    dataset: String,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = BASELINE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = BASELINE_LR)]
    lr: f32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, default_value_t = 12)]
    samples: usize,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "plain")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes `<out>.weights.csv` and `<out>.pca.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut state = match &a.model {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            state.config.total_batches = a.batches;
            state
        }
        None => {
            let defaults = TrainConfig::default();
            ModelState::new(TrainConfig {
                dataset: a.dataset.clone(),
                n_way: a.task.n_way.unwrap_or(defaults.n_way),
                k_shot: a.task.k_shot.unwrap_or(defaults.k_shot),
                n_query: a.task.n_query.unwrap_or(defaults.n_query),
                tasks_per_batch: a.tasks_per_batch,
                total_batches: a.batches,
                seed: a.seed,
                no_tce: a.no_tce,
                no_wn: a.no_wn,
                deterministic_context: a.deterministic_context,
                itn: !a.no_itn,
                latent_dim: a.latent_dim,
                ..defaults
            })?
        }
    };
    let mut log = Vec::new();
    let mut window = (0.0f64, 0.0f64, 0u64);
    state.train_until(a.batches, |s| {
        log.push(*s);
        window.0 += f64::from(s.mean_loss);
        window.1 += f64::from(s.mean_train_acc);
        window.2 += 1;
        if a.report_every > 0 && (s.batch + 1) % a.report_every == 0 {
            eprintln!(
                "batch {:>6}  lr {:.3e}  loss {:.4}  train acc {:.4}",
                s.batch + 1,
                s.lr,
                window.0 / window.2 as f64,
                window.1 / window.2 as f64
            );
            window = (0.0, 0.0, 0);
        }
    })?;
    save_checkpoint(&state, &a.out)?;
    if let Some(path) = &a.log {
        write(path, &log_csv(&log))?;
    }
    println!("{}", json!({ "checkpoint": a.out, "batches": state.batch }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.model)?;
    let strategy = StrategyRegistry::default().get(&a.mode, a.ensemble_size)?;
    let req = EvalRequest {
        side: a.side.into(),
        n_tasks: a.tasks,
        n_way: a.task.n_way.unwrap_or(state.config.n_way),
        k_shot: a.task.k_shot.unwrap_or(state.config.k_shot),
        n_query: a.task.n_query.unwrap_or(state.config.n_query),
        seed: a.seed,
    };
    let report = evaluate(&state, &req, strategy.as_ref())?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = &a.out {
        write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn boundary(a: BoundaryArgs) -> Result<()> {
    let state = a.model.as_deref().map(load_checkpoint).transpose()?;
    let (dataset, split) = match &state {
        Some(s) => (s.dataset.clone(), s.split.clone()),
        None => {
            let ds = generate_dataset(&a.dataset, a.seed)?;
            let split = split_meta(&ds, a.seed)?;
            (ds, split)
        }
    };
    let defaults = state.as_ref().map(|s| s.config.clone()).unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let task = sample_seeded_task(
        &dataset,
        split.side(SplitSide::Test),
        a.task.n_way.unwrap_or(defaults.n_way),
        a.task.k_shot.unwrap_or(defaults.k_shot),
        a.task.n_query.unwrap_or(defaults.n_query),
        &mut rng,
    )?;
    let inputs = SourceInputs {
        net: state.as_ref().map(|s| &s.net),
        arch: TargetArchitecture::new(2, defaults.target_widths.clone())?,
        latent_dim: defaults.latent_dim,
        weight_norm: !defaults.no_wn,
        task: &task,
        seed: a.seed,
    };
    let classifier = ClassifierRegistry::default().build(&a.classifier, &inputs)?;
    let grid = export_boundary(classifier.as_ref(), &task, a.grid_resolution, a.bbox)?;
    let grid_path = with_suffix(&a.out, ".grid.csv");
    let points_path = with_suffix(&a.out, ".points.csv");
    write(&grid_path, &grid.to_csv())?;
    write(&points_path, &task_points_csv(&task))?;
    println!(
        "{}",
        json!({ "grid": grid_path, "points": points_path, "cells": grid.labels.len() })
    );
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let state = a.model.as_deref().map(load_checkpoint).transpose()?;
    let (dataset, split, config) = match &state {
        Some(s) => (s.dataset.clone(), s.split.clone(), s.config.clone()),
        None => {
            let ds = generate_dataset(&a.dataset, a.seed)?;
            let split = split_meta(&ds, a.seed)?;
            (ds, split, TrainConfig::default())
        }
    };
    let n_way = a.task.n_way.unwrap_or(if state.is_some() { config.n_way } else { 3 });
    let k_shot = a.task.k_shot.unwrap_or(config.k_shot);
    let n_query = a.task.n_query.unwrap_or(DEFAULT_QUERY_PER_CLASS);
    let arch = TargetArchitecture::new(2, config.target_widths.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let tasks = (0..a.tasks)
        .map(|_| sample_seeded_task(&dataset, split.side(SplitSide::Test), n_way, k_shot, n_query, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_sources(
        &tasks,
        &arch,
        config.latent_dim,
        !config.no_wn,
        state.as_ref().map(|s| &s.net),
        a.steps,
        a.lr,
    )?;
    let summary = |v: &[f64]| {
        let (m, h) = mean_and_half_width(v);
        json!({ "mean_accuracy": m, "ci95_half_width": h })
    };
    let mut report = json!({
        "tasks": a.tasks,
        "n_way": n_way,
        "k_shot": k_shot,
        "direct_train": summary(&cmp.direct_train),
        "direct_train_support": summary(&cmp.direct_train_support),
        "random_prior": summary(&cmp.random_prior),
        "chance": 1.0 / n_way as f64,
    });
    if !cmp.generated.is_empty() {
        report["generated"] = summary(&cmp.generated);
    }
    let text = serde_json::to_string_pretty(&report).expect("serializes");
    if let Some(path) = &a.out {
        write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn weights_viz(a: WeightsArgs) -> Result<()> {
    let state = load_checkpoint(&a.model)?;
    let deterministic = match a.mode.as_str() {
        "plain" => false,
        "deterministic" => true,
        other => {
            return Err(Error::Invalid(format!(
                "mode `{other}`: expected plain or deterministic"
            )))
        }
    };
    let c = &state.config;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let tasks = (0..a.tasks)
        .map(|_| {
            sample_seeded_task(
                &state.dataset,
                state.split.side(SplitSide::Test),
                a.task.n_way.unwrap_or(c.n_way),
                a.task.k_shot.unwrap_or(c.k_shot),
                a.task.n_query.unwrap_or(c.n_query),
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let cloud = export_weight_distribution(&state.net, &tasks, a.samples, deterministic, &mut rng)?;
    let rows = cloud.rows_f64();
    let proj = pca_2d(&rows)?;
    let weights_path = with_suffix(&a.out, ".weights.csv");
    let pca_path = with_suffix(&a.out, ".pca.csv");
    write(&weights_path, &cloud.to_csv())?;
    write(&pca_path, &projection_csv(&cloud.task_ids, &proj))?;
    let sep = separation(&rows, &cloud.task_ids);
    println!(
        "{}",
        json!({
            "weights": weights_path,
            "pca": pca_path,
            "rows": rows.len(),
            "mean_intra_task_distance": sep.intra,
            "mean_inter_task_distance": sep.inter,
        })
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut worst_op = (0.0f64, String::new());
    let mut worst_pipeline = (0.0f64, String::new());
    let mut worst_itn = 0.0f64;
    for seed in a.seed..a.seed + a.seeds {
        for r in check_ops(seed)? {
            if r.rel_error > worst_op.0 {
                worst_op = (r.rel_error, r.name);
            }
        }
        let p = check_pipeline(seed, false)?;
        let w = p.worst();
        if w.rel_error > worst_pipeline.0 {
            worst_pipeline = (w.rel_error, w.name.clone());
        }
        worst_itn = worst_itn.max(check_pipeline(seed, true)?.overall);
    }
    let passed = worst_op.0 <= TOLERANCE && worst_pipeline.0 <= TOLERANCE && worst_itn <= TOLERANCE;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "seeds": a.seeds,
            "tolerance": TOLERANCE,
            "worst_op": { "name": worst_op.1, "rel_error": worst_op.0 },
            "worst_pipeline_tensor": { "name": worst_pipeline.1, "rel_error": worst_pipeline.0 },
            "pipeline_with_itn_overall": worst_itn,
            "passed": passed,
        }))
        .expect("serializes")
    );
    if passed {
        Ok(())
    } else {
        Err(Error::Invalid("gradient check exceeded tolerance".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Boundary(a) => boundary(a),
        Command::Baseline(a) => baseline(a),
        Command::WeightsViz(a) => weights_viz(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
