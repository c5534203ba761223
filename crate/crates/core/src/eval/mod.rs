//! Evaluation on unseen tasks, baselines and plot-ready exports.

pub mod baseline;
pub mod boundary;
pub mod weights;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{SplitSide, TaskInstance};
use crate::error::{Error, Result};
use crate::metanet::{standard_normal, ContextDraw, GeneratedWeights, MetaNet};
use crate::targetnet::{self, accuracy};
use crate::training::{sample_seeded_task, ModelState};

/// Context noise stream for evaluating a task.
pub fn eval_noise_rng(task_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    rng.set_stream(4);
    rng
}

/// How generated weights turn into query predictions.
pub trait EvalStrategy: Send + Sync {
    fn name(&self) -> String;

    fn predict(&self, net: &MetaNet, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<Vec<usize>>;
}

fn classify_with(net: &MetaNet, weights: &GeneratedWeights, task: &TaskInstance) -> Result<Vec<usize>> {
    Ok(targetnet::classify(
        &net.config.target,
        &weights.layers,
        &task.support,
        &task.support_onehot(),
        &task.query,
    )?
    .predictions)
}

/// One sampled context per task.
pub struct Plain;

impl EvalStrategy for Plain {
    fn name(&self) -> String {
        "plain".into()
    }

    fn predict(&self, net: &MetaNet, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let draw = ContextDraw::sample(net.config.latent_dim, rng);
        classify_with(net, &net.weights_for(&task.support, &draw)?, task)
    }
}

/// Context fixed to the posterior mean.
pub struct Deterministic;

impl EvalStrategy for Deterministic {
    fn name(&self) -> String {
        "deterministic".into()
    }

    fn predict(&self, net: &MetaNet, task: &TaskInstance, _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        classify_with(net, &net.weights_for(&task.support, &ContextDraw::Mean)?, task)
    }
}

/// Majority vote over several sampled weight sets; ties go to the lowest
/// class index.
pub struct Ensemble {
    pub size: usize,
}

impl EvalStrategy for Ensemble {
    fn name(&self) -> String {
        format!("ensemble({})", self.size)
    }

    fn predict(&self, net: &MetaNet, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut votes = vec![vec![0usize; task.n_way]; task.query_labels.len()];
        for _ in 0..self.size {
            let noise = standard_normal(net.config.latent_dim, rng);
            let weights = net.weights_for(&task.support, &ContextDraw::Noise(noise))?;
            for (v, p) in votes.iter_mut().zip(classify_with(net, &weights, task)?) {
                v[p] += 1;
            }
        }
        Ok(votes.iter().map(|v| majority(v)).collect())
    }
}

/// Index of the largest count, lowest index on ties.
pub fn majority(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
        .0
}

type StrategyCtor = fn(usize) -> Box<dyn EvalStrategy>;

/// Evaluation modes selectable by name.
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, StrategyCtor>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut reg = Self {
            entries: BTreeMap::new(),
        };
        reg.register("plain", |_| Box::new(Plain));
        reg.register("deterministic", |_| Box::new(Deterministic));
        reg.register("ensemble", |m| Box::new(Ensemble { size: m }));
        reg
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, name: &'static str, ctor: StrategyCtor) {
        self.entries.insert(name, ctor);
    }

    /// Builds the named mode; `ensemble_size` is used by modes that sample
    /// several weight sets.
    pub fn get(&self, name: &str, ensemble_size: usize) -> Result<Box<dyn EvalStrategy>> {
        if ensemble_size == 0 {
            return Err(Error::Invalid("ensemble size must be positive".into()));
        }
        let ctor = self.entries.get(name).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown mode `{name}` (expected one of: {})",
                self.entries.keys().copied().collect::<Vec<_>>().join(", ")
            ))
        })?;
        Ok(ctor(ensemble_size))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSettings {
    pub dataset: String,
    pub side: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub mode: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task_count: usize,
    pub mean_accuracy: f64,
    /// 1.96 times the standard error of the per-task accuracies.
    pub ci95_half_width: f64,
    pub per_task: Vec<f64>,
    pub config: EvalSettings,
}

/// Mean and 95% half-width (`1.96 * s / sqrt(n)`, sample standard deviation).
pub fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalRequest {
    pub side: SplitSide,
    pub n_tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub seed: u64,
}

/// Accuracy of `strategy` over freshly drawn tasks. Reads the model only.
pub fn evaluate(state: &ModelState, req: &EvalRequest, strategy: &dyn EvalStrategy) -> Result<EvalReport> {
    if req.n_tasks == 0 {
        return Err(Error::Invalid("need at least one evaluation task".into()));
    }
    if state.batch == 0 {
        return Err(Error::Invalid("model has not been trained".into()));
    }
    let pool = state.split.side(req.side);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let per_task = (0..req.n_tasks)
        .map(|_| {
            let task = sample_seeded_task(&state.dataset, pool, req.n_way, req.k_shot, req.n_query, &mut rng)?;
            let mut noise = eval_noise_rng(task.seed.expect("seeded task"));
            let preds = strategy.predict(&state.net, &task, &mut noise)?;
            Ok(accuracy(&preds, &task.query_labels))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean_accuracy, ci95_half_width) = mean_and_half_width(&per_task);
    Ok(EvalReport {
        task_count: per_task.len(),
        mean_accuracy,
        ci95_half_width,
        per_task,
        config: EvalSettings {
            dataset: state.config.dataset.clone(),
            side: match req.side {
                SplitSide::Train => "train".into(),
                SplitSide::Test => "test".into(),
            },
            n_way: req.n_way,
            k_shot: req.k_shot,
            n_query: req.n_query,
            mode: strategy.name(),
            seed: req.seed,
        },
    })
}
