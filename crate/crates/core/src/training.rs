//! Episodic meta-training.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_dataset, sample_task, split_meta, MetaSplit, SplitSide, SyntheticDataset, TaskInstance,
    DEFAULT_QUERY_PER_CLASS,
};
use crate::error::{Error, Result};
use crate::metanet::{standard_normal, ContextDraw, ItnStats, MetaNet, MetaNetConfig, NormMode};
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::targetnet::{self, TargetArchitecture};

pub const INITIAL_LR: f64 = 1e-3;
pub const LR_DECAY: f64 = 0.9;
pub const LR_DECAY_EVERY: u64 = 1500;

/// Learning rate for a zero-based batch index.
///
/// Rounded to 15 significant digits so that the decayed values land on the
/// nearest double to their decimal form (`0.001 * 0.9` alone is one ulp off
/// `9e-4`).
pub fn lr_at(batch: u64) -> f64 {
    let raw = INITIAL_LR * LR_DECAY.powi((batch / LR_DECAY_EVERY) as i32);
    format!("{raw:.14e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub tasks_per_batch: usize,
    pub total_batches: u64,
    pub seed: u64,
    pub no_tce: bool,
    pub no_wn: bool,
    pub deterministic_context: bool,
    pub itn: bool,
    pub itn_momentum: f32,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub target_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: "blobs".into(),
            n_way: 5,
            k_shot: 1,
            n_query: DEFAULT_QUERY_PER_CLASS,
            tasks_per_batch: 16,
            total_batches: 20_000,
            seed: 0,
            no_tce: false,
            no_wn: false,
            deterministic_context: false,
            itn: true,
            itn_momentum: 0.99,
            latent_dim: 16,
            encoder_hidden: vec![8, 8],
            target_widths: vec![16, 12, 8],
        }
    }
}

impl TrainConfig {
    pub fn metanet_config(&self) -> Result<MetaNetConfig> {
        Ok(MetaNetConfig {
            input_dim: 2,
            encoder_hidden: self.encoder_hidden.clone(),
            latent_dim: self.latent_dim,
            target: TargetArchitecture::new(2, self.target_widths.clone())?,
            task_encoder: !self.no_tce,
            weight_norm: !self.no_wn,
            itn: self.itn,
            itn_momentum: self.itn_momentum,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.n_query == 0 || self.tasks_per_batch == 0 {
            return Err(Error::Invalid(format!(
                "need n_way >= 2 and positive k_shot, n_query, tasks_per_batch (got {}, {}, {}, {})",
                self.n_way, self.k_shot, self.n_query, self.tasks_per_batch
            )));
        }
        if !(0.0..=1.0).contains(&self.itn_momentum) {
            return Err(Error::Invalid(format!(
                "itn momentum {} outside [0, 1]",
                self.itn_momentum
            )));
        }
        if self.itn && !self.no_tce && self.tasks_per_batch * self.n_way * self.k_shot < 2 {
            return Err(Error::Invalid(
                "batch normalization needs at least 2 support rows per batch".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub batch: u64,
    pub lr: f64,
    pub mean_loss: f32,
    pub mean_train_acc: f32,
}

/// Everything a training run needs to continue exactly where it stopped.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TrainConfig,
    pub net: MetaNet,
    pub adam: Adam,
    /// Batches completed so far.
    pub batch: u64,
    pub rng: ChaCha8Rng,
    pub dataset: SyntheticDataset,
    pub split: MetaSplit,
}

/// Random stream for the context noise of a task, separate from the stream
/// that drew its points.
fn noise_rng(task_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    rng.set_stream(1);
    rng
}

/// Draws one episode with its own seeded stream taken from `rng`.
pub fn sample_seeded_task(
    dataset: &SyntheticDataset,
    pool: &[usize],
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskInstance> {
    let seed = rng.next_u64();
    let mut task_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut task = sample_task(dataset, pool, n_way, k_shot, n_query, &mut task_rng)?;
    task.seed = Some(seed);
    Ok(task)
}

/// Loss of a task batch on a tape, with per-task diagnostics.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// Mean of the per-task episode losses.
    pub loss: Var,
    pub task_losses: Vec<f32>,
    pub accuracies: Vec<f64>,
    pub itn_stats: Vec<ItnStats>,
}

/// Encodes every support set (jointly, so ITN sees the whole batch), draws
/// one context per task, generates weights and scores the queries.
pub fn batch_loss(
    net: &MetaNet,
    tape: &mut Tape,
    tasks: &[TaskInstance],
    draws: &[ContextDraw],
    mode: NormMode,
) -> Result<BatchForward> {
    if tasks.is_empty() || draws.len() != tasks.len() {
        return Err(Error::Invalid(format!(
            "{} tasks with {} context draws",
            tasks.len(),
            draws.len()
        )));
    }
    let supports: Vec<_> = tasks.iter().map(|t| &t.support).collect();
    let (encoded, itn_stats) = net.encode_tasks(tape, &supports, mode)?;
    let arch = &net.config.target;
    let mut losses = Vec::with_capacity(tasks.len());
    let mut task_losses = Vec::with_capacity(tasks.len());
    let mut accuracies = Vec::with_capacity(tasks.len());
    for ((task, &(mu, sigma)), draw) in tasks.iter().zip(&encoded).zip(draws) {
        let ctx = net.sample_context(tape, mu, sigma, draw)?;
        let layers = net.generate_weights(tape, ctx.c)?;
        let s = tape.constant(task.support.clone());
        let q = tape.constant(task.query.clone());
        let se = targetnet::embed(tape, arch, &layers, s)?;
        let qe = targetnet::embed(tape, arch, &layers, q)?;
        let kernel = targetnet::attention_kernel(tape, qe, se)?;
        let oh = tape.constant(task.support_onehot());
        let probs = targetnet::match_probabilities(tape, kernel, oh)?;
        let loss = targetnet::episode_loss(tape, probs, &task.query_labels)?;
        task_losses.push(tape.value(loss).data()[0]);
        accuracies.push(targetnet::accuracy(
            &targetnet::predict(tape.value(probs)),
            &task.query_labels,
        ));
        losses.push(loss);
    }
    let stacked = tape.concat_rows(&losses)?;
    let loss = tape.reduce_mean(stacked, 0)?;
    Ok(BatchForward {
        loss,
        task_losses,
        accuracies,
        itn_stats,
    })
}

impl ModelState {
    /// Fresh state: dataset, split and initial parameters all derive from
    /// `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = generate_dataset(&config.dataset, config.seed)?;
        let split = split_meta(&dataset, config.seed)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(2);
        let net = MetaNet::new(config.metanet_config()?, &mut init_rng)?;
        let adam = Adam::new(&net.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(3);
        Ok(Self {
            config,
            net,
            adam,
            batch: 0,
            rng,
            dataset,
            split,
        })
    }

    pub fn sample_batch(&mut self) -> Result<Vec<TaskInstance>> {
        let c = &self.config;
        let pool = self.split.side(SplitSide::Train);
        (0..c.tasks_per_batch)
            .map(|_| sample_seeded_task(&self.dataset, pool, c.n_way, c.k_shot, c.n_query, &mut self.rng))
            .collect()
    }

    /// One optimizer update from `tasks` at the current scheduled rate.
    pub fn train_step(&mut self, tasks: &[TaskInstance]) -> Result<BatchStats> {
        let lr = lr_at(self.batch);
        self.train_step_with_lr(tasks, lr)
    }

    /// Mean episode loss over `tasks`, backpropagated into one Adam step.
    pub fn train_step_with_lr(&mut self, tasks: &[TaskInstance], lr: f64) -> Result<BatchStats> {
        let first = tasks.first().ok_or_else(|| Error::Invalid("empty task batch".into()))?;
        if tasks.iter().any(|t| t.n_way != first.n_way || t.k_shot != first.k_shot) {
            return Err(Error::Invalid("tasks in a batch must share n_way and k_shot".into()));
        }
        let mode = if self.net.config.itn {
            NormMode::Train
        } else {
            NormMode::Inference
        };
        let draws: Vec<ContextDraw> = tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                if self.config.deterministic_context {
                    ContextDraw::Mean
                } else {
                    let seed = task.seed.unwrap_or(i as u64);
                    ContextDraw::Noise(standard_normal(self.net.config.latent_dim, &mut noise_rng(seed)))
                }
            })
            .collect();
        let mut tape = Tape::new();
        let fwd = batch_loss(&self.net, &mut tape, tasks, &draws, mode)?;
        let mean_loss = tape.value(fwd.loss).data()[0];
        if let Some(i) = fwd.task_losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::Diverged {
                batch: self.batch,
                task_seed: tasks[i].seed.unwrap_or(i as u64),
            });
        }
        let loss = fwd.loss;
        let acc: f64 = fwd.accuracies.iter().sum();
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut self.net.params);
        self.adam.step(&mut self.net.params, lr as f32)?;
        self.net.apply_itn_stats(&fwd.itn_stats);
        let stats = BatchStats {
            batch: self.batch,
            lr,
            mean_loss,
            mean_train_acc: (acc / tasks.len() as f64) as f32,
        };
        self.batch += 1;
        Ok(stats)
    }

    /// Samples and trains batches until `total_batches` have been done,
    /// calling `on_batch` after each.
    pub fn train_until(&mut self, total_batches: u64, mut on_batch: impl FnMut(&BatchStats)) -> Result<()> {
        while self.batch < total_batches {
            let tasks = self.sample_batch()?;
            let stats = self.train_step(&tasks)?;
            on_batch(&stats);
        }
        Ok(())
    }
}

/// Training log as CSV (`batch,lr,mean_loss,mean_train_acc`).
pub fn log_csv(log: &[BatchStats]) -> String {
    let mut out = String::from("batch,lr,mean_loss,mean_train_acc\n");
    for s in log {
        let _ = writeln!(out, "{},{},{},{}", s.batch, s.lr, s.mean_loss, s.mean_train_acc);
    }
    out
}
