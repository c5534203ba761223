//! A classifier trained from scratch on one task's support set.
//!
//! The trunk matches the generated classifier's layers; a linear softmax head
//! over the final embedding replaces the matching step, which would only
//! match each support point to itself when the support doubles as the
//! training target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{onehot, TaskInstance};
use crate::error::Result;
use crate::eval::{eval_noise_rng, EvalStrategy, Plain};
use crate::metanet::{random_prior_weights, MetaNet};
use crate::optim::Adam;
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::targetnet::{self, accuracy, predict, LayerVars, TargetArchitecture};
use crate::tensor::Tensor;

pub const BASELINE_LR: f32 = 1e-2;
pub const BASELINE_STEPS: usize = 200;

/// Trunk plus linear head.
#[derive(Debug, Clone)]
pub struct SoftmaxNet {
    pub arch: TargetArchitecture,
    pub n_classes: usize,
    pub params: ParamSet,
    layers: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl SoftmaxNet {
    pub fn new(arch: TargetArchitecture, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let layers = arch
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (o, i))| {
                (
                    params.add_uniform(format!("trunk.l{l}.w"), &[o, i], i, rng),
                    params.add_uniform(format!("trunk.l{l}.b"), &[o], i, rng),
                )
            })
            .collect();
        let d = arch.embedding_dim();
        let head = (
            params.add_uniform("head.w", &[n_classes, d], d, rng),
            params.add_uniform("head.b", &[n_classes], d, rng),
        );
        Self {
            arch,
            n_classes,
            params,
            layers,
            head,
        }
    }

    fn logits(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        let layers: Vec<LayerVars> = self
            .layers
            .iter()
            .map(|&(w, b)| LayerVars {
                weight: tape.param(&self.params, w),
                bias: tape.param(&self.params, b),
            })
            .collect();
        let x = tape.constant(x.clone());
        let h = targetnet::embed(tape, &self.arch, &layers, x)?;
        let w = tape.param(&self.params, self.head.0);
        let wt = tape.transpose(w)?;
        let z = tape.matmul(h, wt)?;
        let b = tape.param(&self.params, self.head.1);
        tape.add_row(z, b)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, x)?;
        Ok(predict(tape.value(z)))
    }

    /// Adam on mean softmax cross-entropy over `(x, labels)`.
    pub fn fit(&mut self, x: &Tensor, labels: &[usize], steps: usize, lr: f32) -> Result<()> {
        let target = onehot(labels, self.n_classes);
        let mut adam = Adam::new(&self.params);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let z = self.logits(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(z, &target)?;
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut self.params);
            adam.step(&mut self.params, lr)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub net: SoftmaxNet,
    pub support_accuracy: f64,
    pub query_accuracy: f64,
}

/// Trains a fresh [`SoftmaxNet`] on the support set and scores both sets.
pub fn direct_train_baseline(
    task: &TaskInstance,
    arch: &TargetArchitecture,
    steps: usize,
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<BaselineResult> {
    let mut net = SoftmaxNet::new(arch.clone(), task.n_way, rng);
    net.fit(&task.support, &task.support_labels, steps, lr)?;
    let support_accuracy = accuracy(&net.predict(&task.support)?, &task.support_labels);
    let query_accuracy = accuracy(&net.predict(&task.query)?, &task.query_labels);
    Ok(BaselineResult {
        net,
        support_accuracy,
        query_accuracy,
    })
}

/// Per-task query accuracies of the three weight sources on the same tasks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Comparison {
    pub direct_train: Vec<f64>,
    pub direct_train_support: Vec<f64>,
    pub random_prior: Vec<f64>,
    /// Empty when no trained model was given.
    pub generated: Vec<f64>,
}

/// Scores direct training, random-prior weights and (with `net`) generated
/// weights on every task. Each task's baseline and prior draw from a stream
/// seeded by the task seed (or its index), and generated weights use the
/// usual evaluation noise, so results do not depend on task order.
pub fn compare_sources(
    tasks: &[TaskInstance],
    arch: &TargetArchitecture,
    latent_dim: usize,
    weight_norm: bool,
    net: Option<&MetaNet>,
    steps: usize,
    lr: f32,
) -> Result<Comparison> {
    let mut out = Comparison::default();
    for (i, task) in tasks.iter().enumerate() {
        let task_seed = task.seed.unwrap_or(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
        let direct = direct_train_baseline(task, arch, steps, lr, &mut rng)?;
        out.direct_train.push(direct.query_accuracy);
        out.direct_train_support.push(direct.support_accuracy);
        let prior = random_prior_weights(arch, latent_dim, &mut rng, weight_norm)?;
        let res = targetnet::classify(arch, &prior.layers, &task.support, &task.support_onehot(), &task.query)?;
        out.random_prior.push(accuracy(&res.predictions, &task.query_labels));
        if let Some(net) = net {
            let preds = Plain.predict(net, task, &mut eval_noise_rng(task_seed))?;
            out.generated.push(accuracy(&preds, &task.query_labels));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, sample_task, split_meta, SplitSide};
    use rand::SeedableRng;

    fn task(seed: u64) -> TaskInstance {
        let ds = generate_dataset("blobs", 3).unwrap();
        let split = split_meta(&ds, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_task(&ds, split.side(SplitSide::Test), 5, 1, 15, &mut rng).unwrap()
    }

    #[test]
    fn memorizes_blob_support() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = direct_train_baseline(
                &task(seed),
                &TargetArchitecture::default(),
                BASELINE_STEPS,
                BASELINE_LR,
                &mut rng,
            )
            .unwrap();
            assert_eq!(r.support_accuracy, 1.0, "seed {seed}");
        }
    }

    #[test]
    fn reproducible() {
        let t = task(1);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            direct_train_baseline(&t, &TargetArchitecture::default(), 20, BASELINE_LR, &mut rng)
                .unwrap()
                .query_accuracy
        };
        assert_eq!(run(), run());
    }
}
