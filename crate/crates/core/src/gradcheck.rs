//! Finite-difference checks of the tape's gradients.
//!
//! Every check compares the tape's f32 analytic gradient against central
//! differences of an independent f64 implementation of the same function,
//! written directly on `Vec<f64>` without the tape. Working in f64 lets the
//! step be small enough that ReLU kinks and the probability clamp are almost
//! never straddled.
//!
//! The reported error for one input tensor is normwise:
//! `max|a - n| / max(max|a|, max|n|, floor)`. The pipeline check sets the
//! floor to [`FLOOR_FRACTION`] of the largest gradient entry of the whole
//! model, so a tensor whose true gradient is zero (a bias feeding straight
//! into batch normalization) is judged on the model's scale rather than on
//! its own rounding noise.
//!
//! Batch normalization over pooled support rows makes the encoder gradient a
//! small difference of large terms, so with it enabled the f32 analytic
//! gradient carries visibly more rounding error; [`PipelineCheck::overall`]
//! measures that case over the whole gradient vector.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{onehot, TaskInstance};
use crate::error::Result;
use crate::metanet::{ContextDraw, MetaNet, MetaNetConfig, NormMode, ITN_EPS};
use crate::params::ParamSet;
use crate::tape::{Tape, Var, NORM_EPS};
use crate::targetnet::{TargetArchitecture, PROB_FLOOR};
use crate::tensor::Tensor;
use crate::training::batch_loss;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const FLOOR_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error <= TOLERANCE
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn normwise_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = inf_norm(analytic).max(inf_norm(numeric)).max(floor);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every coordinate of `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Dense row-major f64 matrix for the reference computations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (r, c) = t.dims2().expect("rank 1 or 2");
        Self::new(r, c, t.data().iter().map(|&v| f64::from(v)).collect())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut out = vec![0.0; self.rows * b.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                for j in 0..b.cols {
                    out[i * b.cols + j] += a * b.at(k, j);
                }
            }
        }
        Mat::new(self.rows, b.cols, out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.at(i, j);
            }
        }
        Mat::new(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip(&self, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.data.len(), b.data.len());
        Mat::new(
            self.rows,
            self.cols,
            self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    /// Applies `f(value, row_vector[col])` elementwise.
    pub fn zip_row(&self, v: &[f64], f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.cols, v.len());
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, v[i % self.cols]))
            .collect();
        Mat::new(self.rows, self.cols, data)
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.at(i, j)).sum::<f64>() / self.rows as f64)
            .collect()
    }

    pub fn row_means(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().sum::<f64>() / self.cols as f64)
            .collect()
    }

    pub fn l2_normalize_rows(&self, eps: f64) -> Mat {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            let r = self.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            data.extend(r.iter().map(|x| x / n));
        }
        Mat::new(self.rows, self.cols, data)
    }

    pub fn softmax_rows(&self) -> Mat {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            let r = self.row(i);
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.iter().map(|x| x / s));
        }
        Mat::new(self.rows, self.cols, data)
    }

    /// Standardizes columns with biased batch statistics.
    pub fn batch_norm(&self, eps: f64) -> Mat {
        let mean = self.column_means();
        let var: Vec<f64> = (0..self.cols)
            .map(|j| (0..self.rows).map(|i| (self.at(i, j) - mean[j]).powi(2)).sum::<f64>() / self.rows as f64)
            .collect();
        let mut out = self.zip_row(&mean, |x, m| x - m);
        for (i, x) in out.data.iter_mut().enumerate() {
            *x /= (var[i % self.cols] + eps).sqrt();
        }
        out
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean clamped negative log-likelihood of `labels` under row probabilities.
pub fn nll(probs: &Mat, labels: &[usize], floor: f64) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.at(i, l).max(floor).ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Value of a reference computation and the smallest `|x|` seen at a ReLU
/// input, which tells how close the point is to a kink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub loss: f64,
    pub relu_margin: f64,
}

fn relu_tracked(h: &Mat, margin: &Cell<f64>) -> Mat {
    let m = h.data.iter().fold(margin.get(), |m, x| m.min(x.abs()));
    margin.set(m);
    h.map(|v| v.max(0.0))
}

/// Matching loss of one task for fixed generated layers `(weight, bias)`.
pub fn reference_episode_loss(layers: &[(Mat, Vec<f64>)], task: &TaskInstance) -> Reference {
    let margin = Cell::new(f64::INFINITY);
    let embed = |x: &Mat| {
        let mut h = x.clone();
        for (l, (w, b)) in layers.iter().enumerate() {
            h = h.matmul(&w.transpose()).zip_row(b, |a, b| a + b);
            if l + 1 < layers.len() {
                h = relu_tracked(&h, &margin);
            }
        }
        h
    };
    let se = embed(&Mat::from_tensor(&task.support)).l2_normalize_rows(f64::from(NORM_EPS));
    let qe = embed(&Mat::from_tensor(&task.query)).l2_normalize_rows(f64::from(NORM_EPS));
    let kernel = qe.matmul(&se.transpose()).softmax_rows();
    let probs = kernel.matmul(&Mat::from_tensor(&onehot(&task.support_labels, task.n_way)));
    Reference {
        loss: nll(&probs, &task.query_labels, f64::from(PROB_FLOOR)),
        relu_margin: margin.get(),
    }
}

/// f64 batch loss of `net` with the parameter values in `flat` (in
/// parameter-set order), training-mode ITN and `c = mu`.
pub fn reference_batch_loss(
    config: &MetaNetConfig,
    names: &[String],
    flat: &[f64],
    shapes: &[Vec<usize>],
    tasks: &[TaskInstance],
) -> Reference {
    let margin = Cell::new(f64::INFINITY);
    let mut offset = 0;
    let mut table = std::collections::HashMap::new();
    for (name, shape) in names.iter().zip(shapes) {
        let n: usize = shape.iter().product();
        table.insert(name.as_str(), (shape.clone(), flat[offset..offset + n].to_vec()));
        offset += n;
    }
    let mat = |name: &str| {
        let (shape, data) = &table[name];
        let (r, c) = if shape.len() == 1 {
            (1, shape[0])
        } else {
            (shape[0], shape[1])
        };
        Mat::new(r, c, data.clone())
    };
    let vec = |name: &str| table[name].1.clone();
    let dc = config.latent_dim;

    let contexts: Vec<Vec<f64>> = if config.task_encoder {
        let mut pooled = Vec::new();
        for t in tasks {
            pooled.extend(t.support.data().iter().map(|&v| f64::from(v)));
        }
        let mut h = Mat::new(pooled.len() / config.input_dim, config.input_dim, pooled);
        let depth = config.encoder_hidden.len();
        for l in 0..=depth {
            h = h
                .matmul(&mat(&format!("encoder.l{l}.w")))
                .zip_row(&vec(&format!("encoder.l{l}.b")), |a, b| a + b);
            if l < depth {
                if config.itn {
                    h = h
                        .batch_norm(f64::from(ITN_EPS))
                        .zip_row(&vec(&format!("encoder.itn{l}.gamma")), |a, g| a * g)
                        .zip_row(&vec(&format!("encoder.itn{l}.beta")), |a, b| a + b);
                }
                h = relu_tracked(&h, &margin);
            }
        }
        let mut start = 0;
        tasks
            .iter()
            .map(|t| {
                let n = t.support_labels.len();
                let rows = Mat::new(n, h.cols, h.data[start * h.cols..(start + n) * h.cols].to_vec());
                start += n;
                rows.column_means()[..dc].to_vec()
            })
            .collect()
    } else {
        vec![vec![0.0; dc]; tasks.len()]
    };

    let shapes = config.target.layer_shapes();
    let episodes: Vec<Reference> = contexts
        .iter()
        .zip(tasks)
        .map(|(c, task)| {
            let cm = Mat::new(1, dc, c.clone());
            let layers: Vec<(Mat, Vec<f64>)> = shapes
                .iter()
                .enumerate()
                .map(|(l, &(o, i))| {
                    let flat = cm
                        .matmul(&mat(&format!("generator.l{l}.w")))
                        .zip_row(&vec(&format!("generator.l{l}.b")), |a, b| a + b);
                    let mut w = Mat::new(o, i, flat.data[..o * i].to_vec());
                    if config.weight_norm {
                        w = w.l2_normalize_rows(f64::from(NORM_EPS));
                    }
                    (w, flat.data[o * i..].to_vec())
                })
                .collect();
            reference_episode_loss(&layers, task)
        })
        .collect();
    Reference {
        loss: episodes.iter().map(|e| e.loss).sum::<f64>() / episodes.len() as f64,
        relu_margin: episodes.iter().fold(margin.get(), |m, e| m.min(e.relu_margin)),
    }
}

/// Miniature model used by the pipeline check.
pub fn miniature_config() -> MetaNetConfig {
    MetaNetConfig {
        input_dim: 2,
        encoder_hidden: vec![4, 4],
        latent_dim: 4,
        target: TargetArchitecture::new(2, vec![4, 3]).expect("valid"),
        task_encoder: true,
        weight_norm: true,
        itn: true,
        itn_momentum: 0.99,
    }
}

fn random_task(rng: &mut ChaCha8Rng, n_way: usize, k_shot: usize, n_query: usize) -> TaskInstance {
    let mut points = |n: usize| {
        let data = (0..n * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(vec![n, 2], data).expect("valid")
    };
    let support = points(n_way * k_shot);
    let query = points(n_way * n_query);
    let labels = |k: usize| (0..n_way).flat_map(|c| std::iter::repeat_n(c, k)).collect::<Vec<_>>();
    TaskInstance {
        n_way,
        k_shot,
        support,
        support_labels: labels(k_shot),
        query,
        query_labels: labels(n_query),
        classes: (0..n_way).collect(),
        support_origin: Vec::new(),
        query_origin: Vec::new(),
        seed: None,
    }
}

/// Checks every parameter tensor of a miniature model on two random
/// 3-way 2-shot tasks (encode, `c = mu`, generate, embed, attend, loss),
/// with or without batch-level normalization in the encoder.
pub fn check_pipeline(seed: u64, itn: bool) -> Result<PipelineCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = MetaNetConfig {
        itn,
        ..miniature_config()
    };
    let mut net = MetaNet::new(config.clone(), &mut rng)?;
    // Move ITN scale and shift off their initial values.
    for id in net.params.ids().collect::<Vec<_>>() {
        if net.params.name(id).contains(".itn") {
            for v in net.params.get_mut(id).data_mut() {
                *v += rng.random_range(-0.5f32..0.5);
            }
        }
    }
    let tasks: Vec<TaskInstance> = (0..2).map(|_| random_task(&mut rng, 3, 2, 2)).collect();

    let mut tape = Tape::new();
    let draws = vec![ContextDraw::Mean; tasks.len()];
    let fwd = batch_loss(&net, &mut tape, &tasks, &draws, NormMode::Train)?;
    tape.backward(fwd.loss)?;
    tape.accumulate_param_grads(&mut net.params);

    let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();
    let shapes: Vec<Vec<usize>> = net.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let flat: Vec<f64> = net
        .params
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|&v| f64::from(v)))
        .collect();
    let f = |x: &[f64]| reference_batch_loss(&config, &names, x, &shapes, &tasks).loss;
    let numeric = central_difference(&f, &flat, FD_STEP);
    let analytic: Vec<f64> = net
        .params
        .iter()
        .flat_map(|(_, t)| match t.grad() {
            Some(g) => g.iter().map(|&v| f64::from(v)).collect(),
            None => vec![f64::NAN; t.numel()],
        })
        .collect();

    let floor = FLOOR_FRACTION * inf_norm(&numeric);
    let mut per_tensor = Vec::new();
    let mut offset = 0;
    for (name, t) in net.params.iter() {
        let n = t.numel();
        let range = offset..offset + n;
        per_tensor.push(CheckResult {
            name: name.to_string(),
            rel_error: normwise_rel_error(&analytic[range.clone()], &numeric[range], floor),
        });
        offset += n;
    }
    Ok(PipelineCheck {
        per_tensor,
        overall: normwise_rel_error(&analytic, &numeric, 0.0),
        relu_margin: reference_batch_loss(&config, &names, &flat, &shapes, &tasks).relu_margin,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineCheck {
    /// Error per parameter tensor.
    pub per_tensor: Vec<CheckResult>,
    /// Error over the whole gradient vector.
    pub overall: f64,
    /// Smallest `|x|` at any ReLU input of the reference forward.
    pub relu_margin: f64,
}

impl PipelineCheck {
    pub fn worst(&self) -> &CheckResult {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("model has parameters")
    }
}

/// Shape and value range of one op-check input.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in (-1, 1).
    Signed,
    /// Magnitude in [0.5, 1.5] with random sign.
    AwayFromZero,
    /// Uniform in [0.05, 1].
    Positive,
}

type TapeFn = fn(&mut Tape, &[Var]) -> Result<Var>;
type RefFn = fn(&[Mat]) -> Mat;

struct OpCase {
    name: &'static str,
    inputs: &'static [(&'static [usize], Init)],
    tape: TapeFn,
    reference: RefFn,
}

fn ce_target() -> Tensor {
    onehot(&[2, 0, 1], 4)
}

const LABELS: [usize; 3] = [2, 0, 1];

fn op_cases() -> Vec<OpCase> {
    use Init::*;
    vec![
        OpCase {
            name: "matmul",
            inputs: &[(&[3, 4], Signed), (&[4, 2], Signed)],
            tape: |t, v| t.matmul(v[0], v[1]),
            reference: |m| m[0].matmul(&m[1]),
        },
        OpCase {
            name: "transpose",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.transpose(v[0]),
            reference: |m| m[0].transpose(),
        },
        OpCase {
            name: "add",
            inputs: &[(&[3, 4], Signed), (&[3, 4], Signed)],
            tape: |t, v| t.add(v[0], v[1]),
            reference: |m| m[0].zip(&m[1], |a, b| a + b),
        },
        OpCase {
            name: "sub",
            inputs: &[(&[3, 4], Signed), (&[3, 4], Signed)],
            tape: |t, v| t.sub(v[0], v[1]),
            reference: |m| m[0].zip(&m[1], |a, b| a - b),
        },
        OpCase {
            name: "mul",
            inputs: &[(&[3, 4], Signed), (&[3, 4], Signed)],
            tape: |t, v| t.mul(v[0], v[1]),
            reference: |m| m[0].zip(&m[1], |a, b| a * b),
        },
        OpCase {
            name: "div",
            inputs: &[(&[3, 4], Signed), (&[3, 4], AwayFromZero)],
            tape: |t, v| t.div(v[0], v[1]),
            reference: |m| m[0].zip(&m[1], |a, b| a / b),
        },
        OpCase {
            name: "scalar_ops",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| {
                let a = t.mul(v[0], 1.5)?;
                let b = t.sub(a, 0.25)?;
                t.div(b, -2.0)
            },
            reference: |m| m[0].map(|x| (1.5 * x - 0.25) / -2.0),
        },
        OpCase {
            name: "add_row",
            inputs: &[(&[3, 4], Signed), (&[4], Signed)],
            tape: |t, v| t.add_row(v[0], v[1]),
            reference: |m| m[0].zip_row(&m[1].data, |a, b| a + b),
        },
        OpCase {
            name: "mul_row",
            inputs: &[(&[3, 4], Signed), (&[4], Signed)],
            tape: |t, v| t.mul_row(v[0], v[1]),
            reference: |m| m[0].zip_row(&m[1].data, |a, b| a * b),
        },
        OpCase {
            name: "relu",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.relu(v[0]),
            reference: |m| m[0].map(|x| x.max(0.0)),
        },
        OpCase {
            name: "softplus",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.softplus(v[0]),
            reference: |m| m[0].map(softplus),
        },
        OpCase {
            name: "exp",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.exp(v[0]),
            reference: |m| m[0].map(f64::exp),
        },
        OpCase {
            name: "reduce_mean_rows",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.reduce_mean(v[0], 0),
            reference: |m| {
                let c = m[0].column_means();
                Mat::new(1, c.len(), c)
            },
        },
        OpCase {
            name: "reduce_mean_cols",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.reduce_mean(v[0], 1),
            reference: |m| {
                let r = m[0].row_means();
                Mat::new(1, r.len(), r)
            },
        },
        OpCase {
            name: "sum",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.sum(v[0]),
            reference: |m| Mat::new(1, 1, vec![m[0].data.iter().sum()]),
        },
        OpCase {
            name: "reshape",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.reshape(v[0], &[2, 6]),
            reference: |m| Mat::new(2, 6, m[0].data.clone()),
        },
        OpCase {
            name: "slice_rows",
            inputs: &[(&[4, 3], Signed)],
            tape: |t, v| t.slice_rows(v[0], 1, 2),
            reference: |m| Mat::new(2, 3, m[0].data[3..9].to_vec()),
        },
        OpCase {
            name: "slice_cols",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.slice_cols(v[0], 1, 2),
            reference: |m| {
                let data = (0..3).flat_map(|r| m[0].row(r)[1..3].to_vec()).collect();
                Mat::new(3, 2, data)
            },
        },
        OpCase {
            name: "concat_rows",
            inputs: &[(&[2, 3], Signed), (&[1, 3], Signed)],
            tape: |t, v| t.concat_rows(&[v[0], v[1]]),
            reference: |m| Mat::new(3, 3, [m[0].data.clone(), m[1].data.clone()].concat()),
        },
        OpCase {
            name: "l2_normalize_rows",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.l2_normalize_rows(v[0], NORM_EPS),
            reference: |m| m[0].l2_normalize_rows(f64::from(NORM_EPS)),
        },
        OpCase {
            name: "cosine_similarity",
            inputs: &[(&[4], Signed), (&[4], Signed)],
            tape: |t, v| t.cosine_similarity(v[0], v[1], NORM_EPS),
            reference: |m| {
                let e = f64::from(NORM_EPS);
                m[0].l2_normalize_rows(e).matmul(&m[1].l2_normalize_rows(e).transpose())
            },
        },
        OpCase {
            name: "softmax_rows",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.softmax_rows(v[0]),
            reference: |m| m[0].softmax_rows(),
        },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: &[(&[3, 4], Signed)],
            tape: |t, v| t.softmax_cross_entropy(v[0], &ce_target()),
            reference: |m| Mat::new(1, 1, vec![nll(&m[0].softmax_rows(), &LABELS, 0.0)]),
        },
        OpCase {
            name: "nll_clamped",
            inputs: &[(&[3, 4], Positive)],
            tape: |t, v| t.nll_clamped(v[0], &LABELS, PROB_FLOOR),
            reference: |m| Mat::new(1, 1, vec![nll(&m[0], &LABELS, f64::from(PROB_FLOOR))]),
        },
        OpCase {
            name: "batch_norm",
            inputs: &[(&[5, 3], Signed)],
            tape: |t, v| Ok(t.batch_norm(v[0], ITN_EPS)?.normalized),
            reference: |m| m[0].batch_norm(f64::from(ITN_EPS)),
        },
    ]
}

/// Names of the individually checked tape operations.
pub fn op_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Checks each op on random inputs. The op output is reduced to a scalar
/// through a random weighting so every output element contributes.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in op_cases() {
        let inputs: Vec<Tensor> = case
            .inputs
            .iter()
            .map(|&(shape, init)| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| match init {
                        Init::Signed => rng.random_range(-1.0f32..1.0),
                        Init::AwayFromZero => {
                            let m = rng.random_range(0.5f32..1.5);
                            if rng.random_bool(0.5) {
                                m
                            } else {
                                -m
                            }
                        }
                        Init::Positive => rng.random_range(0.05f32..1.0),
                    })
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("valid")
            })
            .collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let y = (case.tape)(&mut tape, &vars)?;
        let n_out = tape.value(y).numel();
        let weights: Vec<f32> = (0..n_out).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let wt = tape.constant(Tensor::new(tape.shape(y).to_vec(), weights.clone())?);
        let weighted = tape.mul(y, wt)?;
        let loss = tape.sum(weighted)?;
        tape.backward(loss)?;

        let ref_inputs: Vec<Mat> = inputs.iter().map(Mat::from_tensor).collect();
        let w64: Vec<f64> = weights.iter().map(|&w| f64::from(w)).collect();
        for (k, var) in vars.iter().enumerate() {
            let analytic: Vec<f64> = tape.grad(*var).unwrap_or(&[]).iter().map(|&g| f64::from(g)).collect();
            let f = |x: &[f64]| {
                let mut m = ref_inputs.clone();
                m[k].data.copy_from_slice(x);
                (case.reference)(&m)
                    .data
                    .iter()
                    .zip(&w64)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let numeric = central_difference(&f, &ref_inputs[k].data, FD_STEP);
            let rel_error = if analytic.len() == numeric.len() {
                normwise_rel_error(&analytic, &numeric, 0.0)
            } else {
                f64::INFINITY
            };
            out.push(CheckResult {
                name: format!("{}[{k}]", case.name),
                rel_error,
            });
        }
    }
    Ok(out)
}

/// Parameter names and values of a set, in order, as f64.
pub fn flatten_params(params: &ParamSet) -> Vec<f64> {
    params
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|&v| f64::from(v)))
        .collect()
}
