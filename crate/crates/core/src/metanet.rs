//! Task context encoder and conditional weight generator.
//!
//! The encoder maps every support point through a small perceptron, mean-pools
//! the outputs over the task, and splits the pooled vector into a mean and a
//! softplus-positive scale of a diagonal Gaussian. A context sampled from it
//! drives one affine generator per target layer; generated weight rows are
//! L2-normalized when weight normalization is on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var, NORM_EPS};
use crate::targetnet::{LayerVars, TargetArchitecture};
use crate::tensor::Tensor;

/// Variance guard of the intertask normalization layers.
pub const ITN_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaNetConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub target: TargetArchitecture,
    /// Encode tasks from their support set; when off, contexts come from a
    /// standard normal prior.
    pub task_encoder: bool,
    pub weight_norm: bool,
    pub itn: bool,
    pub itn_momentum: f32,
}

impl Default for MetaNetConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            encoder_hidden: vec![8, 8],
            latent_dim: 16,
            target: TargetArchitecture::default(),
            task_encoder: true,
            weight_norm: true,
            itn: true,
            itn_momentum: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with statistics of the pooled batch.
    Train,
    /// Normalize with running statistics only.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Batch normalization over all support rows of a task batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ItnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

/// Batch statistics observed by one ITN layer during a training forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ItnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl ItnLayer {
    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<ItnStats>)> {
        let width = tape.shape(x).last().copied().unwrap_or(0);
        if width != self.width() {
            return Err(Error::shape("itn", tape.shape(x), &[self.width()]));
        }
        let (xhat, stats) = match mode {
            NormMode::Train => {
                let out = tape.batch_norm(x, ITN_EPS)?;
                (
                    out.normalized,
                    Some(ItnStats {
                        mean: out.mean,
                        var: out.var,
                    }),
                )
            }
            NormMode::Inference => {
                let neg_mean = tape.constant(Tensor::vector(self.running_mean.iter().map(|m| -m).collect()));
                let inv_std = tape.constant(Tensor::vector(
                    self.running_var.iter().map(|v| 1.0 / (v + ITN_EPS).sqrt()).collect(),
                ));
                let centered = tape.add_row(x, neg_mean)?;
                (tape.mul_row(centered, inv_std)?, None)
            }
        };
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        let scaled = tape.mul_row(xhat, gamma)?;
        Ok((tape.add_row(scaled, beta)?, stats))
    }

    pub fn update(&mut self, stats: &ItnStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskContextEncoder {
    pub layers: Vec<Dense>,
    /// One per hidden layer when intertask normalization is enabled.
    pub itn: Vec<ItnLayer>,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightGenerator {
    pub layers: Vec<Dense>,
    pub shapes: Vec<(usize, usize)>,
    pub latent_dim: usize,
}

/// Per-task `(mu, sigma)` vars and the ITN statistics seen on the way.
pub type EncodedTasks = (Vec<(Var, Var)>, Vec<ItnStats>);

/// Pooled statistics and sampled context of one task, on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ContextVars {
    pub mu: Var,
    pub sigma: Var,
    pub c: Var,
}

/// Materialized task context.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskContext {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub c: Vec<f32>,
    /// Standard-normal draw behind `c`; `None` in deterministic mode.
    pub noise: Option<Vec<f32>>,
}

impl TaskContext {
    /// `mu + sigma * noise`, recomputed from the stored parts.
    pub fn reconstruct(&self) -> Vec<f32> {
        match &self.noise {
            Some(e) => self
                .mu
                .iter()
                .zip(&self.sigma)
                .zip(e)
                .map(|((m, s), e)| m + s * e)
                .collect(),
            None => self.mu.clone(),
        }
    }
}

/// How a context is drawn from `N(mu, diag(sigma^2))`.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextDraw {
    /// `c = mu`.
    Mean,
    /// `c = mu + sigma * noise` with the given standard-normal draw.
    Noise(Vec<f32>),
}

impl ContextDraw {
    pub fn sample(latent_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ContextDraw::Noise(standard_normal(latent_dim, rng))
    }
}

pub fn standard_normal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Per-layer generated weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedWeights {
    /// `(weight: fan_out x fan_in, bias: fan_out)` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
    pub normalized: bool,
}

impl GeneratedWeights {
    pub fn from_tape(tape: &Tape, layers: &[LayerVars], normalized: bool) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| (tape.value(l.weight).clone(), tape.value(l.bias).clone()))
                .collect(),
            normalized,
        }
    }

    /// Weights then bias of each layer, concatenated.
    pub fn flatten(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|(w, _)| (w.shape()[0], w.shape()[1])).collect()
    }
}

/// Encoder, generator and their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    pub config: MetaNetConfig,
    pub params: ParamSet,
    pub encoder: Option<TaskContextEncoder>,
    pub generator: WeightGenerator,
}

fn dense(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Dense {
    Dense {
        weight: params.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng),
        bias: params.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng),
    }
}

/// Builds generator parameters for `arch` inside `params`.
fn build_generator(
    params: &mut ParamSet,
    arch: &TargetArchitecture,
    latent_dim: usize,
    rng: &mut ChaCha8Rng,
) -> WeightGenerator {
    let shapes = arch.layer_shapes();
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(l, &(o, i))| dense(params, &format!("generator.l{l}"), latent_dim, o * i + o, rng))
        .collect();
    WeightGenerator {
        layers,
        shapes,
        latent_dim,
    }
}

impl WeightGenerator {
    /// Affine map of `c` per layer, reshaped to weight and bias, with
    /// optional row normalization of the weight.
    pub fn generate(&self, tape: &mut Tape, params: &ParamSet, c: Var, weight_norm: bool) -> Result<Vec<LayerVars>> {
        let cs = tape.shape(c).to_vec();
        if cs.iter().product::<usize>() != self.latent_dim {
            return Err(Error::shape("generate_weights", &cs, &[self.latent_dim]));
        }
        let c = tape.reshape(c, &[1, self.latent_dim])?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (d, &(o, i)) in self.layers.iter().zip(&self.shapes) {
            let w = tape.param(params, d.weight);
            let b = tape.param(params, d.bias);
            let flat = tape.matmul(c, w)?;
            let flat = tape.add_row(flat, b)?;
            let wflat = tape.slice_cols(flat, 0, o * i)?;
            let mut weight = tape.reshape(wflat, &[o, i])?;
            if weight_norm {
                weight = tape.l2_normalize_rows(weight, NORM_EPS)?;
            }
            let bflat = tape.slice_cols(flat, o * i, o)?;
            let bias = tape.reshape(bflat, &[o])?;
            out.push(LayerVars { weight, bias });
        }
        Ok(out)
    }
}

impl MetaNet {
    pub fn new(config: MetaNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.latent_dim == 0 || config.input_dim != config.target.input_dim {
            return Err(Error::Invalid(format!(
                "latent width {} / input dim {} vs target input {}",
                config.latent_dim, config.input_dim, config.target.input_dim
            )));
        }
        let mut params = ParamSet::new();
        let encoder = if config.task_encoder {
            let mut layers = Vec::new();
            let mut itn = Vec::new();
            let mut fan_in = config.input_dim;
            for (l, &h) in config.encoder_hidden.iter().enumerate() {
                layers.push(dense(&mut params, &format!("encoder.l{l}"), fan_in, h, rng));
                if config.itn {
                    itn.push(ItnLayer {
                        gamma: params.add(format!("encoder.itn{l}.gamma"), Tensor::filled(&[h], 1.0)),
                        beta: params.add(format!("encoder.itn{l}.beta"), Tensor::zeros(&[h])),
                        running_mean: vec![0.0; h],
                        running_var: vec![1.0; h],
                        momentum: config.itn_momentum,
                    });
                }
                fan_in = h;
            }
            let l = config.encoder_hidden.len();
            layers.push(dense(
                &mut params,
                &format!("encoder.l{l}"),
                fan_in,
                2 * config.latent_dim,
                rng,
            ));
            Some(TaskContextEncoder {
                layers,
                itn,
                latent_dim: config.latent_dim,
            })
        } else {
            None
        };
        let generator = build_generator(&mut params, &config.target, config.latent_dim, rng);
        Ok(Self {
            config,
            params,
            encoder,
            generator,
        })
    }

    /// Pooled `(mu, sigma)` for each task's support set.
    ///
    /// All support rows go through the encoder together, so in
    /// [`NormMode::Train`] the ITN statistics span the whole batch. Without an
    /// encoder, every task gets `mu = 0`, `sigma = 1`.
    pub fn encode_tasks(&self, tape: &mut Tape, supports: &[&Tensor], mode: NormMode) -> Result<EncodedTasks> {
        if supports.is_empty() {
            return Err(Error::Invalid("no tasks to encode".into()));
        }
        if let Some(s) = supports
            .iter()
            .find(|s| s.shape().len() != 2 || s.shape()[1] != self.config.input_dim)
        {
            return Err(Error::shape("encode_task", s.shape(), &[self.config.input_dim]));
        }
        let dc = self.config.latent_dim;
        let Some(enc) = &self.encoder else {
            let out = supports
                .iter()
                .map(|_| {
                    let mu = tape.constant(Tensor::zeros(&[dc]));
                    let sigma = tape.constant(Tensor::filled(&[dc], 1.0));
                    (mu, sigma)
                })
                .collect();
            return Ok((out, Vec::new()));
        };
        let parts: Vec<Var> = supports.iter().map(|s| tape.constant((*s).clone())).collect();
        let mut h = tape.concat_rows(&parts)?;
        let mut stats = Vec::new();
        let last = enc.layers.len() - 1;
        for (l, d) in enc.layers.iter().enumerate() {
            let w = tape.param(&self.params, d.weight);
            let b = tape.param(&self.params, d.bias);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l < last {
                if let Some(itn) = enc.itn.get(l) {
                    let (normed, s) = itn.forward(tape, &self.params, h, mode)?;
                    h = normed;
                    stats.extend(s);
                }
                h = tape.relu(h)?;
            }
        }
        let mut out = Vec::with_capacity(supports.len());
        let mut offset = 0;
        for s in supports {
            let n = s.shape()[0];
            let rows = tape.slice_rows(h, offset, n)?;
            offset += n;
            let pooled = tape.reduce_mean(rows, 0)?;
            let mu = tape.slice_cols(pooled, 0, dc)?;
            let pre_sigma = tape.slice_cols(pooled, dc, dc)?;
            let sigma = tape.softplus(pre_sigma)?;
            out.push((mu, sigma));
        }
        Ok((out, stats))
    }

    pub fn apply_itn_stats(&mut self, stats: &[ItnStats]) {
        if let Some(enc) = &mut self.encoder {
            for (layer, s) in enc.itn.iter_mut().zip(stats) {
                layer.update(s);
            }
        }
    }

    /// Reparameterized context `c = mu + sigma * noise`, or `c = mu`.
    pub fn sample_context(&self, tape: &mut Tape, mu: Var, sigma: Var, draw: &ContextDraw) -> Result<ContextVars> {
        if tape.value(sigma).data().iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Invalid("context scale must be strictly positive".into()));
        }
        let c = match draw {
            ContextDraw::Mean => mu,
            ContextDraw::Noise(e) => {
                if e.len() != tape.value(mu).numel() {
                    return Err(Error::shape("sample_context", tape.shape(mu), &[e.len()]));
                }
                let eps = tape.constant(Tensor::new(tape.shape(mu).to_vec(), e.clone())?);
                let scaled = tape.mul(sigma, eps)?;
                tape.add(mu, scaled)?
            }
        };
        Ok(ContextVars { mu, sigma, c })
    }

    pub fn generate_weights(&self, tape: &mut Tape, c: Var) -> Result<Vec<LayerVars>> {
        self.generator.generate(tape, &self.params, c, self.config.weight_norm)
    }

    /// Context of a single task in inference mode.
    pub fn task_context(&self, support: &Tensor, draw: &ContextDraw) -> Result<TaskContext> {
        let mut tape = Tape::new();
        let (enc, _) = self.encode_tasks(&mut tape, &[support], NormMode::Inference)?;
        let (mu, sigma) = enc[0];
        let ctx = self.sample_context(&mut tape, mu, sigma, draw)?;
        Ok(TaskContext {
            mu: tape.value(mu).data().to_vec(),
            sigma: tape.value(sigma).data().to_vec(),
            c: tape.value(ctx.c).data().to_vec(),
            noise: match draw {
                ContextDraw::Mean => None,
                ContextDraw::Noise(e) => Some(e.clone()),
            },
        })
    }

    /// Generates TargetNet weights for one task in inference mode.
    pub fn weights_for(&self, support: &Tensor, draw: &ContextDraw) -> Result<GeneratedWeights> {
        let mut tape = Tape::new();
        let (enc, _) = self.encode_tasks(&mut tape, &[support], NormMode::Inference)?;
        let (mu, sigma) = enc[0];
        let ctx = self.sample_context(&mut tape, mu, sigma, draw)?;
        let layers = self.generate_weights(&mut tape, ctx.c)?;
        Ok(GeneratedWeights::from_tape(&tape, &layers, self.config.weight_norm))
    }

    /// Generates weights directly from a context vector.
    pub fn weights_from_context(&self, c: &[f32]) -> Result<GeneratedWeights> {
        let mut tape = Tape::new();
        let cv = tape.constant(Tensor::vector(c.to_vec()));
        let layers = self.generate_weights(&mut tape, cv)?;
        Ok(GeneratedWeights::from_tape(&tape, &layers, self.config.weight_norm))
    }

    /// Content hash over parameters and normalization statistics.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::checkpoint::Fnv64::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        if let Some(enc) = &self.encoder {
            for l in &enc.itn {
                for v in l.running_mean.iter().chain(&l.running_var) {
                    h.update(&v.to_bits().to_le_bytes());
                }
            }
        }
        h.finish()
    }
}

/// Weights from a freshly initialized generator driven by `c ~ N(0, I)`.
pub fn random_prior_weights(
    arch: &TargetArchitecture,
    latent_dim: usize,
    rng: &mut ChaCha8Rng,
    weight_norm: bool,
) -> Result<GeneratedWeights> {
    let mut params = ParamSet::new();
    let generator = build_generator(&mut params, arch, latent_dim, rng);
    let c = standard_normal(latent_dim, rng);
    let mut tape = Tape::new();
    let cv = tape.constant(Tensor::vector(c));
    let layers = generator.generate(&mut tape, &params, cv, weight_norm)?;
    Ok(GeneratedWeights::from_tape(&tape, &layers, weight_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn net(config: MetaNetConfig) -> MetaNet {
        MetaNet::new(config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn support() -> Tensor {
        Tensor::from_rows(&[[0.1, 0.2], [-0.5, 0.3], [0.9, -0.7], [0.0, 0.4], [-0.2, -0.8]]).unwrap()
    }

    #[test]
    fn encoder_output_width_is_twice_latent() {
        let m = net(MetaNetConfig::default());
        let enc = m.encoder.as_ref().unwrap();
        let last = enc.layers.last().unwrap();
        assert_eq!(m.params.get(last.weight).shape(), &[8, 32]);
        assert_eq!(enc.itn.len(), 2);
    }

    #[test]
    fn generator_sizes_match_target() {
        let m = net(MetaNetConfig::default());
        let sizes: Vec<usize> = m
            .generator
            .layers
            .iter()
            .map(|d| m.params.get(d.bias).numel())
            .collect();
        assert_eq!(sizes, vec![16 * 2 + 16, 12 * 16 + 12, 8 * 12 + 8]);
    }

    #[test]
    fn pooled_mean_and_softplus_scale() {
        // Output layer set by hand so the per-sample encodings are known.
        let mut cfg = MetaNetConfig {
            encoder_hidden: vec![],
            latent_dim: 2,
            itn: false,
            ..MetaNetConfig::default()
        };
        cfg.target = TargetArchitecture::new(2, vec![3]).unwrap();
        let mut m = net(cfg);
        let d = m.encoder.as_ref().unwrap().layers[0];
        // outputs: [x0, x1, 0, 0] -> samples (1,2) and (3,4)
        *m.params.get_mut(d.weight) = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
            .unwrap()
            .with_requires_grad(true);
        *m.params.get_mut(d.bias) = Tensor::zeros(&[4]).with_requires_grad(true);
        let s = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let ctx = m.task_context(&s, &ContextDraw::Mean).unwrap();
        assert_eq!(ctx.mu, vec![2.0, 3.0]);
        for s in &ctx.sigma {
            assert!((s - std::f32::consts::LN_2).abs() < 1e-6);
        }
        assert_eq!(ctx.c, ctx.mu);
    }

    #[test]
    fn duplicated_support_matches_single() {
        let m = net(MetaNetConfig::default());
        let one = Tensor::from_rows(&[[0.3, -0.2]]).unwrap();
        let many = Tensor::from_rows(&[[0.3, -0.2]; 4]).unwrap();
        let a = m.task_context(&one, &ContextDraw::Mean).unwrap();
        let b = m.task_context(&many, &ContextDraw::Mean).unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu).chain(a.sigma.iter().zip(&b.sigma)) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-3));
        }
    }

    #[test]
    fn deterministic_and_reparameterized_contexts() {
        let m = net(MetaNetConfig::default());
        let det = m.task_context(&support(), &ContextDraw::Mean).unwrap();
        assert_eq!(det.c, det.mu);
        assert!(det.sigma.iter().all(|&s| s > 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draw = ContextDraw::sample(16, &mut rng);
        let ctx = m.task_context(&support(), &draw).unwrap();
        assert_eq!(ctx.c, ctx.reconstruct());
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let m = net(MetaNetConfig::default());
        let mut t = Tape::new();
        let mu = t.constant(Tensor::zeros(&[16]));
        let sigma = t.constant(Tensor::zeros(&[16]));
        assert!(m.sample_context(&mut t, mu, sigma, &ContextDraw::Mean).is_err());
    }

    #[test]
    fn weight_rows_unit_norm_biases_free() {
        let m = net(MetaNetConfig::default());
        let w = m.weights_for(&support(), &ContextDraw::Mean).unwrap();
        assert!(w.normalized);
        for (weight, _) in &w.layers {
            for r in 0..weight.shape()[0] {
                let n: f32 = weight.row(r).iter().map(|x| x * x).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(w, m.weights_for(&support(), &ContextDraw::Mean).unwrap());
    }

    #[test]
    fn latent_width_mismatch() {
        let m = net(MetaNetConfig::default());
        assert!(matches!(m.weights_from_context(&[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn empty_support_rejected() {
        let m = net(MetaNetConfig::default());
        let mut t = Tape::new();
        assert!(m.encode_tasks(&mut t, &[], NormMode::Inference).is_err());
    }

    #[test]
    fn random_prior_reproducible() {
        let arch = TargetArchitecture::default();
        let a = random_prior_weights(&arch, 16, &mut ChaCha8Rng::seed_from_u64(3), true).unwrap();
        let b = random_prior_weights(&arch, 16, &mut ChaCha8Rng::seed_from_u64(3), true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shapes(), arch.layer_shapes());
        for (weight, _) in &a.layers {
            for r in 0..weight.shape()[0] {
                let n: f32 = weight.row(r).iter().map(|x| x * x).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn no_encoder_uses_standard_prior() {
        let m = net(MetaNetConfig {
            task_encoder: false,
            ..MetaNetConfig::default()
        });
        assert!(m.encoder.is_none());
        let ctx = m.task_context(&support(), &ContextDraw::Mean).unwrap();
        assert!(ctx.mu.iter().all(|&v| v == 0.0));
        assert!(ctx.sigma.iter().all(|&v| v == 1.0));
    }
}
