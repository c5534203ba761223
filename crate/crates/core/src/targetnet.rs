//! Matching-network classifier whose layer weights are supplied from outside.
//!
//! Queries attend over all support embeddings with a softmax of cosine
//! similarities; the attention-weighted support labels form the class
//! probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, NORM_EPS};
use crate::tensor::Tensor;

/// Probability floor applied before the log in [`episode_loss`].
pub const PROB_FLOOR: f32 = 1e-9;

/// Fully connected trunk: `input_dim -> widths[0] -> ... -> widths[last]`,
/// ReLU between layers and none after the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetArchitecture {
    pub input_dim: usize,
    pub widths: Vec<usize>,
}

impl Default for TargetArchitecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            widths: vec![16, 12, 8],
        }
    }
}

impl TargetArchitecture {
    pub fn new(input_dim: usize, widths: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "invalid target architecture {input_dim} -> {widths:?}"
            )));
        }
        Ok(Self { input_dim, widths })
    }

    /// `(fan_out, fan_in)` of each layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.widths
            .iter()
            .map(|&w| {
                let s = (w, fan_in);
                fan_in = w;
                s
            })
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Number of generated values (weights plus biases).
    pub fn num_values(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Weight matrix (`fan_out x fan_in`) and bias (`fan_out`) on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Feeds `inputs` (`m x input_dim`) through the trunk.
pub fn embed(tape: &mut Tape, arch: &TargetArchitecture, layers: &[LayerVars], inputs: Var) -> Result<Var> {
    let shapes = arch.layer_shapes();
    if layers.len() != shapes.len() {
        return Err(Error::Invalid(format!(
            "architecture has {} layers, got weights for {}",
            shapes.len(),
            layers.len()
        )));
    }
    let mut h = inputs;
    for (i, (layer, &(out, fan_in))) in layers.iter().zip(&shapes).enumerate() {
        let ws = tape.shape(layer.weight);
        if ws != [out, fan_in] {
            return Err(Error::shape("embed weight", ws, &[out, fan_in]));
        }
        let wt = tape.transpose(layer.weight)?;
        h = tape.matmul(h, wt)?;
        h = tape.add_row(h, layer.bias)?;
        if i + 1 < shapes.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// `exp(cos(q_r, s_c))` normalized over the support axis; `q x support`.
pub fn attention_kernel(tape: &mut Tape, query_emb: Var, support_emb: Var) -> Result<Var> {
    let qn = tape.l2_normalize_rows(query_emb, NORM_EPS)?;
    let sn = tape.l2_normalize_rows(support_emb, NORM_EPS)?;
    let snt = tape.transpose(sn)?;
    let cos = tape.matmul(qn, snt)?;
    tape.softmax_rows(cos)
}

/// `kernel (q x support) . onehot (support x N)`.
pub fn match_probabilities(tape: &mut Tape, kernel: Var, support_onehot: Var) -> Result<Var> {
    tape.matmul(kernel, support_onehot)
}

/// Mean negative log-probability of the true class, clamped at [`PROB_FLOOR`].
pub fn episode_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll_clamped(probs, labels, PROB_FLOOR)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(probs: &Tensor) -> Vec<usize> {
    let c = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Attention weights, class probabilities and predictions for a query set.
#[derive(Debug, Clone)]
pub struct AttentionResult {
    pub kernel: Tensor,
    pub probs: Tensor,
    pub predictions: Vec<usize>,
}

/// Runs the full matching head for fixed weights, without tracking gradients.
pub fn classify(
    arch: &TargetArchitecture,
    weights: &[(Tensor, Tensor)],
    support: &Tensor,
    support_onehot: &Tensor,
    query: &Tensor,
) -> Result<AttentionResult> {
    let mut tape = Tape::new();
    let layers: Vec<LayerVars> = weights
        .iter()
        .map(|(w, b)| LayerVars {
            weight: tape.constant(w.clone()),
            bias: tape.constant(b.clone()),
        })
        .collect();
    let s = tape.constant(support.clone());
    let q = tape.constant(query.clone());
    let oh = tape.constant(support_onehot.clone());
    let se = embed(&mut tape, arch, &layers, s)?;
    let qe = embed(&mut tape, arch, &layers, q)?;
    let kernel = attention_kernel(&mut tape, qe, se)?;
    let probs = match_probabilities(&mut tape, kernel, oh)?;
    let probs = tape.value(probs).clone();
    Ok(AttentionResult {
        kernel: tape.value(kernel).clone(),
        predictions: predict(&probs),
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f32]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let arch = TargetArchitecture::default();
        let mut t = Tape::new();
        let layers: Vec<LayerVars> = arch
            .layer_shapes()
            .iter()
            .map(|&(o, i)| LayerVars {
                weight: t.constant(Tensor::zeros(&[o, i])),
                bias: t.constant(Tensor::zeros(&[o])),
            })
            .collect();
        let x = t.constant(rows(&[&[0.3, -0.7], &[1.0, 2.0]]));
        let e = embed(&mut t, &arch, &layers, x).unwrap();
        assert_eq!(t.shape(e), &[2, 8]);
        assert!(t.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layers_chain_relu() {
        let arch = TargetArchitecture::new(2, vec![2, 2]).unwrap();
        let mut t = Tape::new();
        let eye = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let layers: Vec<LayerVars> = (0..2)
            .map(|_| LayerVars {
                weight: t.constant(eye.clone()),
                bias: t.constant(Tensor::zeros(&[2])),
            })
            .collect();
        let x = t.constant(rows(&[&[0.5, -0.25]]));
        let e = embed(&mut t, &arch, &layers, x).unwrap();
        assert_eq!(t.value(e).data(), &[0.5, 0.0]);
    }

    #[test]
    fn embed_rejects_wrong_shapes() {
        let arch = TargetArchitecture::new(2, vec![3]).unwrap();
        let mut t = Tape::new();
        let layers = [LayerVars {
            weight: t.constant(Tensor::zeros(&[2, 3])),
            bias: t.constant(Tensor::zeros(&[3])),
        }];
        let x = t.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(embed(&mut t, &arch, &layers, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn identical_supports_give_uniform_kernel() {
        let mut t = Tape::new();
        let s = t.constant(rows(&[&[1.0, 2.0, 0.5], &[1.0, 2.0, 0.5], &[1.0, 2.0, 0.5]]));
        let q = t.constant(rows(&[&[0.3, -1.0, 2.0]]));
        let k = attention_kernel(&mut t, q, s).unwrap();
        for &v in t.value(k).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_hand_computed_and_probabilities() {
        let mut t = Tape::new();
        let s = t.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let q = t.constant(rows(&[&[2.0, 0.0]]));
        let k = attention_kernel(&mut t, q, s).unwrap();
        let e = std::f32::consts::E;
        let expected = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let kv = t.value(k).data().to_vec();
        assert!((kv[0] - 0.7311).abs() < 1e-4 && (kv[0] - expected[0]).abs() < 1e-6);
        assert!((kv[1] - 0.2689).abs() < 1e-4 && (kv[1] - expected[1]).abs() < 1e-6);

        let oh = t.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let p = match_probabilities(&mut t, k, oh).unwrap();
        assert_eq!(t.value(p).data(), kv.as_slice());
        assert_eq!(predict(t.value(p)), vec![0]);
    }

    #[test]
    fn uniform_kernel_gives_uniform_probs() {
        let mut t = Tape::new();
        let k = t.constant(Tensor::filled(&[2, 6], 1.0 / 6.0));
        let oh = t.constant(crate::data::onehot(&[0, 0, 1, 1, 2, 2], 3));
        let p = match_probabilities(&mut t, k, oh).unwrap();
        for &v in t.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_values() {
        let mut t = Tape::new();
        let hot = t.constant(rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]));
        let l = episode_loss(&mut t, hot, &[1, 0]).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);

        let uni = t.constant(Tensor::filled(&[4, 5], 0.2));
        let l = episode_loss(&mut t, uni, &[0, 1, 2, 4]).unwrap();
        assert!((t.value(l).data()[0] - 5f32.ln()).abs() < 1e-6);

        let zero = t.constant(rows(&[&[0.0, 1.0]]));
        let l = episode_loss(&mut t, zero, &[0]).unwrap();
        assert!((t.value(l).data()[0] - 1e9f32.ln()).abs() < 1e-3);
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = rows(&[&[0.4, 0.4, 0.2], &[0.1, 0.45, 0.45], &[0.2, 0.3, 0.5]]);
        assert_eq!(predict(&p), vec![0, 1, 2]);
    }
}
