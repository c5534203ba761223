//! Decision regions of a classifier over a 2D grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TaskInstance;
use crate::error::{Error, Result};
use crate::eval::baseline::{SoftmaxNet, BASELINE_LR, BASELINE_STEPS};
use crate::metanet::{random_prior_weights, ContextDraw, GeneratedWeights, MetaNet};
use crate::targetnet::{self, TargetArchitecture};
use crate::tensor::Tensor;

pub const DEFAULT_RESOLUTION: usize = 256;
pub const DEFAULT_BBOX: [f32; 4] = [-1.2, 1.2, -1.2, 1.2];

/// Anything that labels 2D points.
pub trait Classifier {
    fn predict(&self, points: &Tensor) -> Result<Vec<usize>>;
}

/// Matching classifier with fixed weights and a fixed support set.
#[derive(Debug, Clone)]
pub struct MatchingClassifier {
    pub arch: TargetArchitecture,
    pub weights: GeneratedWeights,
    pub support: Tensor,
    pub support_onehot: Tensor,
}

impl MatchingClassifier {
    pub fn new(arch: TargetArchitecture, weights: GeneratedWeights, task: &TaskInstance) -> Self {
        Self {
            arch,
            weights,
            support: task.support.clone(),
            support_onehot: task.support_onehot(),
        }
    }
}

impl Classifier for MatchingClassifier {
    fn predict(&self, points: &Tensor) -> Result<Vec<usize>> {
        Ok(targetnet::classify(
            &self.arch,
            &self.weights.layers,
            &self.support,
            &self.support_onehot,
            points,
        )?
        .predictions)
    }
}

impl Classifier for SoftmaxNet {
    fn predict(&self, points: &Tensor) -> Result<Vec<usize>> {
        SoftmaxNet::predict(self, points)
    }
}

/// What a classifier source may draw on.
pub struct SourceInputs<'a> {
    pub net: Option<&'a MetaNet>,
    pub arch: TargetArchitecture,
    pub latent_dim: usize,
    pub weight_norm: bool,
    pub task: &'a TaskInstance,
    pub seed: u64,
}

type SourceCtor = fn(&SourceInputs) -> Result<Box<dyn Classifier>>;

fn generated(inputs: &SourceInputs) -> Result<Box<dyn Classifier>> {
    let net = inputs
        .net
        .ok_or_else(|| Error::Invalid("generated weights need a trained model".into()))?;
    let weights = net.weights_for(&inputs.task.support, &ContextDraw::Mean)?;
    Ok(Box::new(MatchingClassifier::new(
        net.config.target.clone(),
        weights,
        inputs.task,
    )))
}

fn random_prior(inputs: &SourceInputs) -> Result<Box<dyn Classifier>> {
    let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed);
    let weights = random_prior_weights(&inputs.arch, inputs.latent_dim, &mut rng, inputs.weight_norm)?;
    Ok(Box::new(MatchingClassifier::new(
        inputs.arch.clone(),
        weights,
        inputs.task,
    )))
}

fn direct_train(inputs: &SourceInputs) -> Result<Box<dyn Classifier>> {
    let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed);
    let mut net = SoftmaxNet::new(inputs.arch.clone(), inputs.task.n_way, &mut rng);
    net.fit(
        &inputs.task.support,
        &inputs.task.support_labels,
        BASELINE_STEPS,
        BASELINE_LR,
    )?;
    Ok(Box::new(net))
}

/// Named ways to obtain a classifier for a task.
pub struct ClassifierRegistry {
    entries: BTreeMap<&'static str, SourceCtor>,
}

impl Default for ClassifierRegistry {
    fn default() -> Self {
        let mut reg = Self {
            entries: BTreeMap::new(),
        };
        reg.register("generated", generated);
        reg.register("random-prior", random_prior);
        reg.register("direct-train", direct_train);
        reg
    }
}

impl ClassifierRegistry {
    pub fn register(&mut self, name: &'static str, ctor: SourceCtor) {
        self.entries.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, name: &str, inputs: &SourceInputs) -> Result<Box<dyn Classifier>> {
        let ctor = self.entries.get(name).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown classifier `{name}` (expected one of: {})",
                self.names().join(", ")
            ))
        })?;
        ctor(inputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrid {
    pub resolution: usize,
    /// `[x_min, x_max, y_min, y_max]`.
    pub bbox: [f32; 4],
    /// Cell centers, row-major with `y` as the outer axis.
    pub points: Vec<[f32; 2]>,
    pub labels: Vec<usize>,
}

impl BoundaryGrid {
    /// Label of the cell containing `p`, if inside the box.
    pub fn label_at(&self, p: [f32; 2]) -> Option<usize> {
        let [x0, x1, y0, y1] = self.bbox;
        let r = self.resolution as f32;
        let fx = (p[0] - x0) / (x1 - x0) * r;
        let fy = (p[1] - y0) / (y1 - y0) * r;
        if !(0.0..r).contains(&fx) || !(0.0..r).contains(&fy) {
            return None;
        }
        Some(self.labels[fy as usize * self.resolution + fx as usize])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,label\n");
        for (p, l) in self.points.iter().zip(&self.labels) {
            let _ = writeln!(out, "{},{},{}", p[0], p[1], l);
        }
        out
    }
}

/// Cell-center coordinates of a `resolution x resolution` grid.
pub fn grid_points(resolution: usize, bbox: [f32; 4]) -> Result<Vec<[f32; 2]>> {
    let [x0, x1, y0, y1] = bbox;
    if resolution == 0 || !(x1 > x0 && y1 > y0) || bbox.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("grid {resolution} over box {bbox:?}")));
    }
    let step = |lo: f32, hi: f32, i: usize| lo + (i as f32 + 0.5) * (hi - lo) / resolution as f32;
    Ok((0..resolution)
        .flat_map(|j| (0..resolution).map(move |i| [step(x0, x1, i), step(y0, y1, j)]))
        .collect())
}

/// Labels every grid cell center with `classifier`.
pub fn export_boundary(
    classifier: &dyn Classifier,
    task: &TaskInstance,
    resolution: usize,
    bbox: [f32; 4],
) -> Result<BoundaryGrid> {
    if task.input_dim() != 2 {
        return Err(Error::Invalid(format!(
            "decision boundaries need 2D inputs, task has {}",
            task.input_dim()
        )));
    }
    let points = grid_points(resolution, bbox)?;
    let flat = points.iter().flat_map(|p| p.iter().copied()).collect();
    let labels = classifier.predict(&Tensor::new(vec![points.len(), 2], flat)?)?;
    Ok(BoundaryGrid {
        resolution,
        bbox,
        points,
        labels,
    })
}

/// Support and query points as `x,y,label,role`.
pub fn task_points_csv(task: &TaskInstance) -> String {
    let mut out = String::from("x,y,label,role\n");
    for (set, labels, role) in [
        (&task.support, &task.support_labels, "support"),
        (&task.query, &task.query_labels, "query"),
    ] {
        for (r, l) in labels.iter().enumerate() {
            let p = set.row(r);
            let _ = writeln!(out, "{},{},{},{}", p[0], p[1], l, role);
        }
    }
    out
}
