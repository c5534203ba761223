//! Synthetic few-shot datasets and N-way K-shot episode sampling.

pub mod families;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use families::{family, ClassFamily, FamilyRegistry, Point};

pub const NUM_CLASSES: usize = 100;
pub const SAMPLES_PER_CLASS: usize = 20;
pub const TRAIN_CLASSES: usize = 80;
pub const DEFAULT_QUERY_PER_CLASS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub id: usize,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub kind: String,
    pub seed: u64,
    pub classes: Vec<ClassRecord>,
}

/// Generates the 100-class, 20-point dataset of the named family.
pub fn generate_dataset(kind: &str, seed: u64) -> Result<SyntheticDataset> {
    let fam = family(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clouds = fam.generate(NUM_CLASSES, SAMPLES_PER_CLASS, &mut rng)?;
    Ok(SyntheticDataset {
        kind: fam.name().to_string(),
        seed,
        classes: clouds
            .into_iter()
            .enumerate()
            .map(|(id, points)| ClassRecord { id, points })
            .collect(),
    })
}

impl SyntheticDataset {
    pub fn class(&self, id: usize) -> Option<&ClassRecord> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Writes `class_id,x,y` rows with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,x,y\n");
        for c in &self.classes {
            for p in &c.points {
                let _ = writeln!(out, "{},{},{}", c.id, p[0], p[1]);
            }
        }
        out
    }

    pub fn from_csv(kind: &str, seed: u64, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "class_id,x,y" => {}
            _ => {
                return Err(Error::Csv {
                    line: 1,
                    reason: "expected header `class_id,x,y`".into(),
                })
            }
        }
        let mut classes: Vec<ClassRecord> = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Csv { line: i + 1, reason };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", fields.len())));
            }
            let id: usize = fields[0].parse().map_err(|e| bad(format!("class_id: {e}")))?;
            let x: f32 = fields[1].parse().map_err(|e| bad(format!("x: {e}")))?;
            let y: f32 = fields[2].parse().map_err(|e| bad(format!("y: {e}")))?;
            match classes.iter_mut().find(|c| c.id == id) {
                Some(c) => c.points.push([x, y]),
                None => classes.push(ClassRecord {
                    id,
                    points: vec![[x, y]],
                }),
            }
        }
        Ok(Self {
            kind: kind.to_string(),
            seed,
            classes,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(kind: &str, seed: u64, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(kind, seed, &text)
    }
}

/// Disjoint meta-train / meta-test class partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSide {
    Train,
    Test,
}

impl MetaSplit {
    pub fn side(&self, side: SplitSide) -> &[usize] {
        match side {
            SplitSide::Train => &self.train,
            SplitSide::Test => &self.test,
        }
    }
}

/// Uniformly random 80/20 partition of the dataset's class ids.
pub fn split_meta(dataset: &SyntheticDataset, seed: u64) -> Result<MetaSplit> {
    if dataset.classes.len() != NUM_CLASSES {
        return Err(Error::Insufficient(format!(
            "meta split needs {NUM_CLASSES} classes, dataset has {}",
            dataset.classes.len()
        )));
    }
    let mut ids: Vec<usize> = dataset.classes.iter().map(|c| c.id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = ids[..TRAIN_CLASSES].to_vec();
    let mut test = ids[TRAIN_CLASSES..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(MetaSplit { train, test })
}

/// One N-way K-shot episode.
///
/// Support rows are ordered class-major: the K shots of label 0, then label 1,
/// and so on, unless reordered by [`permute_support`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// Dataset class id for each label.
    pub classes: Vec<usize>,
    /// `(class_id, sample_index)` for every support row.
    pub support_origin: Vec<(usize, usize)>,
    /// `(class_id, sample_index)` for every query row.
    pub query_origin: Vec<(usize, usize)>,
    /// Seed of the stream the episode was drawn from, if known.
    pub seed: Option<u64>,
}

impl TaskInstance {
    pub fn input_dim(&self) -> usize {
        self.support.shape()[1]
    }

    pub fn support_onehot(&self) -> Tensor {
        onehot(&self.support_labels, self.n_way)
    }
}

pub fn onehot(labels: &[usize], n: usize) -> Tensor {
    let mut data = vec![0.0f32; labels.len() * n];
    for (i, &l) in labels.iter().enumerate() {
        data[i * n + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), n], data).expect("onehot shape")
}

fn points_tensor(points: &[Point]) -> Tensor {
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(vec![points.len(), 2], data).expect("non-empty point set")
}

/// Draws an episode from one side of the split.
pub fn sample_task(
    dataset: &SyntheticDataset,
    class_pool: &[usize],
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskInstance> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(Error::Invalid("n_way, k_shot and n_query must be positive".into()));
    }
    if n_way > class_pool.len() {
        return Err(Error::Insufficient(format!(
            "{n_way}-way task from {} classes",
            class_pool.len()
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, class_pool.len(), n_way)
        .into_iter()
        .map(|i| class_pool[i])
        .collect();

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * n_query);
    let (mut support_labels, mut query_labels) = (Vec::new(), Vec::new());
    let (mut support_origin, mut query_origin) = (Vec::new(), Vec::new());
    for (label, &cid) in chosen.iter().enumerate() {
        let class = dataset
            .class(cid)
            .ok_or_else(|| Error::Invalid(format!("class {cid} not in dataset")))?;
        let needed = k_shot + n_query;
        if needed > class.points.len() {
            return Err(Error::Insufficient(format!(
                "class {cid} has {} samples, episode needs {needed}",
                class.points.len()
            )));
        }
        let picks = index::sample(rng, class.points.len(), needed).into_vec();
        for (j, &s) in picks.iter().enumerate() {
            if j < k_shot {
                support.push(class.points[s]);
                support_labels.push(label);
                support_origin.push((cid, s));
            } else {
                query.push(class.points[s]);
                query_labels.push(label);
                query_origin.push((cid, s));
            }
        }
    }
    let query = points_tensor(&query);
    Ok(TaskInstance {
        n_way,
        k_shot,
        support: points_tensor(&support),
        support_labels,
        query,
        query_labels,
        classes: chosen,
        support_origin,
        query_origin,
        seed: None,
    })
}

/// Reorders support rows; `perm[i]` is the old index placed at position `i`.
pub fn permute_support(task: &TaskInstance, perm: &[usize]) -> Result<TaskInstance> {
    let n = task.support_labels.len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(format!(
            "support permutation must be a bijection on 0..{n}"
        )));
    }
    let d = task.input_dim();
    let src = task.support.data();
    let data = perm
        .iter()
        .flat_map(|&p| src[p * d..(p + 1) * d].iter().copied())
        .collect();
    let mut out = task.clone();
    out.support = Tensor::new(vec![n, d], data)?;
    out.support_labels = perm.iter().map(|&p| task.support_labels[p]).collect();
    out.support_origin = perm.iter().map(|&p| task.support_origin[p]).collect();
    Ok(out)
}
