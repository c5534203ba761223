//! Sampled generated-weight vectors, their 2D PCA projection and distance
//! statistics between groups of samples.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::TaskInstance;
use crate::error::{Error, Result};
use crate::metanet::{ContextDraw, MetaNet};

/// Flattened weight samples with the task each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightCloud {
    pub task_ids: Vec<usize>,
    pub rows: Vec<Vec<f32>>,
}

impl WeightCloud {
    pub fn to_csv(&self) -> String {
        let width = self.rows.first().map_or(0, Vec::len);
        let mut out = String::from("task");
        for j in 0..width {
            let _ = write!(out, ",w{j}");
        }
        out.push('\n');
        for (t, row) in self.task_ids.iter().zip(&self.rows) {
            let _ = write!(out, "{t}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&v| f64::from(v)).collect())
            .collect()
    }
}

/// `samples_per_task` weight vectors per task, each from its own context
/// draw (or the posterior mean when `deterministic`).
pub fn export_weight_distribution(
    net: &MetaNet,
    tasks: &[TaskInstance],
    samples_per_task: usize,
    deterministic: bool,
    rng: &mut ChaCha8Rng,
) -> Result<WeightCloud> {
    let mut cloud = WeightCloud {
        task_ids: Vec::new(),
        rows: Vec::new(),
    };
    for (t, task) in tasks.iter().enumerate() {
        for _ in 0..samples_per_task {
            let draw = if deterministic {
                ContextDraw::Mean
            } else {
                ContextDraw::sample(net.config.latent_dim, rng)
            };
            cloud.task_ids.push(t);
            cloud.rows.push(net.weights_for(&task.support, &draw)?.flatten());
        }
    }
    Ok(cloud)
}

/// Scores on the two leading principal components.
///
/// Uses the eigen-decomposition of the centered Gram matrix, which is small
/// when there are fewer samples than dimensions. Each component's sign is
/// fixed so that its largest-magnitude sample score is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n < 2 || p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(Error::Invalid(format!("PCA needs >= 2 equal-length rows, got {n}")));
    }
    let mut x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let gram = &x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![[0.0; 2]; n];
    for (k, &c) in order.iter().take(2).enumerate() {
        let scale = eig.eigenvalues[c].max(0.0).sqrt();
        let v = eig.eigenvectors.column(c);
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, o) in out.iter_mut().enumerate() {
            o[k] = sign * v[i] * scale;
        }
    }
    Ok(out)
}

pub fn projection_csv(task_ids: &[usize], proj: &[[f64; 2]]) -> String {
    let mut out = String::from("task,pc1,pc2\n");
    for (t, p) in task_ids.iter().zip(proj) {
        let _ = writeln!(out, "{t},{},{}", p[0], p[1]);
    }
    out
}

fn distance_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Mean pairwise L2 distance within groups and between groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub intra: f64,
    pub inter: f64,
}

fn separation_from(d: &[Vec<f64>], groups: &[usize]) -> Separation {
    let (mut si, mut ni, mut sx, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            if groups[i] == groups[j] {
                si += d[i][j];
                ni += 1;
            } else {
                sx += d[i][j];
                nx += 1;
            }
        }
    }
    Separation {
        intra: si / ni.max(1) as f64,
        inter: sx / nx.max(1) as f64,
    }
}

pub fn separation(rows: &[Vec<f64>], groups: &[usize]) -> Separation {
    separation_from(&distance_matrix(rows), groups)
}

/// One-sided permutation test of "groups are further apart than their
/// members are from each other", on `inter - intra`. Returns the p-value
/// `(1 + #{permuted >= observed}) / (1 + permutations)`.
pub fn permutation_test(rows: &[Vec<f64>], groups: &[usize], permutations: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if rows.len() != groups.len() || rows.len() < 2 {
        return Err(Error::Invalid("one group label per row, at least two rows".into()));
    }
    let d = distance_matrix(rows);
    let stat = |g: &[usize]| {
        let s = separation_from(&d, g);
        s.inter - s.intra
    };
    let observed = stat(groups);
    let mut shuffled = groups.to_vec();
    let mut hits = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(rng);
        if stat(&shuffled) >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + permutations) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pca_recovers_dominant_axis() {
        // Points spread along (1, 1, 0) with small noise on the other axes.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = (i as f64 - 19.5) / 10.0;
                vec![t + rng.random_range(-0.01..0.01), t, rng.random_range(-0.01..0.01)]
            })
            .collect();
        let proj = pca_2d(&rows).unwrap();
        let total: f64 = rows
            .iter()
            .map(|r| (r[0] + r[1]) / 2f64.sqrt())
            .zip(&proj)
            .map(|(t, p)| (t.abs() - p[0].abs()).abs())
            .fold(0.0, f64::max);
        assert!(total < 0.05, "max deviation {total}");
        let spread1: f64 = proj.iter().map(|p| p[0] * p[0]).sum();
        let spread2: f64 = proj.iter().map(|p| p[1] * p[1]).sum();
        assert!(spread1 > 100.0 * spread2);
    }

    #[test]
    fn separation_hand_computed() {
        let rows = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        let s = separation(&rows, &[0, 0, 1, 1]);
        assert_eq!(s.intra, 1.0);
        assert_eq!(s.inter, (10.0 + 11.0 + 9.0 + 10.0) / 4.0);
    }

    #[test]
    fn permutation_test_separates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rows = Vec::new();
        let mut groups = Vec::new();
        for g in 0..3 {
            for _ in 0..12 {
                rows.push(vec![
                    g as f64 * 5.0 + rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]);
                groups.push(g);
            }
        }
        assert!(permutation_test(&rows, &groups, 199, &mut rng).unwrap() < 0.01);
        let mixed: Vec<usize> = (0..36).map(|i| i % 3).collect();
        let same: Vec<Vec<f64>> = (0..36).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        assert!(permutation_test(&same, &mixed, 199, &mut rng).unwrap() > 0.01);
    }

    #[test]
    fn csv_shapes() {
        let cloud = WeightCloud {
            task_ids: vec![0, 0, 1],
            rows: vec![vec![1.0, 2.0], vec![1.5, 2.5], vec![0.0, 0.25]],
        };
        let csv = cloud.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "task,w0,w1");
        assert_eq!(csv.lines().nth(3).unwrap(), "1,0,0.25");
        let proj = pca_2d(&cloud.rows_f64()).unwrap();
        assert_eq!(projection_csv(&cloud.task_ids, &proj).lines().count(), 4);
    }
}
