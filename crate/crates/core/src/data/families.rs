//! Class families for the 2D synthetic datasets.
//!
//! Each family draws one geometric parameter per class (a center, an angle, a
//! phase or a radius) with a minimum separation, then scatters points around
//! the resulting shape.

use std::collections::BTreeMap;
use std::f32::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Point = [f32; 2];

/// Attempts allowed when placing class parameters by rejection.
const PLACEMENT_ATTEMPTS: usize = 1_000_000;

/// A family of point-cloud classes that can be generated on demand.
pub trait ClassFamily: Send + Sync {
    fn name(&self) -> &'static str;

    /// Box containing every generated point, `[x_min, x_max, y_min, y_max]`.
    fn bounding_box(&self) -> [f32; 4];

    /// Generates `n_classes` classes with `per_class` points each.
    fn generate(&self, n_classes: usize, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>>;
}

fn place<T: Copy>(
    n: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> T,
    far_enough: impl Fn(&T, &T) -> bool,
    what: &str,
) -> Result<Vec<T>> {
    let mut out: Vec<T> = Vec::with_capacity(n);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let p = draw(rng);
        if out.iter().all(|q| far_enough(&p, q)) {
            out.push(p);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::Insufficient(format!(
        "could only place {} of {n} {what} classes",
        out.len()
    )))
}

fn normal(std: f32) -> Normal<f32> {
    Normal::new(0.0, std).expect("finite positive std")
}

fn circular_gap(a: f32, b: f32, period: f32) -> f32 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// Isotropic Gaussian clusters at separated centers.
#[derive(Debug, Clone)]
pub struct Blobs {
    pub center_range: f32,
    pub std: f32,
    pub min_separation: f32,
}

impl Default for Blobs {
    fn default() -> Self {
        Self {
            center_range: 1.0,
            std: 0.03,
            min_separation: 0.15,
        }
    }
}

impl ClassFamily for Blobs {
    fn name(&self) -> &'static str {
        "blobs"
    }

    fn bounding_box(&self) -> [f32; 4] {
        let r = self.center_range + 6.0 * self.std;
        [-r, r, -r, r]
    }

    fn generate(&self, n: usize, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>> {
        let range = self.center_range;
        let centers = place(
            n,
            rng,
            |r| [r.random_range(-range..range), r.random_range(-range..range)],
            |a, b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= self.min_separation,
            self.name(),
        )?;
        let noise = normal(self.std);
        let bb = self.bounding_box();
        Ok(centers
            .into_iter()
            .map(|c| {
                (0..per_class)
                    .map(|_| {
                        [
                            (c[0] + noise.sample(rng)).clamp(bb[0], bb[1]),
                            (c[1] + noise.sample(rng)).clamp(bb[2], bb[3]),
                        ]
                    })
                    .collect()
            })
            .collect())
    }
}

/// Lines through the origin, one angle per class.
#[derive(Debug, Clone)]
pub struct Lines {
    pub inner: f32,
    pub outer: f32,
    pub noise: f32,
    pub min_angle_gap: f32,
}

impl Default for Lines {
    fn default() -> Self {
        Self {
            inner: 0.2,
            outer: 0.8,
            noise: 0.005,
            min_angle_gap: 0.015,
        }
    }
}

impl ClassFamily for Lines {
    fn name(&self) -> &'static str {
        "lines"
    }

    fn bounding_box(&self) -> [f32; 4] {
        let r = self.outer + 6.0 * self.noise;
        [-r, r, -r, r]
    }

    fn generate(&self, n: usize, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>> {
        let angles = place(
            n,
            rng,
            |r| r.random_range(0.0..PI),
            |a, b| circular_gap(*a, *b, PI) >= self.min_angle_gap,
            self.name(),
        )?;
        let noise = normal(self.noise);
        let lim = self.bounding_box()[1];
        Ok(angles
            .into_iter()
            .map(|a| {
                let (dir, perp) = ([a.cos(), a.sin()], [-a.sin(), a.cos()]);
                (0..per_class)
                    .map(|_| {
                        let mut t = rng.random_range(self.inner..self.outer);
                        if rng.random_bool(0.5) {
                            t = -t;
                        }
                        let e = noise.sample(rng).clamp(-lim, lim);
                        [t * dir[0] + e * perp[0], t * dir[1] + e * perp[1]]
                    })
                    .collect()
            })
            .collect())
    }
}

/// Archimedean spiral arms differing by starting phase.
#[derive(Debug, Clone)]
pub struct Spirals {
    pub r0: f32,
    pub r_growth: f32,
    pub sweep: f32,
    pub noise: f32,
    pub min_phase_gap: f32,
}

impl Default for Spirals {
    fn default() -> Self {
        Self {
            r0: 0.15,
            r_growth: 0.85,
            sweep: TAU,
            noise: 0.002,
            min_phase_gap: 0.04,
        }
    }
}

impl ClassFamily for Spirals {
    fn name(&self) -> &'static str {
        "spirals"
    }

    fn bounding_box(&self) -> [f32; 4] {
        let r = self.r0 + self.r_growth + 6.0 * self.noise;
        [-r, r, -r, r]
    }

    fn generate(&self, n: usize, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>> {
        let phases = place(
            n,
            rng,
            |r| r.random_range(0.0..TAU),
            |a, b| circular_gap(*a, *b, TAU) >= self.min_phase_gap,
            self.name(),
        )?;
        let noise = normal(self.noise);
        let max_dev = 6.0 * self.noise;
        Ok(phases
            .into_iter()
            .map(|phi| {
                (0..per_class)
                    .map(|_| {
                        let t: f32 = rng.random_range(0.0..1.0);
                        let r = self.r0 + self.r_growth * t + noise.sample(rng).clamp(-max_dev, max_dev);
                        let a = phi + self.sweep * t;
                        [r * a.cos(), r * a.sin()]
                    })
                    .collect()
            })
            .collect())
    }
}

/// Concentric circles around the origin, one radius per class.
#[derive(Debug, Clone)]
pub struct Circles {
    pub r_min: f32,
    pub r_max: f32,
    pub noise: f32,
    pub min_radius_gap: f32,
}

impl Default for Circles {
    fn default() -> Self {
        Self {
            r_min: 0.15,
            r_max: 1.0,
            noise: 0.003,
            min_radius_gap: 0.006,
        }
    }
}

impl ClassFamily for Circles {
    fn name(&self) -> &'static str {
        "circles"
    }

    fn bounding_box(&self) -> [f32; 4] {
        let r = self.r_max + 6.0 * self.noise;
        [-r, r, -r, r]
    }

    fn generate(&self, n: usize, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point>>> {
        let radii = place(
            n,
            rng,
            |r| r.random_range(self.r_min..self.r_max),
            |a, b| (a - b).abs() >= self.min_radius_gap,
            self.name(),
        )?;
        let noise = normal(self.noise);
        let max_dev = 6.0 * self.noise;
        Ok(radii
            .into_iter()
            .map(|radius| {
                (0..per_class)
                    .map(|_| {
                        let a: f32 = rng.random_range(0.0..TAU);
                        let r = radius + noise.sample(rng).clamp(-max_dev, max_dev);
                        [r * a.cos(), r * a.sin()]
                    })
                    .collect()
            })
            .collect())
    }
}

type FamilyCtor = fn() -> Box<dyn ClassFamily>;

/// Name-indexed table of the built-in class families.
pub struct FamilyRegistry {
    entries: BTreeMap<&'static str, FamilyCtor>,
}

impl Default for FamilyRegistry {
    fn default() -> Self {
        let mut reg = Self {
            entries: BTreeMap::new(),
        };
        reg.register("blobs", || Box::new(Blobs::default()));
        reg.register("lines", || Box::new(Lines::default()));
        reg.register("spirals", || Box::new(Spirals::default()));
        reg.register("circles", || Box::new(Circles::default()));
        reg
    }
}

impl FamilyRegistry {
    pub fn register(&mut self, name: &'static str, ctor: FamilyCtor) {
        self.entries.insert(name, ctor);
    }

    pub fn get(&self, name: &str) -> Result<Box<dyn ClassFamily>> {
        self.entries.get(name).map(|ctor| ctor()).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown dataset `{name}` (expected one of: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// Looks up a built-in family by name.
pub fn family(name: &str) -> Result<Box<dyn ClassFamily>> {
    FamilyRegistry::default().get(name)
}
