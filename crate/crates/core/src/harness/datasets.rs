//! Synthetic testbeds and the sampling interface the trainer draws from.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Gaussian modes evenly spaced on a circle.
#[derive(Clone, Debug, PartialEq)]
pub struct RingConfig {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self { modes: 8, radius: 2.0, std: 0.02 }
    }
}

impl RingConfig {
    /// Mode `m` sits at angle `2πm/M`.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.modes)
            .map(|m| {
                let a = 2.0 * PI * m as f64 / self.modes as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    /// `n` points with a uniformly drawn mode each; returns points and modes.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
        if self.modes < 2 {
            return Err(invalid(format!("ring needs at least 2 modes, got {}", self.modes)));
        }
        let centers = self.centers();
        let mut pts = Vec::with_capacity(n);
        let mut modes = Vec::with_capacity(n);
        for _ in 0..n {
            let m = rng.random_range(0..self.modes);
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            pts.push([centers[m][0] + self.std * dx, centers[m][1] + self.std * dy]);
            modes.push(m);
        }
        Ok((pts, modes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square = 0,
    Circle = 1,
    Cross = 2,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Cross];
}

/// Renders one shape on a `-1` background with `+1` foreground.
pub fn render_shape(shape: Shape, cx: f64, cy: f64, size: f64) -> Vec<f64> {
    let mut img = vec![-1.0; IMAGE_PIXELS];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match shape {
                Shape::Square => dx.abs() <= size && dy.abs() <= size,
                Shape::Circle => dx * dx + dy * dy <= size * size,
                Shape::Cross => {
                    let arm = (size / 3.0).max(1.0);
                    (dx.abs() <= arm && dy.abs() <= size) || (dy.abs() <= arm && dx.abs() <= size)
                }
            };
            if inside {
                img[y * IMAGE_SIDE + x] = 1.0;
            }
        }
    }
    img
}

/// Random square, circle or cross at a random position and size.
pub fn random_shape<R: Rng + ?Sized>(rng: &mut R) -> (Vec<f64>, usize) {
    let shape = Shape::ALL[rng.random_range(0..3)];
    let size = rng.random_range(3.0..6.0);
    let lo = size;
    let hi = IMAGE_SIDE as f64 - size;
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(lo..hi);
    (render_shape(shape, cx, cy, size), shape as usize)
}

/// A training source.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Ring(RingConfig),
    Shapes,
    /// Fixed set of ingested `16×16` images in `[-1, 1]`.
    Images(Vec<Vec<f64>>),
}

impl Dataset {
    /// Per-sample shape.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Dataset::Ring(_) => vec![2],
            _ => vec![1, IMAGE_SIDE, IMAGE_SIDE],
        }
    }

    /// A batch `[n, ...sample_shape]`.
    pub fn batch<T: Scalar, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor<T>> {
        let mut shape = vec![n];
        shape.extend(self.sample_shape());
        let data: Vec<f64> = match self {
            Dataset::Ring(cfg) => cfg.sample(n, rng)?.0.into_iter().flatten().collect(),
            Dataset::Shapes => (0..n).flat_map(|_| random_shape(rng).0).collect(),
            Dataset::Images(imgs) => {
                if imgs.is_empty() {
                    return Err(invalid("image dataset is empty"));
                }
                (0..n).flat_map(|_| imgs[rng.random_range(0..imgs.len())].clone()).collect()
            }
        };
        Tensor::from_f64(shape, &data)
    }
}
