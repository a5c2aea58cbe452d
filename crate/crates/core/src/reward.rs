//! Task-progress reward and its spatial smoothing.
//!
//! A step earns `weight(primitive) * success * progress`. That scalar is placed
//! as a spike at the executed pixel, convolved with an anisotropic Gaussian
//! whose long axis follows the gripper orientation, and max-fused with the
//! spike to produce a per-pixel supervision map.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridsim::Primitive;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Progress-weighted, Gaussian-smoothed reward.
    Tpg,
    /// Sub-task indicator only, unsmoothed.
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimitiveWeights {
    pub push: f64,
    pub pick: f64,
    pub place: f64,
}

impl Default for PrimitiveWeights {
    fn default() -> Self {
        PrimitiveWeights {
            push: 0.5,
            pick: 1.0,
            place: 1.0,
        }
    }
}

impl PrimitiveWeights {
    pub fn get(&self, p: Primitive) -> f64 {
        match p {
            Primitive::Push => self.push,
            Primitive::Pick => self.pick,
            Primitive::Place => self.place,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub mode: RewardMode,
    pub weights: PrimitiveWeights,
    /// Standard deviation across the gripper axis, in cells.
    pub sigma_y: f64,
    /// `sigma_x / sigma_y`.
    pub anisotropy: f64,
    /// Kernel half-width is `ceil(truncation * sigma_x)`.
    pub truncation: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            mode: RewardMode::Tpg,
            weights: PrimitiveWeights::default(),
            sigma_y: 1.0,
            anisotropy: 2.0,
            truncation: 3.0,
        }
    }
}

impl RewardParams {
    pub fn sigma_x(&self) -> f64 {
        self.anisotropy * self.sigma_y
    }

    pub fn half_width(&self) -> usize {
        (self.truncation * self.sigma_x()).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.push > 0.0 && w.pick > 0.0 && w.place > 0.0) {
            return Err(Error::config("reward.weights must all be positive"));
        }
        if !(self.sigma_y > 0.0 && self.anisotropy > 0.0 && self.truncation > 0.0) {
            return Err(Error::config(
                "reward.sigma_y, reward.anisotropy and reward.truncation must be positive",
            ));
        }
        Ok(())
    }
}

/// Weighted, success-gated progress.
pub fn task_progress_reward(primitive: Primitive, success: bool, progress: f64, params: &RewardParams) -> f64 {
    if !success {
        return 0.0;
    }
    params.weights.get(primitive) * progress
}

pub fn baseline_reward(success: bool) -> f64 {
    if success {
        1.0
    } else {
        0.0
    }
}

/// Scalar reward for one step under the configured mode.
///
/// In TPG mode a step that lowers task progress earns nothing, even when the
/// primitive itself succeeded.
pub fn step_reward(
    primitive: Primitive,
    success: bool,
    progress: f64,
    prev_progress: f64,
    params: &RewardParams,
) -> f64 {
    match params.mode {
        RewardMode::Baseline => baseline_reward(success),
        RewardMode::Tpg => {
            if progress < prev_progress {
                0.0
            } else {
                task_progress_reward(primitive, success, progress, params)
            }
        }
    }
}

/// Bivariate normal density with independent axes.
pub fn gaussian_density(u: f64, v: f64, sigma_x: f64, sigma_y: f64) -> f64 {
    let norm = 1.0 / (2.0 * PI * sigma_x * sigma_y);
    norm * (-(u * u / (2.0 * sigma_x * sigma_x) + v * v / (2.0 * sigma_y * sigma_y))).exp()
}

/// Truncated anisotropic Gaussian on integer offsets, not renormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    half: usize,
    values: Vec<f64>,
}

impl GaussianKernel {
    /// `theta` rotates the long (`sigma_x`) axis away from the grid x-axis.
    pub fn new(theta: f64, params: &RewardParams) -> Self {
        let half = params.half_width();
        let side = 2 * half + 1;
        let (s, c) = theta.sin_cos();
        let (sx, sy) = (params.sigma_x(), params.sigma_y);
        let mut values = Vec::with_capacity(side * side);
        for dy in -(half as i64)..=half as i64 {
            for dx in -(half as i64)..=half as i64 {
                let (dx, dy) = (dx as f64, dy as f64);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                values.push(gaussian_density(u, v, sx, sy));
            }
        }
        GaussianKernel { half, values }
    }

    pub fn half_width(&self) -> usize {
        self.half
    }

    pub fn side(&self) -> usize {
        2 * self.half + 1
    }

    /// Value at offset `(dx, dy)`; zero outside the support.
    pub fn at(&self, dx: i64, dy: i64) -> f64 {
        let h = self.half as i64;
        if dx.abs() > h || dy.abs() > h {
            return 0.0;
        }
        self.values[((dy + h) * (2 * h + 1) + dx + h) as usize]
    }

    pub fn center(&self) -> f64 {
        self.at(0, 0)
    }

    /// Row-major values, `side × side`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Same-size 2D convolution with zero padding: `out(p) = Σ_q grid(q) · k(p − q)`.
///
/// Scatters each nonzero input through the kernel window, which is cheap for
/// the sparse spike maps this module produces.
pub fn convolve_same(grid: &[f64], height: usize, width: usize, kernel: &GaussianKernel) -> Vec<f64> {
    assert_eq!(grid.len(), height * width, "grid size does not match dims");
    let mut out = vec![0.0; grid.len()];
    let h = kernel.half as i64;
    let side = kernel.side();
    for qy in 0..height as i64 {
        for qx in 0..width as i64 {
            let value = grid[qy as usize * width + qx as usize];
            if value == 0.0 {
                continue;
            }
            let y0 = (qy - h).max(0);
            let y1 = (qy + h).min(height as i64 - 1);
            let x0 = (qx - h).max(0);
            let x1 = (qx + h).min(width as i64 - 1);
            for py in y0..=y1 {
                let krow = ((py - qy + h) as usize) * side;
                let orow = py as usize * width;
                for px in x0..=x1 {
                    out[orow + px as usize] += value * kernel.values[krow + (px - qx + h) as usize];
                }
            }
        }
    }
    out
}

/// Per-pixel reward with the set of pixels that carry a training target.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardMap {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<f64>,
    pub supervised: Vec<bool>,
}

impl RewardMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.grid[y * self.width + x]
    }

    pub fn supervised_count(&self) -> usize {
        self.supervised.iter().filter(|&&b| b).count()
    }

    /// `x,y,reward,supervised` rows for inspection.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,reward,supervised\n");
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                let _ = writeln!(s, "{x},{y},{},{}", self.grid[i], u8::from(self.supervised[i]));
            }
        }
        s
    }
}

/// Spike at the executed pixel, smoothed and max-fused with itself.
pub fn tpg_reward_map(
    r_tp: f64,
    x: usize,
    y: usize,
    theta: f64,
    height: usize,
    width: usize,
    params: &RewardParams,
) -> RewardMap {
    let kernel = GaussianKernel::new(theta, params);
    let mut spike = vec![0.0; height * width];
    spike[y * width + x] = r_tp;
    let smoothed = convolve_same(&spike, height, width, &kernel);
    let grid = spike
        .iter()
        .zip(&smoothed)
        .map(|(&a, &b)| a.max(b))
        .collect();
    let h = kernel.half_width() as i64;
    let mut supervised = vec![false; height * width];
    for py in (y as i64 - h).max(0)..=(y as i64 + h).min(height as i64 - 1) {
        for px in (x as i64 - h).max(0)..=(x as i64 + h).min(width as i64 - 1) {
            supervised[py as usize * width + px as usize] = true;
        }
    }
    RewardMap {
        height,
        width,
        grid,
        supervised,
    }
}

/// Bare spike with a single supervised pixel.
pub fn spike_reward_map(r: f64, x: usize, y: usize, height: usize, width: usize) -> RewardMap {
    let mut grid = vec![0.0; height * width];
    let mut supervised = vec![false; height * width];
    grid[y * width + x] = r;
    supervised[y * width + x] = true;
    RewardMap {
        height,
        width,
        grid,
        supervised,
    }
}

/// Supervision map for a step reward under the configured mode.
pub fn reward_map(
    r: f64,
    x: usize,
    y: usize,
    theta: f64,
    height: usize,
    width: usize,
    params: &RewardParams,
) -> RewardMap {
    match params.mode {
        RewardMode::Tpg => tpg_reward_map(r, x, y, theta, height, width, params),
        RewardMode::Baseline => spike_reward_map(r, x, y, height, width),
    }
}
