//! Numerical self-checks run by the `selftest` command: analytic gradients
//! against central differences, and the reward smoothing and conv layers
//! against direct summation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gridsim::{Action, Observation, Primitive, OBS_CHANNELS};
use crate::qfunc::conv::{self, ConvShape};
use crate::qfunc::{NetworkParams, PrevActionContext, QNetwork};
use crate::replay::Transition;
use crate::reward::{self, GaussianKernel, RewardParams};

/// Denominator floor for relative errors, so that near-zero gradients compare absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub draws: usize,
    pub compared: usize,
    /// Parameters whose ±step perturbation flipped a ReLU, where the loss is not differentiable.
    pub kinks_skipped: usize,
    pub max_relative_error: f64,
}

/// Random observation, context and finalized transition on an `h × w` grid.
pub fn random_transition<R: Rng>(rng: &mut R, h: usize, w: usize, rotations: usize) -> Transition {
    let observation = Observation {
        height: h,
        width: w,
        data: (0..OBS_CHANNELS * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let primitive = Primitive::ALL[rng.gen_range(0..3)];
    let prev = Primitive::ALL[rng.gen_range(0..3)];
    let mut prev_action = Action::new(prev, rng.gen_range(0..w), rng.gen_range(0..h), 0);
    prev_action.q_value = rng.gen_range(-1.0..1.0);
    let context = PrevActionContext::from_action(&prev_action, h, w);
    let action = Action::new(primitive, rng.gen_range(0..w), rng.gen_range(0..h), rng.gen_range(0..rotations));
    let r = if rng.gen_bool(0.8) { rng.gen_range(0.1..1.0) } else { 0.0 };
    let theta = crate::gridsim::theta_radians(action.theta_index, rotations);
    let map = reward::tpg_reward_map(r, action.x, action.y, theta, h, w, &RewardParams::default());
    let mut t = Transition::new(observation, context, action, r, map);
    t.next_reward = Some(rng.gen_range(0.0..1.0));
    t
}

fn loss_of(net: &QNetwork, batch: &[&Transition], params: &NetworkParams) -> f64 {
    net.loss_and_gradient(batch, params).expect("valid batch").0
}

/// Compares analytic and central-difference gradients over `draws` random
/// (network, transition, loss shape) draws, `per_draw` parameters each.
pub fn gradient_check(draws: usize, per_draw: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, rotations) = (6, 6, 4);
    let mut report = GradCheckReport::default();
    for draw in 0..draws {
        let params = NetworkParams {
            hidden_channels: 4,
            loss_alpha: [2.0, 1.0, 0.5, 0.0, -1.0][draw % 5],
            loss_scale: rng.gen_range(0.2..2.0),
            ..NetworkParams::default()
        };
        let mut net = QNetwork::new(rotations, h, w, &params, rng.gen());
        let t = random_transition(&mut rng, h, w, rotations);
        let batch = [&t];
        let p = t.action.primitive;
        let (_, _, grads) = net.loss_and_gradient(&batch, &params).expect("valid batch");
        let analytic = grads[p.index()].clone().expect("executed net has gradient");
        let base_pattern = net.activation_pattern(&t);
        let n = analytic.len();
        for _ in 0..per_draw {
            let i = rng.gen_range(0..n);
            let orig = net.params(p)[i];
            net.params_mut(p)[i] = orig + FD_STEP;
            let up_pattern = net.activation_pattern(&t);
            let up = loss_of(&net, &batch, &params);
            net.params_mut(p)[i] = orig - FD_STEP;
            let down_pattern = net.activation_pattern(&t);
            let down = loss_of(&net, &batch, &params);
            net.params_mut(p)[i] = orig;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let denom = analytic[i].abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            let err = (analytic[i] - numeric).abs() / denom;
            report.max_relative_error = report.max_relative_error.max(err);
            report.compared += 1;
        }
        report.draws += 1;
    }
    report
}

/// Max absolute gap between the reward smoothing and a gather-form double loop
/// over `grids` random sparse grids up to 32×32.
pub fn smoothing_oracle(grids: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..grids {
        let h = rng.gen_range(1..=32);
        let w = rng.gen_range(1..=32);
        let grid: Vec<f64> = (0..h * w)
            .map(|_| if rng.gen_bool(0.2) { rng.gen_range(0.0..1.0) } else { 0.0 })
            .collect();
        let params = RewardParams {
            sigma_y: rng.gen_range(0.5..2.0),
            ..RewardParams::default()
        };
        let kernel = GaussianKernel::new(rng.gen_range(0.0..std::f64::consts::TAU), &params);
        let fast = reward::convolve_same(&grid, h, w, &kernel);
        let half = kernel.half_width() as i64;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut s = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (qx, qy) = (x - dx, y - dy);
                        if qx >= 0 && qy >= 0 && qx < w as i64 && qy < h as i64 {
                            s += grid[qy as usize * w + qx as usize] * kernel.at(dx, dy);
                        }
                    }
                }
                worst = worst.max((s - fast[y as usize * w + x as usize]).abs());
            }
        }
    }
    worst
}

/// Max absolute gap between the conv layer forward pass and direct summation.
pub fn conv_oracle(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let shape = ConvShape {
            in_channels: rng.gen_range(1..4),
            out_channels: rng.gen_range(1..4),
            kernel: [1, 3, 5][rng.gen_range(0..3)],
        };
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let params: Vec<f64> = (0..shape.param_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input: Vec<f64> = (0..shape.in_channels * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = conv::forward(&shape, &params, &input, h, w);
        let k = shape.kernel as i64;
        let pad = k / 2;
        for co in 0..shape.out_channels {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut s = params[shape.weight_len() + co];
                    for ci in 0..shape.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, x + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                let wi = ((co * shape.in_channels + ci) as i64 * k + ky) * k + kx;
                                s += params[wi as usize] * input[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    let got = fast[co * h * w + y as usize * w + x as usize];
                    worst = worst.max((s - got).abs());
                }
            }
        }
    }
    worst
}
