//! Action selection over per-primitive Q-maps.
//!
//! Two exploration schedules share the same ε-greedy rule: loss-adjusted
//! exploration, where ε is an exponential moving average of a bounded
//! transform of the training loss, and a plain step-decayed ε used as the
//! ablation baseline. Greedy selection is deterministic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridsim::{Action, Primitive};

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationMode {
    /// Loss-adjusted ε.
    Lae,
    /// Step-decayed ε.
    EpsilonGreedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub mode: ExplorationMode,
    /// Loss scale inside the Boltzmann term. Training losses are means over
    /// the whole kernel support and so run small; 10 keeps ε off the floor.
    pub alpha: f64,
    /// Inverse sensitivity.
    pub sigma: f64,
    /// EMA weight of the newest loss term.
    pub beta: f64,
    pub epsilon_init: f64,
    pub decay: EpsilonDecay,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            mode: ExplorationMode::Lae,
            alpha: 10.0,
            sigma: 1.0,
            beta: 0.1,
            epsilon_init: 0.5,
            decay: EpsilonDecay::default(),
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config("policy.sigma must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("policy.alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config("policy.beta must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.epsilon_init) {
            return Err(Error::config("policy.epsilon_init must be in [0, 1)"));
        }
        self.decay.validate()
    }
}

/// `ε(step) = floor + (start − floor) · rate^step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonDecay {
    pub start: f64,
    pub floor: f64,
    pub rate: f64,
}

impl Default for EpsilonDecay {
    fn default() -> Self {
        EpsilonDecay {
            start: 0.5,
            floor: 0.1,
            rate: 0.9998,
        }
    }
}

impl EpsilonDecay {
    pub fn value(&self, step: usize) -> f64 {
        self.floor + (self.start - self.floor) * self.rate.powf(step as f64)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0 <= self.floor && self.floor <= self.start && self.start <= 1.0) {
            return Err(Error::config("policy.decay requires 0 <= floor <= start <= 1"));
        }
        if !(0.0 < self.rate && self.rate <= 1.0) {
            return Err(Error::config("policy.decay.rate must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Decayed ε with the default schedule.
pub fn epsilon_greedy_decay(step: usize) -> f64 {
    EpsilonDecay::default().value(step)
}

/// Bounded Boltzmann transform of a loss: 0 at zero loss, approaching 1.
pub fn boltzmann_loss_term(loss: f64, alpha: f64, sigma: f64) -> f64 {
    let e = (-(alpha * loss).abs() / sigma).exp();
    (1.0 - e) / (1.0 + e)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationState {
    pub epsilon: f64,
    pub beta: f64,
    pub sigma: f64,
    pub alpha_scale: f64,
    pub epsilon_init: f64,
}

impl ExplorationState {
    pub fn new(params: &PolicyParams) -> Self {
        ExplorationState {
            epsilon: params.epsilon_init,
            beta: params.beta,
            sigma: params.sigma,
            alpha_scale: params.alpha,
            epsilon_init: params.epsilon_init,
        }
    }

    pub fn loss_term(&self, loss: f64) -> f64 {
        boltzmann_loss_term(loss, self.alpha_scale, self.sigma)
    }
}

/// EMA step towards the loss term. Only `epsilon` changes.
pub fn update_exploration(state: &ExplorationState, loss: f64) -> ExplorationState {
    let f = state.loss_term(loss);
    let epsilon = state.beta * f + (1.0 - state.beta) * state.epsilon;
    ExplorationState {
        epsilon: epsilon.clamp(0.0, BELOW_ONE),
        ..*state
    }
}

/// Per-primitive `R × h × w` Q-value grids. Absent primitives are not candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct QMapSet {
    pub rotations: usize,
    pub height: usize,
    pub width: usize,
    maps: [Option<Vec<f64>>; 3],
}

impl QMapSet {
    pub fn new(rotations: usize, height: usize, width: usize) -> Self {
        QMapSet {
            rotations,
            height,
            width,
            maps: [None, None, None],
        }
    }

    pub fn insert(&mut self, primitive: Primitive, values: Vec<f64>) -> Result<()> {
        let expected = self.rotations * self.height * self.width;
        if values.len() != expected {
            return Err(Error::Shape {
                expected: format!("{expected} values"),
                actual: format!("{}", values.len()),
            });
        }
        self.maps[primitive.index()] = Some(values);
        Ok(())
    }

    pub fn get(&self, primitive: Primitive) -> Option<&[f64]> {
        self.maps[primitive.index()].as_deref()
    }

    pub fn value(&self, primitive: Primitive, r: usize, x: usize, y: usize) -> Option<f64> {
        self.get(primitive)
            .map(|m| m[(r * self.height + y) * self.width + x])
    }

    /// Multiplies every value by `c`.
    pub fn scaled(&self, c: f64) -> QMapSet {
        let mut out = self.clone();
        for m in out.maps.iter_mut().flatten() {
            m.iter_mut().for_each(|v| *v *= c);
        }
        out
    }
}

/// Per-primitive `h × w` validity grids, shared across rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionMasks {
    pub height: usize,
    pub width: usize,
    masks: [Option<Vec<bool>>; 3],
}

impl ActionMasks {
    pub fn new(height: usize, width: usize) -> Self {
        ActionMasks {
            height,
            width,
            masks: [None, None, None],
        }
    }

    pub fn insert(&mut self, primitive: Primitive, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.height * self.width, "mask size does not match dims");
        self.masks[primitive.index()] = Some(mask);
    }

    pub fn get(&self, primitive: Primitive) -> Option<&[bool]> {
        self.masks[primitive.index()].as_deref()
    }

    pub fn is_valid(&self, primitive: Primitive, x: usize, y: usize) -> bool {
        self.get(primitive)
            .is_some_and(|m| m[y * self.width + x])
    }

    pub fn count(&self, primitive: Primitive) -> usize {
        self.get(primitive)
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }
}

fn candidates<'a>(
    q: &'a QMapSet,
    masks: &'a ActionMasks,
) -> impl Iterator<Item = (Primitive, &'a [f64], &'a [bool])> + 'a {
    Primitive::ALL
        .into_iter()
        .filter_map(move |p| Some((p, q.get(p)?, masks.get(p)?)))
}

/// Deterministic argmax over valid entries; ties go to the lowest `(primitive, r, y, x)`.
pub fn greedy_action(q: &QMapSet, masks: &ActionMasks) -> Result<Action> {
    let plane = q.height * q.width;
    let mut best: Option<(f64, Action)> = None;
    for (p, values, mask) in candidates(q, masks) {
        for r in 0..q.rotations {
            for (i, &valid) in mask.iter().enumerate() {
                if !valid {
                    continue;
                }
                let v = values[r * plane + i];
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    let mut a = Action::new(p, i % q.width, i / q.width, r);
                    a.q_value = v;
                    best = Some((v, a));
                }
            }
        }
    }
    best.map(|(_, a)| a).ok_or(Error::NoValidAction)
}

/// Uniform choice over every valid `(primitive, r, x, y)` tuple.
pub fn uniform_action<R: Rng + ?Sized>(q: &QMapSet, masks: &ActionMasks, rng: &mut R) -> Result<Action> {
    let total: usize = candidates(q, masks)
        .map(|(p, _, _)| masks.count(p) * q.rotations)
        .sum();
    if total == 0 {
        return Err(Error::NoValidAction);
    }
    let mut pick = rng.gen_range(0..total);
    let plane = q.height * q.width;
    for (p, values, mask) in candidates(q, masks) {
        let n = masks.count(p);
        if pick >= n * q.rotations {
            pick -= n * q.rotations;
            continue;
        }
        let r = pick / n;
        let k = pick % n;
        let i = mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .nth(k)
            .map(|(i, _)| i)
            .expect("index within valid count");
        let mut a = Action::new(p, i % q.width, i / q.width, r);
        a.q_value = values[r * plane + i];
        return Ok(a);
    }
    unreachable!("pick index is below the candidate total")
}

/// ε-greedy: explore uniformly when a fresh draw falls below `epsilon`.
pub fn select_action<R: Rng + ?Sized>(
    q: &QMapSet,
    masks: &ActionMasks,
    epsilon: f64,
    rng: &mut R,
) -> Result<Action> {
    let xi: f64 = rng.gen();
    if xi < epsilon {
        uniform_action(q, masks, rng)
    } else {
        greedy_action(q, masks)
    }
}
