//! Prioritized experience replay with stochastic rank-based sampling.
//!
//! Sampleable items are ranked by descending priority (ties by insertion
//! order) and drawn with probability proportional to `(1 / rank)^omega`,
//! without replacement within a batch. The most recent transition stays
//! pending until the reward of the following step is known.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridsim::{Action, Observation};
use crate::qfunc::PrevActionContext;
use crate::reward::RewardMap;

/// Floor added to `|loss|` so every priority stays positive.
pub const PRIORITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub context: PrevActionContext,
    pub action: Action,
    pub reward: f64,
    /// Reward of the following step; `None` while pending.
    pub next_reward: Option<f64>,
    pub reward_map: RewardMap,
    pub priority: f64,
    pub insert_index: u64,
}

impl Transition {
    pub fn new(
        observation: Observation,
        context: PrevActionContext,
        action: Action,
        reward: f64,
        reward_map: RewardMap,
    ) -> Self {
        Transition {
            observation,
            context,
            action,
            reward,
            next_reward: None,
            reward_map,
            priority: 1.0,
            insert_index: 0,
        }
    }

    pub fn is_pending(&self) -> bool {
        self.next_reward.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayParams {
    pub capacity: usize,
    /// Rank exponent; 0 is uniform.
    pub omega: f64,
}

impl Default for ReplayParams {
    fn default() -> Self {
        ReplayParams {
            capacity: 2000,
            omega: 0.7,
        }
    }
}

impl ReplayParams {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::config("replay.capacity must be positive"));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::config("replay.omega must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    params: ReplayParams,
    items: VecDeque<Transition>,
    next_index: u64,
}

/// Summary row for debugging dumps.
#[derive(Clone, Debug, Serialize)]
pub struct DumpRow {
    pub insert_index: u64,
    pub priority: f64,
    pub primitive: String,
    pub x: usize,
    pub y: usize,
    pub theta_index: usize,
    pub reward: f64,
    pub next_reward: Option<f64>,
}

impl ReplayBuffer {
    pub fn new(params: ReplayParams) -> Self {
        ReplayBuffer {
            params,
            items: VecDeque::with_capacity(params.capacity),
            next_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.params.capacity
    }

    pub fn has_pending(&self) -> bool {
        self.items.back().is_some_and(Transition::is_pending)
    }

    pub fn sampleable(&self) -> usize {
        self.items.iter().filter(|t| !t.is_pending()).count()
    }

    pub fn get(&self, insert_index: u64) -> Option<&Transition> {
        self.position(insert_index).map(|i| &self.items[i])
    }

    fn position(&self, insert_index: u64) -> Option<usize> {
        let first = self.items.front()?.insert_index;
        let pos = insert_index.checked_sub(first)? as usize;
        (pos < self.items.len()).then_some(pos)
    }

    /// Stores `t` at the current maximum priority. The new item is pending.
    pub fn push(&mut self, mut t: Transition) -> Result<u64> {
        if self.has_pending() {
            return Err(Error::contract(
                "cannot push while the previous transition is pending",
            ));
        }
        t.priority = self
            .items
            .iter()
            .map(|t| t.priority)
            .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))))
            .unwrap_or(1.0);
        t.insert_index = self.next_index;
        t.next_reward = None;
        self.next_index += 1;
        if self.items.len() == self.params.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(self.next_index - 1)
    }

    /// Records the next-step reward on the pending transition.
    pub fn finalize_pending(&mut self, r_next: f64) -> Result<()> {
        match self.items.back_mut() {
            Some(t) if t.is_pending() => {
                t.next_reward = Some(r_next);
                Ok(())
            }
            _ => Err(Error::NoPending),
        }
    }

    /// Sampleable positions in rank order (rank 1 first).
    fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.items.len())
            .filter(|&i| !self.items[i].is_pending())
            .collect();
        idx.sort_by(|&a, &b| {
            let (ta, tb) = (&self.items[a], &self.items[b]);
            tb.priority
                .total_cmp(&ta.priority)
                .then(ta.insert_index.cmp(&tb.insert_index))
        });
        idx
    }

    fn rank_weights(&self, n: usize) -> Vec<f64> {
        (1..=n)
            .map(|rank| (1.0 / rank as f64).powf(self.params.omega))
            .collect()
    }

    /// `(insert_index, probability)` of a single draw for every sampleable item, in rank order.
    pub fn rank_distribution(&self) -> Vec<(u64, f64)> {
        let ranked = self.ranked();
        let weights = self.rank_weights(ranked.len());
        let total: f64 = weights.iter().sum();
        ranked
            .iter()
            .zip(weights)
            .map(|(&i, w)| (self.items[i].insert_index, w / total))
            .collect()
    }

    /// Draws `k` distinct sampleable transitions; returns them with their insert indices.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<(Vec<&Transition>, Vec<u64>)> {
        let ranked = self.ranked();
        if k > ranked.len() {
            return Err(Error::Underfull {
                requested: k,
                available: ranked.len(),
            });
        }
        let mut weights = self.rank_weights(ranked.len());
        let mut batch = Vec::with_capacity(k);
        let mut indices = Vec::with_capacity(k);
        for _ in 0..k {
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = None;
            let mut last_live = 0;
            for (j, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                last_live = j;
                if u < w {
                    chosen = Some(j);
                    break;
                }
                u -= w;
            }
            // Rounding can leave `u` just past the last live weight.
            let j = chosen.unwrap_or(last_live);
            weights[j] = 0.0;
            let t = &self.items[ranked[j]];
            batch.push(t);
            indices.push(t.insert_index);
        }
        Ok((batch, indices))
    }

    /// Sets `priority = |loss| + floor`; evicted indices are skipped.
    pub fn update_priorities(&mut self, indices: &[u64], losses: &[f64]) {
        for (&idx, &loss) in indices.iter().zip(losses) {
            if let Some(pos) = self.position(idx) {
                self.items[pos].priority = loss.abs() + PRIORITY_FLOOR;
            }
        }
    }

    pub fn dump(&self) -> Vec<DumpRow> {
        self.items
            .iter()
            .map(|t| DumpRow {
                insert_index: t.insert_index,
                priority: t.priority,
                primitive: t.action.primitive.name().to_string(),
                x: t.action.x,
                y: t.action.y,
                theta_index: t.action.theta_index,
                reward: t.reward,
                next_reward: t.next_reward,
            })
            .collect()
    }
}
