//! Training loop, greedy evaluation and the three-variant ablation ladder.
//!
//! Every random stream is derived from `run.seed`, so a configuration fully
//! determines the training trajectory, the evaluation seeds and every logged
//! number. Training is sequential; evaluation runs are independent and run in
//! parallel over one read-only network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gridsim::{
    self, task_progress, valid_action_mask, Action, DoneReason, Observation, Primitive, Workspace,
};
use crate::policy::{self, ActionMasks, ExplorationMode, ExplorationState};
use crate::qfunc::{compute_target, PrevActionContext, QNetwork, Trainer};
use crate::replay::{ReplayBuffer, Transition};
use crate::reward::{self, RewardMode};

const SALT_ENV: u64 = 0x9e37_79b9_7f4a_7c15;
const SALT_INIT: u64 = 0xc2b2_ae3d_27d4_eb4f;
const SALT_REPLAY: u64 = 0x1656_67b1_9e37_79f9;
const SALT_EVAL: u64 = 0x27d4_eb2f_1656_67c5;

/// One executed training action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub episode: usize,
    pub primitive: Primitive,
    pub x: usize,
    pub y: usize,
    pub theta: usize,
    pub q: f64,
    pub success: u8,
    pub progress: f64,
    pub reward: f64,
    /// Regression target at the executed pixel, known once the next step has run.
    pub target: Option<f64>,
    pub loss: Option<f64>,
    pub epsilon: f64,
}

/// Learning-curve point over a window of training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step_end: usize,
    pub success_rate: f64,
    /// Mean ideal/actual ratio of episodes that reached the goal in this window.
    pub efficiency: Option<f64>,
    pub goals: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub network: QNetwork,
    pub records: Vec<StepRecord>,
    pub curve: Vec<CurvePoint>,
    pub episodes: usize,
    pub final_epsilon: f64,
}

impl TrainReport {
    /// Success rate over the first and last `n` steps.
    pub fn success_rate_span(&self, n: usize) -> (f64, f64) {
        let rate = |rs: &[StepRecord]| {
            if rs.is_empty() {
                0.0
            } else {
                rs.iter().map(|r| r.success as f64).sum::<f64>() / rs.len() as f64
            }
        };
        let n = n.min(self.records.len());
        (rate(&self.records[..n]), rate(&self.records[self.records.len() - n..]))
    }
}

fn masks_for(ws: &Workspace, allowed: &[Primitive]) -> ActionMasks {
    let mut masks = ActionMasks::new(ws.height, ws.width);
    for &p in allowed {
        masks.insert(p, valid_action_mask(ws, p));
    }
    masks
}

struct CurveBuilder {
    window: usize,
    successes: usize,
    steps: usize,
    efficiencies: Vec<f64>,
    points: Vec<CurvePoint>,
}

impl CurveBuilder {
    fn new(window: usize) -> Self {
        CurveBuilder {
            window,
            successes: 0,
            steps: 0,
            efficiencies: Vec::new(),
            points: Vec::new(),
        }
    }

    fn record(&mut self, step: usize, success: bool, goal_efficiency: Option<f64>) {
        self.steps += 1;
        self.successes += usize::from(success);
        self.efficiencies.extend(goal_efficiency);
        if self.steps == self.window {
            self.flush(step + 1);
        }
    }

    fn flush(&mut self, step_end: usize) {
        if self.steps == 0 {
            return;
        }
        let efficiency = (!self.efficiencies.is_empty())
            .then(|| self.efficiencies.iter().sum::<f64>() / self.efficiencies.len() as f64);
        self.points.push(CurvePoint {
            step_end,
            success_rate: self.successes as f64 / self.steps as f64,
            efficiency,
            goals: self.efficiencies.len(),
        });
        self.successes = 0;
        self.steps = 0;
        self.efficiencies.clear();
    }
}

pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    train_with(cfg, |_, _| Ok(()))
}

/// Trains, calling `on_checkpoint(step, net)` every `run.checkpoint_interval` steps.
pub fn train_with<F>(cfg: &RunConfig, mut on_checkpoint: F) -> Result<TrainReport>
where
    F: FnMut(usize, &QNetwork) -> Result<()>,
{
    cfg.validate()?;
    let task = &cfg.task;
    let seed = cfg.run.seed;
    let allowed = task.allowed();
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_ENV);
    let mut replay_rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_REPLAY);

    let mut net = QNetwork::new(task.rotations, task.height, task.width, &cfg.network, seed ^ SALT_INIT);
    let mut trainer = Trainer::new(cfg.network.clone());
    let mut replay = ReplayBuffer::new(cfg.replay);
    let mut exploration = ExplorationState::new(&cfg.policy);
    let mut curve = CurveBuilder::new(cfg.run.curve_window);
    let mut records: Vec<StepRecord> = Vec::with_capacity(cfg.run.train_steps);
    let mut pending_record: Option<usize> = None;

    let (mut ws, mut obs) = gridsim::reset(task, env_rng.gen())?;
    let mut ctx = PrevActionContext::zeros(task.height, task.width);
    let mut prev_progress = task_progress(&ws, task);
    let mut episode = 0;
    let mut episode_steps = 0;
    let gamma = cfg.network.gamma;

    let finalize = |replay: &mut ReplayBuffer, records: &mut Vec<StepRecord>, pending: &mut Option<usize>, r_next: f64| -> Result<()> {
        if replay.has_pending() {
            replay.finalize_pending(r_next)?;
        }
        if let Some(i) = pending.take() {
            records[i].target = Some(compute_target(records[i].reward, r_next, gamma));
        }
        Ok(())
    };

    let mut step = 0;
    while step < cfg.run.train_steps {
        let q = net.forward_all(&obs, &ctx, &allowed)?;
        let masks = masks_for(&ws, &allowed);
        let epsilon = match cfg.policy.mode {
            ExplorationMode::Lae => exploration.epsilon,
            ExplorationMode::EpsilonGreedy => cfg.policy.decay.value(step),
        };
        let action = match policy::select_action(&q, &masks, epsilon, &mut policy_rng) {
            Ok(a) => a,
            Err(Error::NoValidAction) => {
                finalize(&mut replay, &mut records, &mut pending_record, 0.0)?;
                (ws, obs) = gridsim::reset(task, env_rng.gen())?;
                ctx = PrevActionContext::zeros(task.height, task.width);
                prev_progress = task_progress(&ws, task);
                episode += 1;
                episode_steps = 0;
                continue;
            }
            Err(e) => return Err(e),
        };

        let result = gridsim::step(&mut ws, &action)?;
        episode_steps += 1;
        let r = reward::step_reward(action.primitive, result.success, result.progress, prev_progress, &cfg.reward);
        let theta = gridsim::theta_radians(action.theta_index, task.rotations);
        let map = reward::reward_map(r, action.x, action.y, theta, task.height, task.width, &cfg.reward);

        finalize(&mut replay, &mut records, &mut pending_record, r)?;
        replay.push(Transition::new(obs, ctx, action, r, map))?;
        records.push(StepRecord {
            step,
            episode,
            primitive: action.primitive,
            x: action.x,
            y: action.y,
            theta: action.theta_index,
            q: action.q_value,
            success: u8::from(result.success),
            progress: result.progress,
            reward: r,
            target: None,
            loss: None,
            epsilon,
        });
        pending_record = Some(records.len() - 1);
        if result.done {
            finalize(&mut replay, &mut records, &mut pending_record, 0.0)?;
        }

        if replay.sampleable() >= cfg.network.batch_size {
            let (batch, indices) = replay.sample(cfg.network.batch_size, &mut replay_rng)?;
            let loss = trainer.train_step(&mut net, &batch)?;
            replay.update_priorities(&indices, &loss.per_item);
            if cfg.policy.mode == ExplorationMode::Lae {
                exploration = policy::update_exploration(&exploration, loss.mean);
            }
            records.last_mut().expect("record pushed").loss = Some(loss.mean);
        }

        let goal_eff = (result.done_reason == Some(DoneReason::Goal))
            .then(|| task.ideal_actions() as f64 / episode_steps as f64);
        curve.record(step, result.success, goal_eff);

        ctx = PrevActionContext::from_action(&action, task.height, task.width);
        obs = result.observation;
        prev_progress = result.progress;
        if result.done {
            (ws, obs) = gridsim::reset(task, env_rng.gen())?;
            ctx = PrevActionContext::zeros(task.height, task.width);
            prev_progress = task_progress(&ws, task);
            episode += 1;
            episode_steps = 0;
        }
        step += 1;
        if cfg.run.checkpoint_interval > 0 && step % cfg.run.checkpoint_interval == 0 {
            on_checkpoint(step, &net)?;
        }
    }
    // Training stops mid-episode: the last action has no successor.
    finalize(&mut replay, &mut records, &mut pending_record, 0.0)?;
    curve.flush(step);

    Ok(TrainReport {
        network: net,
        records,
        curve: curve.points,
        episodes: episode + usize::from(episode_steps > 0),
        final_epsilon: exploration.epsilon,
    })
}

/// Chooses actions during evaluation.
pub trait EvalPolicy {
    fn begin_episode(&mut self) {}
    fn act(&mut self, ws: &Workspace, obs: &Observation) -> Result<Action>;
}

/// Deterministic argmax over the network's Q-maps, conditioned on its own previous action.
pub struct GreedyPolicy<'a> {
    net: &'a QNetwork,
    allowed: Vec<Primitive>,
    ctx: PrevActionContext,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(net: &'a QNetwork, allowed: Vec<Primitive>) -> Self {
        GreedyPolicy {
            net,
            allowed,
            ctx: PrevActionContext::zeros(net.height, net.width),
        }
    }
}

impl EvalPolicy for GreedyPolicy<'_> {
    fn begin_episode(&mut self) {
        self.ctx = PrevActionContext::zeros(self.net.height, self.net.width);
    }

    fn act(&mut self, ws: &Workspace, obs: &Observation) -> Result<Action> {
        let q = self.net.forward_all(obs, &self.ctx, &self.allowed)?;
        let action = policy::greedy_action(&q, &masks_for(ws, &self.allowed))?;
        self.ctx = PrevActionContext::from_action(&action, ws.height, ws.width);
        Ok(action)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunEnd {
    Goal,
    FailStreak,
    MaxSteps,
    NoValidAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub end: RunEnd,
    pub actions: usize,
    pub pick_attempts: usize,
    pub pick_successes: usize,
    /// Picks aimed at a tallest stack of height at least two.
    pub tallest_stack_picks: usize,
}

impl RunOutcome {
    pub fn completed(&self) -> bool {
        self.end == RunEnd::Goal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub completion_rate: f64,
    /// Mean per-run pick success over completed runs that attempted a pick.
    pub pick_success: Option<f64>,
    /// Mean ideal/actual action ratio over completed runs.
    pub action_efficiency: Option<f64>,
    pub runs: Vec<RunOutcome>,
}

impl Metrics {
    pub fn from_runs(runs: Vec<RunOutcome>, ideal_actions: usize) -> Self {
        let completed: Vec<&RunOutcome> = runs.iter().filter(|r| r.completed()).collect();
        let completion_rate = if runs.is_empty() {
            0.0
        } else {
            completed.len() as f64 / runs.len() as f64
        };
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let pick_success = mean(
            completed
                .iter()
                .filter(|r| r.pick_attempts > 0)
                .map(|r| r.pick_successes as f64 / r.pick_attempts as f64)
                .collect(),
        );
        let action_efficiency = mean(
            completed
                .iter()
                .map(|r| ideal_actions as f64 / r.actions as f64)
                .collect(),
        );
        Metrics {
            completion_rate,
            pick_success,
            action_efficiency,
            runs,
        }
    }

    pub fn completed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.completed()).count()
    }

    /// Share of all evaluation picks that targeted a tallest stack of height ≥ 2.
    pub fn tallest_pick_fraction(&self) -> Option<f64> {
        let picks: usize = self.runs.iter().map(|r| r.pick_attempts).sum();
        let tallest: usize = self.runs.iter().map(|r| r.tallest_stack_picks).sum();
        (picks > 0).then(|| tallest as f64 / picks as f64)
    }
}

/// Seeds for evaluation episodes, disjoint from the training stream.
pub fn eval_seeds(cfg: &RunConfig) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ SALT_EVAL);
    (0..cfg.run.eval_runs).map(|_| rng.gen()).collect()
}

/// Plays one episode to termination.
pub fn run_episode<P: EvalPolicy>(cfg: &RunConfig, seed: u64, policy: &mut P) -> Result<RunOutcome> {
    let (mut ws, mut obs) = gridsim::reset(&cfg.task, seed)?;
    policy.begin_episode();
    let mut out = RunOutcome {
        seed,
        end: RunEnd::MaxSteps,
        actions: 0,
        pick_attempts: 0,
        pick_successes: 0,
        tallest_stack_picks: 0,
    };
    loop {
        let action = match policy.act(&ws, &obs) {
            Ok(a) => a,
            Err(Error::NoValidAction) => {
                out.end = RunEnd::NoValidAction;
                return Ok(out);
            }
            Err(e) => return Err(e),
        };
        if action.primitive == Primitive::Pick {
            out.pick_attempts += 1;
            let h = ws.stack_height(action.x, action.y);
            if h >= 2 && h == ws.max_stack_height() {
                out.tallest_stack_picks += 1;
            }
        }
        let result = gridsim::step(&mut ws, &action)?;
        out.actions += 1;
        if action.primitive == Primitive::Pick && result.success {
            out.pick_successes += 1;
        }
        obs = result.observation;
        if let Some(reason) = result.done_reason {
            out.end = match reason {
                DoneReason::Goal => RunEnd::Goal,
                DoneReason::FailStreak => RunEnd::FailStreak,
                DoneReason::MaxSteps => RunEnd::MaxSteps,
            };
            return Ok(out);
        }
    }
}

/// Evaluates any policy factory over the configured evaluation seeds.
pub fn evaluate_with<P, F>(cfg: &RunConfig, make_policy: F) -> Result<Metrics>
where
    P: EvalPolicy,
    F: Fn() -> P + Sync,
{
    cfg.validate()?;
    let runs = eval_seeds(cfg)
        .into_par_iter()
        .map(|seed| run_episode(cfg, seed, &mut make_policy()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_runs(runs, cfg.task.ideal_actions()))
}

/// Greedy evaluation of a trained network. The network is only read.
pub fn evaluate(net: &QNetwork, cfg: &RunConfig) -> Result<Metrics> {
    let task = &cfg.task;
    if (net.rotations, net.height, net.width) != (task.rotations, task.height, task.width) {
        return Err(Error::Shape {
            expected: format!("R={} {}x{}", task.rotations, task.height, task.width),
            actual: format!("R={} {}x{}", net.rotations, net.height, net.width),
        });
    }
    let allowed = task.allowed();
    evaluate_with(cfg, || GreedyPolicy::new(net, allowed.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Indicator reward, decayed ε-greedy.
    Baseline,
    /// Progress-Gaussian reward, decayed ε-greedy.
    Tpgr,
    /// Progress-Gaussian reward, loss-adjusted exploration.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Tpgr, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Tpgr => "tpgr",
            Variant::Full => "full",
        }
    }

    /// `cfg` with the reward and exploration modes of this variant.
    pub fn configure(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let (reward, policy) = match self {
            Variant::Baseline => (RewardMode::Baseline, ExplorationMode::EpsilonGreedy),
            Variant::Tpgr => (RewardMode::Tpg, ExplorationMode::EpsilonGreedy),
            Variant::Full => (RewardMode::Tpg, ExplorationMode::Lae),
        };
        c.reward.mode = reward;
        c.policy.mode = policy;
        c
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    pub metrics: Metrics,
}

/// Trains and evaluates all three variants for `cfg.run.seed`.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<VariantResult>> {
    run_ablation_seeds(cfg, &[cfg.run.seed])
}

/// Every (seed, variant) pair, ordered by seed then variant.
pub fn run_ablation_seeds(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<VariantResult>> {
    cfg.validate()?;
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| Variant::ALL.into_iter().map(move |v| (s, v)))
        .collect();
    jobs.into_par_iter()
        .map(|(seed, variant)| {
            let mut c = variant.configure(cfg);
            c.run.seed = seed;
            let report = train(&c)?;
            let metrics = evaluate(&report.network, &c)?;
            Ok(VariantResult {
                variant,
                seed,
                curve: report.curve,
                metrics,
            })
        })
        .collect()
}

/// Median over seeds of `(completion_rate, action_efficiency)`; absent efficiency counts as 0.
pub fn median_metrics(results: &[VariantResult], variant: Variant) -> (f64, f64) {
    let pick: Vec<&VariantResult> = results.iter().filter(|r| r.variant == variant).collect();
    let completion = median(pick.iter().map(|r| r.metrics.completion_rate).collect());
    let efficiency = median(
        pick.iter()
            .map(|r| r.metrics.action_efficiency.unwrap_or(0.0))
            .collect(),
    );
    (completion, efficiency)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
