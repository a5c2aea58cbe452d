//! Deterministic grid manipulation environment.
//!
//! Blocks live in per-cell stacks on a `width × height` grid. Three primitives
//! act on the grid: a push slides a whole stack along a rotation direction, a
//! pick lifts the top block of a stack, and a place drops the held block on a
//! cell. The environment has no randomness outside of [`reset`], so a seed and
//! an action sequence fully determine every [`StepResult`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of observation channels: occupancy, normalized height, holding flag.
pub const OBS_CHANNELS: usize = 3;

/// Motion primitive type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Push,
    Pick,
    Place,
}

impl Primitive {
    /// All primitives in canonical order. Tie-breaking and channel layout follow this order.
    pub const ALL: [Primitive; 3] = [Primitive::Push, Primitive::Pick, Primitive::Place];

    pub fn index(self) -> usize {
        match self {
            Primitive::Push => 0,
            Primitive::Pick => 1,
            Primitive::Place => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Push => "push",
            Primitive::Pick => "pick",
            Primitive::Place => "place",
        }
    }

    pub fn parse(s: &str) -> Option<Primitive> {
        match s.to_ascii_lowercase().as_str() {
            "push" => Some(Primitive::Push),
            "pick" => Some(Primitive::Pick),
            "place" => Some(Primitive::Place),
            _ => None,
        }
    }
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ClutterRemoval,
    BlockStacking,
    ScriptedArrangement,
}

/// Task definition. Grid size, block count and termination limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub width: usize,
    pub height: usize,
    pub n_blocks: usize,
    /// Only meaningful for [`TaskKind::BlockStacking`].
    pub goal_stack_height: usize,
    /// Defaults to push+pick for removal tasks and pick+place for stacking.
    pub allowed_primitives: Option<Vec<Primitive>>,
    /// Episode horizon; defaults to `8 * n_blocks`.
    pub max_steps: Option<usize>,
    pub push_distance: usize,
    pub fail_limit: usize,
    /// Number of discrete gripper orientations.
    pub rotations: usize,
    /// Text grid for [`TaskKind::ScriptedArrangement`]: one row per line, digits are stack
    /// heights, `.` or `0` is an empty cell.
    pub arrangement: Option<String>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::BlockStacking,
            width: 14,
            height: 14,
            n_blocks: 10,
            goal_stack_height: 4,
            allowed_primitives: None,
            max_steps: None,
            push_distance: 2,
            fail_limit: 10,
            rotations: 4,
            arrangement: None,
        }
    }
}

impl TaskConfig {
    pub fn clutter(width: usize, height: usize, n_blocks: usize) -> Self {
        TaskConfig {
            kind: TaskKind::ClutterRemoval,
            width,
            height,
            n_blocks,
            ..Default::default()
        }
    }

    pub fn stacking(width: usize, height: usize, n_blocks: usize, goal: usize) -> Self {
        TaskConfig {
            kind: TaskKind::BlockStacking,
            width,
            height,
            n_blocks,
            goal_stack_height: goal,
            ..Default::default()
        }
    }

    pub fn scripted(arrangement: &str) -> Result<Self> {
        let layout = Arrangement::parse(arrangement)?;
        Ok(TaskConfig {
            kind: TaskKind::ScriptedArrangement,
            width: layout.width,
            height: layout.height,
            n_blocks: layout.total_blocks(),
            arrangement: Some(arrangement.to_string()),
            ..Default::default()
        })
    }

    pub fn allowed(&self) -> Vec<Primitive> {
        match &self.allowed_primitives {
            Some(list) => {
                let mut v = list.clone();
                v.sort();
                v.dedup();
                v
            }
            None => match self.kind {
                TaskKind::BlockStacking => vec![Primitive::Pick, Primitive::Place],
                _ => vec![Primitive::Push, Primitive::Pick],
            },
        }
    }

    pub fn is_allowed(&self, p: Primitive) -> bool {
        self.allowed().contains(&p)
    }

    pub fn horizon(&self) -> usize {
        self.max_steps.unwrap_or(8 * self.n_blocks)
    }

    /// Minimal number of actions that completes the task in this simulator.
    pub fn ideal_actions(&self) -> usize {
        match self.kind {
            TaskKind::BlockStacking => 2 * (self.goal_stack_height - 1),
            _ => self.n_blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("task grid dimensions must be positive"));
        }
        if self.rotations == 0 || self.rotations > 18 {
            return Err(Error::config(format!(
                "task.rotations must be in [1, 18], got {}",
                self.rotations
            )));
        }
        let allowed = self.allowed();
        if allowed.is_empty() {
            return Err(Error::config("task.allowed_primitives must be nonempty"));
        }
        if self.fail_limit == 0 {
            return Err(Error::config("task.fail_limit must be positive"));
        }
        match self.kind {
            TaskKind::BlockStacking => {
                if self.goal_stack_height < 2 || self.goal_stack_height > self.n_blocks {
                    return Err(Error::config(format!(
                        "task.goal_stack_height must be in [2, n_blocks={}], got {}",
                        self.n_blocks, self.goal_stack_height
                    )));
                }
                if !allowed.contains(&Primitive::Pick) || !allowed.contains(&Primitive::Place) {
                    return Err(Error::config("block stacking requires pick and place"));
                }
            }
            TaskKind::ClutterRemoval => {
                if self.n_blocks == 0 {
                    return Err(Error::config("task.n_blocks must be positive"));
                }
                if allowed.contains(&Primitive::Place) {
                    return Err(Error::config("place is not available in removal tasks"));
                }
            }
            TaskKind::ScriptedArrangement => {
                let text = self.arrangement.as_deref().ok_or_else(|| {
                    Error::config("scripted_arrangement requires task.arrangement")
                })?;
                let layout = Arrangement::parse(text)?;
                if layout.width != self.width
                    || layout.height != self.height
                    || layout.total_blocks() != self.n_blocks
                {
                    return Err(Error::config(format!(
                        "arrangement is {}x{} with {} blocks but task says {}x{} with {}",
                        layout.width,
                        layout.height,
                        layout.total_blocks(),
                        self.width,
                        self.height,
                        self.n_blocks
                    )));
                }
                if allowed.contains(&Primitive::Place) {
                    return Err(Error::config("place is not available in removal tasks"));
                }
            }
        }
        if self.kind != TaskKind::ScriptedArrangement && self.n_blocks > self.width * self.height {
            return Err(Error::config(format!(
                "a {}x{} grid cannot hold {} blocks",
                self.width, self.height, self.n_blocks
            )));
        }
        Ok(())
    }
}

/// Parsed scripted arrangement: per-cell initial stack heights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arrangement {
    pub width: usize,
    pub height: usize,
    pub heights: Vec<u32>,
}

impl Arrangement {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(Error::config("arrangement is empty"));
        }
        let width = rows[0].chars().count();
        let mut heights = Vec::with_capacity(width * rows.len());
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::config(format!(
                    "arrangement row {y} has {} cells, expected {width}",
                    row.chars().count()
                )));
            }
            for ch in row.chars() {
                let h = match ch {
                    '.' => 0,
                    d if d.is_ascii_digit() => d.to_digit(10).unwrap(),
                    other => {
                        return Err(Error::config(format!(
                            "invalid arrangement character {other:?} in row {y}"
                        )))
                    }
                };
                heights.push(h);
            }
        }
        Ok(Arrangement {
            width,
            height: rows.len(),
            heights,
        })
    }

    pub fn total_blocks(&self) -> usize {
        self.heights.iter().map(|&h| h as usize).sum()
    }
}

/// Grid multi-channel snapshot, layout `[channel][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn channels(&self) -> usize {
        OBS_CHANNELS
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// A primitive plus its pose on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub primitive: Primitive,
    pub x: usize,
    pub y: usize,
    pub theta_index: usize,
    /// Q prediction at the chosen entry when the action was selected.
    pub q_value: f64,
}

impl Action {
    pub fn new(primitive: Primitive, x: usize, y: usize, theta_index: usize) -> Self {
        Action {
            primitive,
            x,
            y,
            theta_index,
            q_value: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Goal,
    FailStreak,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    /// Sub-task indicator: the primitive achieved its local goal.
    pub success: bool,
    pub progress: f64,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

impl StepResult {
    pub fn indicator(&self) -> f64 {
        if self.success {
            1.0
        } else {
            0.0
        }
    }
}

/// Authoritative simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    pub width: usize,
    pub height: usize,
    /// Stacks indexed `y * width + x`, block ids bottom to top.
    cells: Vec<Vec<u32>>,
    pub gripper: Option<u32>,
    pub step_count: usize,
    pub failure_streak: usize,
    pub rng_seed: u64,
    /// Blocks that left the scene (removal tasks).
    pub removed: usize,
    pub n_blocks: usize,
    task: TaskConfig,
}

/// Unit step on the grid for a rotation index; `y` grows downward.
pub fn direction(theta_index: usize, rotations: usize) -> (i64, i64) {
    let angle = std::f64::consts::TAU * theta_index as f64 / rotations as f64;
    (angle.cos().round() as i64, angle.sin().round() as i64)
}

/// Orientation in radians for a rotation index.
pub fn theta_radians(theta_index: usize, rotations: usize) -> f64 {
    std::f64::consts::TAU * theta_index as f64 / rotations as f64
}

/// Places blocks for a new episode and renders the first observation.
pub fn reset(task: &TaskConfig, seed: u64) -> Result<(Workspace, Observation)> {
    task.validate()?;
    let cells = match task.kind {
        TaskKind::ScriptedArrangement => {
            let layout = Arrangement::parse(task.arrangement.as_deref().unwrap_or_default())?;
            let mut next_id = 0u32;
            layout
                .heights
                .iter()
                .map(|&h| {
                    let stack: Vec<u32> = (next_id..next_id + h).collect();
                    next_id += h;
                    stack
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cells = vec![Vec::new(); task.width * task.height];
            let picks = rand::seq::index::sample(&mut rng, task.width * task.height, task.n_blocks);
            for (id, cell) in picks.into_iter().enumerate() {
                cells[cell].push(id as u32);
            }
            cells
        }
    };
    let ws = Workspace {
        width: task.width,
        height: task.height,
        cells,
        gripper: None,
        step_count: 0,
        failure_streak: 0,
        rng_seed: seed,
        removed: 0,
        n_blocks: task.n_blocks,
        task: task.clone(),
    };
    let obs = render_observation(&ws);
    Ok((ws, obs))
}

impl Workspace {
    pub fn task(&self) -> &TaskConfig {
        &self.task
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn stack(&self, x: usize, y: usize) -> &[u32] {
        &self.cells[y * self.width + x]
    }

    pub fn stack_height(&self, x: usize, y: usize) -> usize {
        self.cells[y * self.width + x].len()
    }

    pub fn max_stack_height(&self) -> usize {
        self.cells.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn blocks_on_grid(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Every block id present on the grid or in the gripper, sorted.
    pub fn block_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.cells.iter().flatten().copied().collect();
        ids.extend(self.gripper);
        ids.sort_unstable();
        ids
    }

    fn set_stack(&mut self, x: usize, y: usize, stack: Vec<u32>) {
        let w = self.width;
        self.cells[y * w + x] = stack;
    }

    fn check_action(&self, a: &Action) -> Result<()> {
        if !self.task.is_allowed(a.primitive) {
            return Err(Error::contract(format!(
                "primitive {} not allowed in this task",
                a.primitive
            )));
        }
        if a.x >= self.width || a.y >= self.height {
            return Err(Error::contract(format!(
                "pose ({}, {}) outside {}x{} grid",
                a.x, a.y, self.width, self.height
            )));
        }
        if a.theta_index >= self.task.rotations {
            return Err(Error::contract(format!(
                "theta index {} >= rotation count {}",
                a.theta_index, self.task.rotations
            )));
        }
        Ok(())
    }

    fn apply_push(&mut self, a: &Action) -> bool {
        if self.stack_height(a.x, a.y) == 0 {
            return false;
        }
        let (dx, dy) = direction(a.theta_index, self.task.rotations);
        if dx == 0 && dy == 0 {
            return false;
        }
        let (mut cx, mut cy) = (a.x as i64, a.y as i64);
        for _ in 0..self.task.push_distance {
            let (nx, ny) = (cx + dx, cy + dy);
            if !self.in_bounds(nx, ny) || self.stack_height(nx as usize, ny as usize) > 0 {
                break;
            }
            cx = nx;
            cy = ny;
        }
        if (cx, cy) == (a.x as i64, a.y as i64) {
            return false;
        }
        let moved = std::mem::take(&mut self.cells[a.y * self.width + a.x]);
        self.set_stack(cx as usize, cy as usize, moved);
        true
    }

    fn apply_pick(&mut self, a: &Action) -> bool {
        if self.gripper.is_some() {
            return false;
        }
        let w = self.width;
        let Some(block) = self.cells[a.y * w + a.x].pop() else {
            return false;
        };
        match self.task.kind {
            TaskKind::BlockStacking => self.gripper = Some(block),
            _ => self.removed += 1,
        }
        true
    }

    fn apply_place(&mut self, a: &Action) -> bool {
        let Some(block) = self.gripper.take() else {
            return false;
        };
        let before_max = self.max_stack_height();
        let w = self.width;
        let stack = &mut self.cells[a.y * w + a.x];
        stack.push(block);
        stack.len() > before_max
    }
}

/// Executes one primitive. Unsuccessful primitives are not errors; only malformed poses are.
pub fn step(ws: &mut Workspace, a: &Action) -> Result<StepResult> {
    ws.check_action(a)?;
    let success = match a.primitive {
        Primitive::Push => ws.apply_push(a),
        Primitive::Pick => ws.apply_pick(a),
        Primitive::Place => ws.apply_place(a),
    };
    ws.step_count += 1;
    if success {
        ws.failure_streak = 0;
    } else {
        ws.failure_streak += 1;
    }
    let progress = task_progress(ws, &ws.task);
    let done_reason = if goal_reached(ws) {
        Some(DoneReason::Goal)
    } else if ws.failure_streak >= ws.task.fail_limit {
        Some(DoneReason::FailStreak)
    } else if ws.step_count >= ws.task.horizon() {
        Some(DoneReason::MaxSteps)
    } else {
        None
    };
    Ok(StepResult {
        observation: render_observation(ws),
        success,
        progress,
        done: done_reason.is_some(),
        done_reason,
    })
}

fn goal_reached(ws: &Workspace) -> bool {
    match ws.task.kind {
        TaskKind::BlockStacking => ws.max_stack_height() >= ws.task.goal_stack_height,
        _ => ws.removed >= ws.n_blocks,
    }
}

/// Fraction of the overall goal achieved, in `[0, 1]`.
pub fn task_progress(ws: &Workspace, task: &TaskConfig) -> f64 {
    match task.kind {
        TaskKind::BlockStacking => {
            (ws.max_stack_height() as f64 / task.goal_stack_height as f64).clamp(0.0, 1.0)
        }
        _ => {
            if ws.n_blocks == 0 {
                1.0
            } else {
                (ws.removed as f64 / ws.n_blocks as f64).clamp(0.0, 1.0)
            }
        }
    }
}

/// Poses where `primitive` could plausibly act, as a row-major `height × width` grid.
pub fn valid_action_mask(ws: &Workspace, primitive: Primitive) -> Vec<bool> {
    let (w, h) = (ws.width, ws.height);
    let occupied = |x: i64, y: i64| ws.in_bounds(x, y) && ws.stack_height(x as usize, y as usize) > 0;
    let mut mask = vec![false; w * h];
    match primitive {
        Primitive::Pick => {
            for (m, stack) in mask.iter_mut().zip(&ws.cells) {
                *m = !stack.is_empty();
            }
        }
        Primitive::Push => {
            let dirs: Vec<(i64, i64)> = (0..ws.task.rotations)
                .map(|r| direction(r, ws.task.rotations))
                .filter(|&d| d != (0, 0))
                .collect();
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if !occupied(x, y) {
                        continue;
                    }
                    mask[y as usize * w + x as usize] = dirs.iter().any(|&(dx, dy)| {
                        ws.in_bounds(x + dx, y + dy) && !occupied(x + dx, y + dy)
                    });
                }
            }
        }
        Primitive::Place => {
            if ws.gripper.is_none() {
                return mask;
            }
            const NEIGHBORS: [(i64, i64); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    mask[y as usize * w + x as usize] =
                        NEIGHBORS.iter().any(|&(dx, dy)| occupied(x + dx, y + dy));
                }
            }
        }
    }
    mask
}

/// Renders occupancy, normalized height and the gripper flag.
pub fn render_observation(ws: &Workspace) -> Observation {
    let n = ws.width * ws.height;
    let mut data = vec![0.0; OBS_CHANNELS * n];
    let norm = match ws.task.kind {
        TaskKind::BlockStacking => ws.task.goal_stack_height as f64,
        _ => ws.max_stack_height().max(1) as f64,
    };
    for (i, stack) in ws.cells.iter().enumerate() {
        if !stack.is_empty() {
            data[i] = 1.0;
            data[n + i] = (stack.len() as f64 / norm).min(1.0);
        }
    }
    if ws.gripper.is_some() {
        data[2 * n..].fill(1.0);
    }
    Observation {
        height: ws.height,
        width: ws.width,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn place_one(task: &TaskConfig, cells: &[(usize, usize, usize)]) -> Workspace {
        let (mut ws, _) = reset(task, 0).unwrap();
        ws.cells.iter_mut().for_each(Vec::clear);
        let mut id = 0;
        for &(x, y, h) in cells {
            for _ in 0..h {
                ws.cells[y * ws.width + x].push(id);
                id += 1;
            }
        }
        ws.n_blocks = id as usize;
        ws
    }

    #[test]
    fn reset_conserves_blocks() {
        let task = TaskConfig::clutter(14, 14, 10);
        let (ws, obs) = reset(&task, 7).unwrap();
        assert_eq!(obs.channel(0).iter().sum::<f64>(), 10.0);
        assert_eq!(ws.block_ids(), (0..10).collect::<Vec<_>>());
        let (_, again) = reset(&task, 7).unwrap();
        assert_eq!(obs, again);
    }

    #[test]
    fn stacking_reset_has_unit_stacks() {
        let task = TaskConfig::stacking(14, 14, 10, 4);
        let (ws, _) = reset(&task, 3).unwrap();
        assert_eq!(ws.max_stack_height(), 1);
        assert_eq!(ws.blocks_on_grid(), 10);
    }

    #[test]
    fn reset_rejects_tiny_grid() {
        let task = TaskConfig::clutter(2, 2, 5);
        assert!(reset(&task, 0).unwrap_err().is_config());
    }

    #[test]
    fn push_empty_cell_is_noop() {
        let task = TaskConfig::clutter(6, 6, 1);
        let mut ws = place_one(&task, &[(1, 1, 1)]);
        let before = ws.clone();
        let r = step(&mut ws, &Action::new(Primitive::Push, 3, 3, 0)).unwrap();
        assert!(!r.success);
        assert_eq!(ws.cells, before.cells);
        assert_eq!(ws.failure_streak, 1);
    }

    #[test]
    fn push_slides_until_blocked() {
        let task = TaskConfig::clutter(6, 1, 2);
        let mut ws = place_one(&task, &[(0, 0, 2), (2, 0, 1)]);
        // East: only one free cell before the neighbor.
        let r = step(&mut ws, &Action::new(Primitive::Push, 0, 0, 0)).unwrap();
        assert!(r.success);
        assert_eq!(ws.stack_height(1, 0), 2);
        assert_eq!(ws.stack_height(0, 0), 0);
        // West from (1,0): free for two cells? only one cell to the boundary.
        let r = step(&mut ws, &Action::new(Primitive::Push, 1, 0, 2)).unwrap();
        assert!(r.success);
        assert_eq!(ws.stack_height(0, 0), 2);
        // West again: boundary.
        let r = step(&mut ws, &Action::new(Primitive::Push, 0, 0, 2)).unwrap();
        assert!(!r.success);
    }

    #[test]
    fn push_distance_caps_travel() {
        let task = TaskConfig::clutter(8, 1, 1);
        let mut ws = place_one(&task, &[(0, 0, 1)]);
        step(&mut ws, &Action::new(Primitive::Push, 0, 0, 0)).unwrap();
        assert_eq!(ws.stack_height(2, 0), 1);
    }

    #[test]
    fn pick_from_two_stack() {
        let task = TaskConfig::stacking(6, 6, 3, 3);
        let mut ws = place_one(&task, &[(2, 2, 2), (4, 4, 1)]);
        let r = step(&mut ws, &Action::new(Primitive::Pick, 2, 2, 0)).unwrap();
        assert!(r.success);
        assert_eq!(ws.stack_height(2, 2), 1);
        assert_eq!(ws.gripper, Some(1));
        // Full gripper: no-op failure.
        let before = ws.clone();
        let r = step(&mut ws, &Action::new(Primitive::Pick, 4, 4, 0)).unwrap();
        assert!(!r.success);
        assert_eq!(ws.cells, before.cells);
    }

    #[test]
    fn scripted_place_sequence_reaches_three() {
        // Two-stack at (1,1), single at (3,3); goal 4.
        let task = TaskConfig::stacking(6, 6, 4, 4);
        let mut ws = place_one(&task, &[(1, 1, 2), (3, 3, 1)]);
        let r = step(&mut ws, &Action::new(Primitive::Pick, 3, 3, 0)).unwrap();
        assert!(r.success);
        assert_eq!(r.progress, 0.5);
        let r = step(&mut ws, &Action::new(Primitive::Place, 1, 1, 1)).unwrap();
        assert!(r.success);
        assert_eq!(r.progress, 3.0 / 4.0);
        assert_eq!(ws.stack_height(1, 1), 3);
        assert!(!r.done);
    }

    #[test]
    fn place_without_height_gain_fails_but_deposits() {
        let task = TaskConfig::stacking(6, 6, 4, 4);
        let mut ws = place_one(&task, &[(1, 1, 2), (3, 3, 1), (5, 5, 1)]);
        step(&mut ws, &Action::new(Primitive::Pick, 5, 5, 0)).unwrap();
        let r = step(&mut ws, &Action::new(Primitive::Place, 3, 3, 0)).unwrap();
        assert!(!r.success);
        assert_eq!(ws.stack_height(3, 3), 2);
        assert_eq!(ws.gripper, None);
        // Empty gripper: no-op.
        let r = step(&mut ws, &Action::new(Primitive::Place, 0, 0, 0)).unwrap();
        assert!(!r.success);
        assert_eq!(ws.stack_height(0, 0), 0);
    }

    #[test]
    fn progress_ratios() {
        let task = TaskConfig::stacking(6, 6, 4, 4);
        let ws = place_one(&task, &[(1, 1, 2), (3, 3, 1)]);
        assert_eq!(task_progress(&ws, &task), 0.5);
        let task = TaskConfig::clutter(6, 6, 2);
        let ws = place_one(&task, &[(1, 1, 1), (3, 3, 1)]);
        assert_eq!(task_progress(&ws, &task), 0.0);
    }

    #[test]
    fn clutter_clear_is_goal() {
        let task = TaskConfig::clutter(6, 6, 2);
        let mut ws = place_one(&task, &[(1, 1, 1), (3, 3, 1)]);
        let r = step(&mut ws, &Action::new(Primitive::Pick, 1, 1, 0)).unwrap();
        assert!(r.success && !r.done);
        assert!(ws.gripper.is_none());
        let r = step(&mut ws, &Action::new(Primitive::Pick, 3, 3, 0)).unwrap();
        assert_eq!(r.progress, 1.0);
        assert_eq!(r.done_reason, Some(DoneReason::Goal));
    }

    #[test]
    fn fail_streak_terminates() {
        let mut task = TaskConfig::clutter(6, 6, 1);
        task.fail_limit = 3;
        let mut ws = place_one(&task, &[(1, 1, 1)]);
        for i in 0..3 {
            let r = step(&mut ws, &Action::new(Primitive::Push, 4, 4, 0)).unwrap();
            assert_eq!(r.done, i == 2);
        }
        assert_eq!(ws.failure_streak, 3);
    }

    #[test]
    fn malformed_pose_is_contract_error() {
        let task = TaskConfig::clutter(6, 6, 1);
        let mut ws = place_one(&task, &[(1, 1, 1)]);
        assert!(matches!(
            step(&mut ws, &Action::new(Primitive::Pick, 6, 0, 0)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            step(&mut ws, &Action::new(Primitive::Pick, 0, 0, 4)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            step(&mut ws, &Action::new(Primitive::Place, 0, 0, 0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masks() {
        let task = TaskConfig::stacking(6, 6, 2, 2);
        let mut ws = place_one(&task, &[(3, 4, 1)]);
        let pick = valid_action_mask(&ws, Primitive::Pick);
        assert_eq!(pick.iter().filter(|&&b| b).count(), 1);
        assert!(pick[4 * 6 + 3]);
        assert!(valid_action_mask(&ws, Primitive::Place).iter().all(|&b| !b));
        ws.gripper = Some(1);
        let place = valid_action_mask(&ws, Primitive::Place);
        assert_eq!(place.iter().filter(|&&b| b).count(), 5);
        ws.cells.iter_mut().for_each(Vec::clear);
        assert!(valid_action_mask(&ws, Primitive::Pick).iter().all(|&b| !b));
    }

    #[test]
    fn push_mask_needs_free_neighbor() {
        let task = TaskConfig::clutter(1, 1, 1);
        let ws = place_one(&task, &[(0, 0, 1)]);
        assert!(!valid_action_mask(&ws, Primitive::Push)[0]);
        let task = TaskConfig::clutter(3, 1, 1);
        let ws = place_one(&task, &[(0, 0, 1)]);
        assert!(valid_action_mask(&ws, Primitive::Push)[0]);
    }

    #[test]
    fn observation_channels() {
        let task = TaskConfig::stacking(6, 6, 4, 4);
        let mut ws = place_one(&task, &[(2, 2, 3), (0, 0, 1)]);
        let obs = render_observation(&ws);
        assert_eq!(obs.at(1, 2, 2), 0.75);
        for (occ, h) in obs.channel(0).iter().zip(obs.channel(1)) {
            assert_eq!(*occ, if *h > 0.0 { 1.0 } else { 0.0 });
        }
        assert!(obs.channel(2).iter().all(|&v| v == 0.0));
        ws.gripper = Some(9);
        assert!(render_observation(&ws).channel(2).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scripted_arrangement_loads() {
        let task = TaskConfig::scripted("..1.\n.21.\n....").unwrap();
        let (ws, obs) = reset(&task, 0).unwrap();
        assert_eq!((ws.width, ws.height, ws.n_blocks), (4, 3, 4));
        assert_eq!(ws.stack_height(1, 1), 2);
        assert_eq!(obs.at(1, 1, 1), 1.0);
        assert_eq!(obs.at(1, 2, 1), 0.5);
        assert!(Arrangement::parse("1x\n..").is_err());
        assert!(Arrangement::parse("1.\n...").is_err());
    }

    #[test]
    fn directions_for_four_rotations() {
        let dirs: Vec<_> = (0..4).map(|r| direction(r, 4)).collect();
        assert_eq!(dirs, vec![(1, 0), (0, 1), (-1, 0), (0, -1)]);
    }

    #[test]
    fn goal_height_validation() {
        assert!(TaskConfig::stacking(6, 6, 3, 4).validate().is_err());
        assert!(TaskConfig::stacking(6, 6, 3, 1).validate().is_err());
        let mut t = TaskConfig::clutter(6, 6, 3);
        t.allowed_primitives = Some(vec![]);
        assert!(t.validate().is_err());
    }
}
