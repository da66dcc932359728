//! Kinematic stand-ins for the three manipulation tasks: an abacus row of
//! four beads, a three-pronged valve, and a free object in a square arena.
//!
//! All positions are meters and angles radians. Dynamics are deterministic
//! and total on valid states.

mod render;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use render::{render, Image, IMAGE_CHANNELS, IMAGE_SIZE};

/// Rod length 22 cm, centered on the origin.
pub const ROD_HALF_LENGTH: f64 = 0.11;
pub const BEAD_DIAMETER: f64 = 0.035;
/// Largest bead-center coordinate that keeps the bead on the rod.
pub const BEAD_LIMIT: f64 = ROD_HALF_LENGTH - BEAD_DIAMETER / 2.0;
/// Distance the pusher keeps from a bead center while pushing it.
pub const PUSHER_GAP: f64 = 0.005;
pub const PUSHER_STEP: f64 = 0.01;
pub const VALVE_STEP: f64 = 0.15;
pub const OBJECT_XY_STEP: f64 = 0.01;
pub const OBJECT_TURN_STEP: f64 = 0.1;
/// The arena is a 30 cm × 30 cm box centered on the origin.
pub const BOX_HALF: f64 = 0.15;
/// Clamp applied to distances before taking logarithms.
pub const LOG_EPS: f64 = 1e-3;

pub const VALVE_SUCCESS_RAD: f64 = 15.0 * PI / 180.0;
pub const BEAD_SUCCESS_M: f64 = 0.02;
pub const POSE_SUCCESS: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Beads,
    Valve,
    Reposition,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Beads, TaskId::Valve, TaskId::Reposition];

    pub fn action_dim(self) -> usize {
        match self {
            TaskId::Beads | TaskId::Valve => 2,
            TaskId::Reposition => 3,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            TaskId::Beads => 4,
            TaskId::Valve => 2,
            TaskId::Reposition => 4,
        }
    }

    pub fn proprio_dim(self) -> usize {
        match self {
            TaskId::Beads => 1,
            _ => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Beads => "beads",
            TaskId::Valve => "valve",
            TaskId::Reposition => "reposition",
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskId {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "beads" => Ok(TaskId::Beads),
            "valve" => Ok(TaskId::Valve),
            "reposition" => Ok(TaskId::Reposition),
            other => Err(EnvError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("operation needs task {expected}, got {got}")]
    WrongTask { expected: TaskId, got: TaskId },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Exact simulator state. Only the fields of `task` evolve; the others keep
/// their canonical values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub task: TaskId,
    /// Bead centers along the rod, ascending.
    pub beads: [f64; 4],
    pub valve_angle: f64,
    pub object: Pose,
    /// Bead-task manipulator position along the rod.
    pub pusher: f64,
}

const ALL_LEFT: [f64; 4] = [
    -BEAD_LIMIT,
    -BEAD_LIMIT + BEAD_DIAMETER,
    -BEAD_LIMIT + 2.0 * BEAD_DIAMETER,
    -BEAD_LIMIT + 3.0 * BEAD_DIAMETER,
];
const TWO_AND_TWO: [f64; 4] = [
    -BEAD_LIMIT,
    -BEAD_LIMIT + BEAD_DIAMETER,
    BEAD_LIMIT - BEAD_DIAMETER,
    BEAD_LIMIT,
];

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Unsigned angular distance in [0, π].
pub fn angle_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

impl EnvState {
    /// Deterministic start: beads packed left, valve at 0, object in a corner.
    pub fn canonical(task: TaskId) -> Self {
        Self {
            task,
            beads: ALL_LEFT,
            valve_angle: 0.0,
            object: Pose {
                x: -0.12,
                y: -0.12,
                theta: PI / 2.0,
            },
            pusher: 0.05,
        }
    }

    /// The fixed goal configuration of each task. Fields belonging to the
    /// other tasks keep their canonical values.
    pub fn goal(task: TaskId) -> Self {
        match task {
            TaskId::Beads => Self::with_beads(task, TWO_AND_TWO, 0.0),
            TaskId::Valve => Self::with_valve(PI),
            TaskId::Reposition => Self::with_pose(0.0, 0.0, -PI / 2.0),
        }
    }

    pub fn with_beads(task: TaskId, beads: [f64; 4], pusher: f64) -> Self {
        Self {
            beads,
            pusher,
            ..Self::canonical(task)
        }
    }

    pub fn with_valve(angle: f64) -> Self {
        Self {
            valve_angle: angle,
            ..Self::canonical(TaskId::Valve)
        }
    }

    pub fn with_pose(x: f64, y: f64, theta: f64) -> Self {
        Self {
            object: Pose { x, y, theta },
            ..Self::canonical(TaskId::Reposition)
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let tol = 1e-9;
        for (i, b) in self.beads.iter().enumerate() {
            if !b.is_finite() || b.abs() > BEAD_LIMIT + tol {
                return Err(EnvError::InvalidState(format!("bead {i} at {b} is off the rod")));
            }
        }
        for i in 1..4 {
            let sep = self.beads[i] - self.beads[i - 1];
            if sep < BEAD_DIAMETER - tol {
                return Err(EnvError::InvalidState(format!(
                    "beads {} and {} separated by {sep:.4} m < {BEAD_DIAMETER} m",
                    i - 1,
                    i
                )));
            }
        }
        if !self.pusher.is_finite() || self.pusher.abs() > ROD_HALF_LENGTH + tol {
            return Err(EnvError::InvalidState(format!("pusher at {} is off the rod", self.pusher)));
        }
        let a = self.valve_angle;
        if !a.is_finite() || a <= -PI || a > PI {
            return Err(EnvError::InvalidState(format!("valve angle {a} outside (-pi, pi]")));
        }
        let o = self.object;
        if !(o.x.is_finite() && o.y.is_finite()) || o.x.abs() > BOX_HALF + tol || o.y.abs() > BOX_HALF + tol {
            return Err(EnvError::InvalidState(format!("object at ({}, {}) outside the box", o.x, o.y)));
        }
        if !o.theta.is_finite() || o.theta <= -PI || o.theta > PI {
            return Err(EnvError::InvalidState(format!("object angle {} outside (-pi, pi]", o.theta)));
        }
        Ok(())
    }
}

/// Returns `init` after validation, or the canonical start state.
///
/// The seed is accepted for interface symmetry; the canonical start does not
/// depend on it.
pub fn env_init(task: TaskId, _seed: u64, init: Option<EnvState>) -> Result<EnvState, EnvError> {
    match init {
        Some(s) => {
            if s.task != task {
                return Err(EnvError::WrongTask {
                    expected: task,
                    got: s.task,
                });
            }
            s.validate()?;
            Ok(s)
        }
        None => Ok(EnvState::canonical(task)),
    }
}

fn clamp_action(v: f32) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        (v as f64).clamp(-1.0, 1.0)
    }
}

/// Advances one control step. Every action component is clamped to [−1, 1].
///
/// # Panics
/// If `action` does not have the task's action dimension.
pub fn env_step(state: &EnvState, action: &[f32]) -> EnvState {
    assert_eq!(action.len(), state.task.action_dim(), "action dimension for {}", state.task);
    let a: Vec<f64> = action.iter().copied().map(clamp_action).collect();
    let mut s = *state;
    match state.task {
        TaskId::Beads => {
            let (pusher, beads) = push_beads(s.pusher, s.beads, a[0] * PUSHER_STEP, a[1] > 0.0);
            s.pusher = pusher;
            s.beads = beads;
        }
        TaskId::Valve => {
            if a[0] > 0.0 {
                s.valve_angle = wrap_angle(s.valve_angle + a[1] * VALVE_STEP);
            }
        }
        TaskId::Reposition => {
            s.object.x = (s.object.x + a[0] * OBJECT_XY_STEP).clamp(-BOX_HALF, BOX_HALF);
            s.object.y = (s.object.y + a[1] * OBJECT_XY_STEP).clamp(-BOX_HALF, BOX_HALF);
            s.object.theta = wrap_angle(s.object.theta + a[2] * OBJECT_TURN_STEP);
        }
    }
    s
}

/// Moves the pusher by `delta`. When engaged, beads at or ahead of the pusher
/// in the direction of motion are shoved along, chaining through contacts,
/// and everything stops at the rod ends. A disengaged pusher hovers freely.
fn push_beads(pusher: f64, mut beads: [f64; 4], delta: f64, engaged: bool) -> (f64, [f64; 4]) {
    let target = (pusher + delta).clamp(-ROD_HALF_LENGTH, ROD_HALF_LENGTH);
    if !engaged || target == pusher {
        return (target, beads);
    }
    if target > pusher {
        let Some(first) = beads.iter().position(|&b| b >= pusher) else {
            return (target, beads);
        };
        let mut frontier = target + PUSHER_GAP;
        for b in beads.iter_mut().skip(first) {
            *b = b.max(frontier);
            frontier = *b + BEAD_DIAMETER;
        }
        let mut limit = BEAD_LIMIT;
        for b in beads.iter_mut().skip(first).rev() {
            *b = b.min(limit);
            limit = *b - BEAD_DIAMETER;
        }
        (target.min(beads[first] - PUSHER_GAP), beads)
    } else {
        let Some(first) = beads.iter().rposition(|&b| b <= pusher) else {
            return (target, beads);
        };
        let mut frontier = target - PUSHER_GAP;
        for b in beads[..=first].iter_mut().rev() {
            *b = b.min(frontier);
            frontier = *b - BEAD_DIAMETER;
        }
        let mut limit = -BEAD_LIMIT;
        for b in beads[..=first].iter_mut() {
            *b = b.max(limit);
            limit = *b + BEAD_DIAMETER;
        }
        (target.max(beads[first] + PUSHER_GAP), beads)
    }
}

/// Object translation and wrapped rotation error to the goal.
fn pose_errors(state: &EnvState, goal: &EnvState) -> (f64, f64) {
    let dx = state.object.x - goal.object.x;
    let dy = state.object.y - goal.object.y;
    (dx.hypot(dy), angle_distance(state.object.theta, goal.object.theta))
}

/// Hand-specified reward from exact state. Log distances are clamped below
/// at [`LOG_EPS`].
pub fn true_reward(task: TaskId, state: &EnvState, goal: &EnvState) -> f64 {
    match task {
        TaskId::Valve => -angle_distance(state.valve_angle, goal.valve_angle).max(LOG_EPS).ln(),
        TaskId::Reposition => {
            let (dxy, dth) = pose_errors(state, goal);
            -2.0 * dxy.max(LOG_EPS).ln() - dth.max(LOG_EPS).ln()
        }
        TaskId::Beads => -mean_bead_distance(state, goal),
    }
}

pub fn mean_bead_distance(state: &EnvState, goal: &EnvState) -> f64 {
    state
        .beads
        .iter()
        .zip(&goal.beads)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 4.0
}

/// Normalized repositioning error: `‖Δxy‖ / 0.25 m + |Δθ| / π`.
pub fn pose_distance(state: &EnvState, goal: &EnvState) -> Result<f64, EnvError> {
    if state.task != TaskId::Reposition {
        return Err(EnvError::WrongTask {
            expected: TaskId::Reposition,
            got: state.task,
        });
    }
    let (dxy, dth) = pose_errors(state, goal);
    Ok(dxy / 0.25 + dth / PI)
}

pub fn success(task: TaskId, state: &EnvState, goal: &EnvState) -> bool {
    match task {
        TaskId::Valve => angle_distance(state.valve_angle, goal.valve_angle) <= VALVE_SUCCESS_RAD,
        TaskId::Beads => state
            .beads
            .iter()
            .zip(&goal.beads)
            .all(|(a, b)| (a - b).abs() <= BEAD_SUCCESS_M),
        TaskId::Reposition => {
            let (dxy, dth) = pose_errors(state, goal);
            dxy / 0.25 + dth / PI < POSE_SUCCESS
        }
    }
}

/// Task progress metric reported in logs and evaluations: angle error (rad)
/// for the valve, mean bead distance (m) for beads, pose distance for the
/// object. Lower is better.
pub fn task_metric(task: TaskId, state: &EnvState, goal: &EnvState) -> f64 {
    match task {
        TaskId::Valve => angle_distance(state.valve_angle, goal.valve_angle),
        TaskId::Beads => mean_bead_distance(state, goal),
        TaskId::Reposition => {
            let (dxy, dth) = pose_errors(state, goal);
            dxy / 0.25 + dth / PI
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub task: TaskId,
    /// Evaluation start states; the first is the goal configuration.
    pub inits: Vec<EnvState>,
}

pub fn eval_grid(task: TaskId) -> EvalGrid {
    let inits = match task {
        TaskId::Valve => {
            let goal = EnvState::goal(task).valve_angle;
            (0..8)
                .map(|k| EnvState::with_valve(wrap_angle(goal + k as f64 * PI / 4.0)))
                .collect()
        }
        TaskId::Beads => {
            let l = BEAD_LIMIT;
            let d = BEAD_DIAMETER;
            let configs: [[f64; 4]; 8] = [
                TWO_AND_TWO,
                ALL_LEFT,
                [l - 3.0 * d, l - 2.0 * d, l - d, l],
                [-l, -l + d, -l + 2.0 * d, l],
                [-l, l - 2.0 * d, l - d, l],
                [-1.5 * d, -0.5 * d, 0.5 * d, 1.5 * d],
                [-l, -0.0225, 0.0225, l],
                [-l, -0.0375, 0.0125, 0.0675],
            ];
            configs
                .iter()
                .map(|&b| EnvState::with_beads(task, b, 0.0))
                .collect()
        }
        TaskId::Reposition => {
            let goal = EnvState::goal(task).object;
            let mut v = vec![EnvState::with_pose(goal.x, goal.y, goal.theta)];
            let centers = [(0.0, 0.0), (-0.1, -0.1), (0.1, -0.1), (-0.1, 0.1), (0.1, 0.1)];
            for (x, y) in centers {
                for theta in [-PI / 2.0, 0.0, PI / 2.0] {
                    let s = EnvState::with_pose(x, y, theta);
                    if s != v[0] {
                        v.push(s);
                    }
                }
            }
            v
        }
    };
    EvalGrid { task, inits }
}

/// Uniform sample over valid states of `task`.
pub fn sample_random_state<R: Rng + ?Sized>(task: TaskId, rng: &mut R) -> EnvState {
    match task {
        TaskId::Beads => {
            let beads = loop {
                let mut b: [f64; 4] = std::array::from_fn(|_| rng.random_range(-BEAD_LIMIT..=BEAD_LIMIT));
                b.sort_by(f64::total_cmp);
                if b.windows(2).all(|w| w[1] - w[0] >= BEAD_DIAMETER) {
                    break b;
                }
            };
            let pusher = rng.random_range(-ROD_HALF_LENGTH..=ROD_HALF_LENGTH);
            EnvState::with_beads(task, beads, pusher)
        }
        TaskId::Valve => EnvState::with_valve(wrap_angle(rng.random_range(-PI..PI))),
        TaskId::Reposition => EnvState::with_pose(
            rng.random_range(-BOX_HALF..=BOX_HALF),
            rng.random_range(-BOX_HALF..=BOX_HALF),
            wrap_angle(rng.random_range(-PI..PI)),
        ),
    }
}

/// Which observation channels the agent sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    State,
    Image,
}

/// What the agent perceives of a state.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mode: ObsMode,
    /// Normalized low-dimensional state (always filled, used in `State` mode).
    pub state_vec: Vec<f32>,
    /// Rendered camera frame, present iff `mode == Image`.
    pub image: Option<Image>,
    /// Manipulator position for beads, empty otherwise.
    pub proprio: Vec<f32>,
}

impl Observation {
    /// The observation's input vector for networks without an image trunk:
    /// state followed by proprioception.
    pub fn state_input(&self) -> Vec<f32> {
        let mut v = self.state_vec.clone();
        v.extend_from_slice(&self.proprio);
        v
    }
}

pub fn state_vector(state: &EnvState) -> Vec<f32> {
    match state.task {
        TaskId::Beads => state.beads.iter().map(|b| (b / ROD_HALF_LENGTH) as f32).collect(),
        TaskId::Valve => vec![state.valve_angle.cos() as f32, state.valve_angle.sin() as f32],
        TaskId::Reposition => vec![
            (state.object.x / BOX_HALF) as f32,
            (state.object.y / BOX_HALF) as f32,
            state.object.theta.cos() as f32,
            state.object.theta.sin() as f32,
        ],
    }
}

pub fn observe(state: &EnvState, mode: ObsMode) -> Observation {
    Observation {
        mode,
        state_vec: state_vector(state),
        image: (mode == ObsMode::Image).then(|| render(state)),
        proprio: match state.task {
            TaskId::Beads => vec![(state.pusher / ROD_HALF_LENGTH) as f32],
            _ => vec![],
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalSample {
    pub state: EnvState,
    pub observation: Observation,
}

/// Draws `n` states uniformly from the success region around the task goal
/// and renders them. `width` in [0, 1] shrinks the region; 0 yields exact
/// copies of the goal.
pub fn goal_examples<R: Rng + ?Sized>(
    task: TaskId,
    goal: &EnvState,
    n: usize,
    width: f64,
    mode: ObsMode,
    rng: &mut R,
) -> Vec<GoalSample> {
    let w = width.clamp(0.0, 1.0);
    (0..n)
        .map(|_| {
            let state = sample_success_state(task, goal, w, rng);
            debug_assert!(success(task, &state, goal));
            GoalSample {
                observation: observe(&state, mode),
                state,
            }
        })
        .collect()
}

fn sample_success_state<R: Rng + ?Sized>(task: TaskId, goal: &EnvState, w: f64, rng: &mut R) -> EnvState {
    if w == 0.0 {
        return *goal;
    }
    loop {
        let s = match task {
            TaskId::Valve => {
                let r = VALVE_SUCCESS_RAD * w;
                EnvState {
                    valve_angle: wrap_angle(goal.valve_angle + rng.random_range(-r..=r)),
                    ..*goal
                }
            }
            TaskId::Beads => {
                let r = BEAD_SUCCESS_M * w;
                let beads = std::array::from_fn(|i| goal.beads[i] + rng.random_range(-r..=r));
                EnvState {
                    beads,
                    pusher: rng.random_range(-ROD_HALF_LENGTH..=ROD_HALF_LENGTH),
                    ..*goal
                }
            }
            TaskId::Reposition => {
                let rxy = 0.25 * POSE_SUCCESS * w;
                let rth = PI * POSE_SUCCESS * w;
                let o = goal.object;
                EnvState {
                    object: Pose {
                        x: (o.x + rng.random_range(-rxy..=rxy)).clamp(-BOX_HALF, BOX_HALF),
                        y: (o.y + rng.random_range(-rxy..=rxy)).clamp(-BOX_HALF, BOX_HALF),
                        theta: wrap_angle(o.theta + rng.random_range(-rth..=rth)),
                    },
                    ..*goal
                }
            }
        };
        let inside = match task {
            TaskId::Reposition => task_metric(task, &s, goal) < POSE_SUCCESS * w,
            _ => success(task, &s, goal),
        };
        if inside && s.validate().is_ok() {
            return s;
        }
    }
}

/// The three two-state reset schedules used by the reset-controller baseline
/// on the repositioning task. The first state of each is the goal.
pub fn reset_state_choices() -> [[EnvState; 2]; 3] {
    let goal = EnvState::goal(TaskId::Reposition);
    [
        [goal, EnvState::with_pose(0.05, 0.05, PI / 2.0)],
        [goal, EnvState::with_pose(0.0, 0.0, -PI / 6.0)],
        [goal, EnvState::with_pose(-0.04, -0.04, -PI / 2.0)],
    ]
}
