//! Seeded 2-D manipulation tasks on the unit square, with scripted experts.
//!
//! * `reach2d`: move the agent onto a goal disk.
//! * `insert2d`: slide the agent into a narrow pocket cut into a wall band.
//!   Walls stop motion; pushing hard against them is flagged unsafe.
//! * `pickplace2d`: grasp an object with the gripper channel, carry it to the
//!   goal and release it.
//!
//! Positions are in workspace units. One step moves the agent by at most
//! `MAX_STEP` per unit of action on each axis, at a nominal 10 Hz.

pub mod render;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{clip_action, ActionVector, Observation};

pub const MAX_STEP: f64 = 0.05;
pub const CONTROL_DT: f64 = 0.1;
pub const DEFAULT_HORIZON: usize = 60;
pub const DEFAULT_RANDOMIZATION: f64 = 0.1;
pub const PROPRIO_DIM: usize = 6;
pub const MAX_ACTION_DIM: usize = 3;

pub const AGENT_RADIUS: f64 = 0.02;
pub const GOAL_RADIUS: f64 = 0.04;
pub const OBJECT_RADIUS: f64 = 0.025;
pub const REACH_TOLERANCE: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.03;
pub const PLACE_TOLERANCE: f64 = 0.05;

/// Lower edge of the insert2d wall band.
pub const WALL_Y: f64 = 0.6;
/// Top of the pocket cut into the wall band.
pub const POCKET_TOP: f64 = 0.7;
pub const POCKET_HALF_WIDTH: f64 = 0.035;
/// Lateral slack of the agent centre inside the pocket.
pub const SLOT_CLEARANCE: f64 = POCKET_HALF_WIDTH - AGENT_RADIUS;
/// Depth the agent centre must reach for an insertion to count.
pub const INSERT_DEPTH: f64 = 0.65;
/// Blocked action magnitude above which wall contact counts as unsafe.
pub const UNSAFE_FORCE: f64 = 0.5;

/// Proportional gain of the scripted expert.
pub const ORACLE_GAIN: f64 = 10.0;
/// The scripted expert never commands more than this action norm.
pub const ORACLE_MAX_NORM: f64 = 0.5;
const PRE_INSERT_Y: f64 = 0.52;
const ALIGN_TOLERANCE: f64 = 0.006;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Reach2d,
    Insert2d,
    Pickplace2d,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Reach2d, EnvKind::Insert2d, EnvKind::Pickplace2d];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Reach2d => "reach2d",
            EnvKind::Insert2d => "insert2d",
            EnvKind::Pickplace2d => "pickplace2d",
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::Pickplace2d => 3,
            _ => 2,
        }
    }

    /// Default number of offline demonstrations.
    pub fn default_demos(self) -> usize {
        match self {
            EnvKind::Reach2d => 20,
            _ => 30,
        }
    }

    /// Operator noise of the default demonstrations. The insertion demos
    /// are shakier, as a teleoperator's would be in a tight slot.
    pub fn default_demo_noise(self) -> f64 {
        match self {
            EnvKind::Insert2d => 0.7,
            _ => 0.3,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvKind,
    pub horizon: usize,
    pub randomization_range: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::new(EnvKind::Reach2d)
    }
}

impl EnvConfig {
    pub fn new(name: EnvKind) -> Self {
        Self {
            name,
            horizon: DEFAULT_HORIZON,
            randomization_range: DEFAULT_RANDOMIZATION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(0.0..=0.2).contains(&self.randomization_range) {
            return Err(Error::Config(format!(
                "randomization_range must lie in [0, 0.2], got {}",
                self.randomization_range
            )));
        }
        Ok(())
    }
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    /// Displacement over the last step divided by the control period.
    pub vel: [f64; 2],
    pub gripper_closed: bool,
    pub holding: bool,
    pub goal: [f64; 2],
    pub object: [f64; 2],
    pub slot_x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub success: bool,
    pub unsafe_contact: bool,
    pub steps: usize,
}

fn nominal(kind: EnvKind) -> EnvState {
    let base = EnvState {
        pos: [0.25, 0.25],
        vel: [0.0; 2],
        gripper_closed: false,
        holding: false,
        goal: [0.7, 0.7],
        object: [0.5, 0.5],
        slot_x: 0.5,
    };
    match kind {
        EnvKind::Reach2d => base,
        EnvKind::Insert2d => EnvState {
            pos: [0.5, 0.2],
            goal: [0.5, INSERT_DEPTH],
            ..base
        },
        EnvKind::Pickplace2d => EnvState {
            pos: [0.2, 0.2],
            object: [0.4, 0.6],
            goal: [0.75, 0.35],
            ..base
        },
    }
}

/// The three rectangles `(x0, x1, y0, y1)` forming the insert2d wall band.
pub fn wall_rects(slot_x: f64) -> [(f64, f64, f64, f64); 3] {
    let (l, r) = (slot_x - POCKET_HALF_WIDTH, slot_x + POCKET_HALF_WIDTH);
    [
        (0.0, l, WALL_Y, 1.0),
        (r, 1.0, WALL_Y, 1.0),
        (l, r, POCKET_TOP, 1.0),
    ]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone)]
pub struct SimEnv {
    config: EnvConfig,
    state: EnvState,
    steps: usize,
    done: bool,
}

impl SimEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            state: nominal(config.name),
            config,
            steps: 0,
            done: false,
        })
    }

    pub fn kind(&self) -> EnvKind {
        self.config.name
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.kind().action_dim()
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Replaces the state and restarts the step counter.
    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.config.randomization_range;
        let mut jitter = |p: [f64; 2]| -> [f64; 2] {
            let dx: f64 = rng.random_range(-1.0..=1.0);
            let dy: f64 = rng.random_range(-1.0..=1.0);
            [p[0] + r * dx, p[1] + r * dy]
        };
        let mut s = nominal(self.kind());
        s.pos = jitter(s.pos);
        match self.kind() {
            EnvKind::Reach2d => s.goal = jitter(s.goal),
            EnvKind::Insert2d => {
                s.slot_x = jitter([s.slot_x, 0.0])[0];
                s.goal = [s.slot_x, INSERT_DEPTH];
            }
            EnvKind::Pickplace2d => {
                s.object = jitter(s.object);
                s.goal = jitter(s.goal);
            }
        }
        self.set_state(s);
        self.observe()
    }

    pub fn is_success(&self) -> bool {
        let s = &self.state;
        match self.kind() {
            EnvKind::Reach2d => dist(s.pos, s.goal) < REACH_TOLERANCE,
            EnvKind::Insert2d => (s.pos[0] - s.slot_x).abs() <= SLOT_CLEARANCE && s.pos[1] >= INSERT_DEPTH,
            EnvKind::Pickplace2d => !s.holding && dist(s.object, s.goal) < PLACE_TOLERANCE,
        }
    }

    /// Largest reachable agent-centre coordinate along y at lateral
    /// position `x` (insert2d walls).
    fn y_limit(&self, x: f64) -> f64 {
        if (x - self.state.slot_x).abs() <= SLOT_CLEARANCE {
            POCKET_TOP - AGENT_RADIUS
        } else {
            WALL_Y - AGENT_RADIUS
        }
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<(Observation, bool, StepInfo)> {
        if self.done {
            return Err(Error::EpisodeFinished { steps: self.steps });
        }
        let a = clip_action(action, self.action_dim())?;
        let a = a.as_slice();
        let old = self.state.pos;
        let raw = [old[0] + MAX_STEP * a[0], old[1] + MAX_STEP * a[1]];
        let want = [raw[0].clamp(0.0, 1.0), raw[1].clamp(0.0, 1.0)];
        let new = if self.kind() == EnvKind::Insert2d {
            // x first, then y, each stopped at the wall
            let mut x = want[0];
            if old[1] > WALL_Y - AGENT_RADIUS {
                let s = self.state.slot_x;
                x = x.clamp(s - SLOT_CLEARANCE, s + SLOT_CLEARANCE);
            }
            let y = want[1].min(self.y_limit(x).max(old[1]));
            [x, y]
        } else {
            want
        };
        // pushing into a wall or the workspace limit
        let blocked = [(raw[0] - new[0]) / MAX_STEP, (raw[1] - new[1]) / MAX_STEP];
        let unsafe_contact = (blocked[0].powi(2) + blocked[1].powi(2)).sqrt() > UNSAFE_FORCE;

        if self.kind() == EnvKind::Pickplace2d {
            let close = a[2] > 0.0;
            if close && !self.state.gripper_closed && dist(old, self.state.object) <= GRASP_RADIUS {
                self.state.holding = true;
            }
            if !close {
                self.state.holding = false;
            }
            self.state.gripper_closed = close;
        }
        self.state.pos = new;
        self.state.vel = [(new[0] - old[0]) / CONTROL_DT, (new[1] - old[1]) / CONTROL_DT];
        if self.state.holding {
            self.state.object = new;
        }
        self.steps += 1;
        let success = self.is_success();
        self.done = success || self.steps >= self.config.horizon;
        let info = StepInfo {
            success,
            unsafe_contact,
            steps: self.steps,
        };
        Ok((self.observe(), self.done, info))
    }

    /// Position the scripted expert currently steers towards.
    fn waypoint(&self) -> [f64; 2] {
        let s = &self.state;
        match self.kind() {
            EnvKind::Reach2d => s.goal,
            EnvKind::Insert2d => {
                let depth = POCKET_TOP - AGENT_RADIUS - 0.005;
                let in_pocket = s.pos[1] > WALL_Y - AGENT_RADIUS;
                if in_pocket || (s.pos[0] - s.slot_x).abs() <= ALIGN_TOLERANCE {
                    [s.slot_x, depth]
                } else if s.pos[1] >= PRE_INSERT_Y - 0.01 {
                    // realign in place below the wall
                    [s.slot_x, s.pos[1]]
                } else {
                    [s.slot_x, PRE_INSERT_Y]
                }
            }
            EnvKind::Pickplace2d => {
                if s.holding {
                    s.goal
                } else {
                    s.object
                }
            }
        }
    }

    /// Scripted expert: capped proportional control towards the current
    /// waypoint plus Gaussian noise of standard deviation `noise_scale`,
    /// clipped to the action box.
    pub fn oracle_action<R: Rng + ?Sized>(&self, noise_scale: f64, rng: &mut R) -> ActionVector {
        let s = &self.state;
        let target = self.waypoint();
        let mut v = [ORACLE_GAIN * (target[0] - s.pos[0]), ORACLE_GAIN * (target[1] - s.pos[1])];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if n > ORACLE_MAX_NORM {
            v = [v[0] * ORACLE_MAX_NORM / n, v[1] * ORACLE_MAX_NORM / n];
        }
        let mut a = vec![v[0], v[1]];
        if self.kind() == EnvKind::Pickplace2d {
            let grip = if s.holding {
                if dist(s.pos, s.goal) <= 0.02 {
                    a[0] = 0.0;
                    a[1] = 0.0;
                    -1.0
                } else {
                    1.0
                }
            } else if dist(s.pos, s.object) <= 0.01 {
                // stop and close; reopen first if the gripper is shut
                a[0] = 0.0;
                a[1] = 0.0;
                if s.gripper_closed {
                    -1.0
                } else {
                    1.0
                }
            } else {
                -1.0
            };
            a.push(grip);
        }
        if noise_scale > 0.0 {
            for v in &mut a {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise_scale * z;
            }
        }
        ActionVector(a.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    /// Distance still to cover along the expert's path; used for progress
    /// tracking.
    pub fn task_distance(&self) -> f64 {
        let s = &self.state;
        match self.kind() {
            EnvKind::Reach2d => dist(s.pos, s.goal),
            EnvKind::Insert2d => {
                let depth = POCKET_TOP - AGENT_RADIUS;
                if s.pos[1] > WALL_Y - AGENT_RADIUS {
                    depth - s.pos[1]
                } else {
                    dist(s.pos, [s.slot_x, PRE_INSERT_Y]) + depth - PRE_INSERT_Y
                }
            }
            EnvKind::Pickplace2d => {
                if s.holding {
                    dist(s.pos, s.goal)
                } else {
                    dist(s.pos, s.object) + dist(s.object, s.goal)
                }
            }
        }
    }

    pub fn proprio(&self) -> Vec<f64> {
        let s = &self.state;
        vec![
            s.pos[0],
            s.pos[1],
            s.vel[0],
            s.vel[1],
            if s.gripper_closed { 1.0 } else { 0.0 },
            if s.holding { 1.0 } else { 0.0 },
        ]
    }

    /// Side view and wrist view.
    pub fn render(&self) -> Vec<crate::types::Image> {
        vec![
            render::side_view(self.kind(), &self.state),
            render::wrist_view(self.kind(), &self.state),
        ]
    }

    pub fn observe(&self) -> Observation {
        Observation {
            images: self.render(),
            proprio: self.proprio(),
        }
    }
}

/// Uniform random action in the box.
pub fn random_action<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> ActionVector {
    ActionVector((0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(kind: EnvKind) -> SimEnv {
        SimEnv::new(EnvConfig::new(kind)).unwrap()
    }

    fn oracle_rollout(e: &mut SimEnv, seed: u64, noise: f64) -> (bool, usize) {
        e.reset(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        loop {
            let a = e.oracle_action(noise, &mut rng);
            let (_, done, info) = e.step(&a).unwrap();
            if done {
                return (info.success, info.steps);
            }
        }
    }

    #[test]
    fn reset_is_deterministic() {
        for kind in EnvKind::ALL {
            let mut e = env(kind);
            let a = e.reset(42);
            let b = e.reset(42);
            assert_eq!(a, b);
            let c = e.reset(43);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn reset_poses_stay_in_range_box() {
        for kind in EnvKind::ALL {
            let mut e = env(kind);
            let nom = nominal(kind);
            for seed in 0..1000 {
                e.reset(seed);
                let s = e.state();
                let inside = |p: [f64; 2], q: [f64; 2]| (0..2).all(|i| (p[i] - q[i]).abs() <= 0.1 + 1e-12);
                assert!(inside(s.pos, nom.pos));
                assert!(inside(s.goal, nom.goal) || kind == EnvKind::Insert2d);
                assert!(inside(s.object, nom.object));
                assert!((s.slot_x - nom.slot_x).abs() <= 0.1 + 1e-12);
                assert_eq!(e.steps(), 0);
            }
        }
    }

    #[test]
    fn zero_randomization_gives_nominal_pose() {
        for kind in EnvKind::ALL {
            let mut cfg = EnvConfig::new(kind);
            cfg.randomization_range = 0.0;
            let mut e = SimEnv::new(cfg).unwrap();
            e.reset(9);
            assert_eq!(e.state(), &nominal(kind));
        }
    }

    #[test]
    fn reach_success_predicate() {
        let mut e = env(EnvKind::Reach2d);
        e.reset(0);
        let mut s = e.state().clone();
        s.pos = [s.goal[0] - 0.06, s.goal[1]];
        e.set_state(s);
        let (_, done, info) = e.step(&ActionVector(vec![0.4, 0.0])).unwrap();
        assert!(info.success && done);
    }

    #[test]
    fn zero_action_keeps_position() {
        for kind in EnvKind::ALL {
            let mut e = env(kind);
            e.reset(3);
            let before = e.state().pos;
            let (_, _, info) = e.step(&ActionVector::zeros(kind.action_dim())).unwrap();
            assert_eq!(e.state().pos, before);
            assert_eq!(info.steps, 1);
        }
    }

    #[test]
    fn stepping_a_finished_episode_is_rejected() {
        let mut e = env(EnvKind::Reach2d);
        e.reset(0);
        for _ in 0..DEFAULT_HORIZON {
            e.step(&ActionVector(vec![-1.0, -1.0])).unwrap();
        }
        assert!(e.is_done());
        assert!(matches!(
            e.step(&ActionVector(vec![0.0, 0.0])),
            Err(Error::EpisodeFinished { steps: 60 })
        ));
    }

    #[test]
    fn wrong_action_dimension_is_rejected() {
        let mut e = env(EnvKind::Pickplace2d);
        e.reset(0);
        assert!(matches!(
            e.step(&ActionVector(vec![0.0, 0.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn clean_oracle_solves_every_task() {
        for kind in EnvKind::ALL {
            let mut e = env(kind);
            for seed in 0..100 {
                let (ok, steps) = oracle_rollout(&mut e, seed, 0.0);
                assert!(ok, "{kind} seed {seed} failed after {steps} steps");
            }
        }
    }

    #[test]
    fn noisy_oracle_is_worse_on_insert() {
        let mut e = env(EnvKind::Insert2d);
        let clean = (0..200).filter(|&s| oracle_rollout(&mut e, s, 0.0).0).count();
        let noisy = (0..200).filter(|&s| oracle_rollout(&mut e, s, 0.3).0).count();
        assert!(noisy < clean, "noisy {noisy} vs clean {clean}");
    }

    #[test]
    fn oracle_rests_at_goal() {
        let mut e = env(EnvKind::Reach2d);
        e.reset(5);
        let mut s = e.state().clone();
        s.pos = s.goal;
        e.set_state(s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(e.oracle_action(0.0, &mut rng), ActionVector(vec![0.0, 0.0]));
    }

    #[test]
    fn oracle_respects_speed_cap() {
        let mut e = env(EnvKind::Reach2d);
        e.reset(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = e.oracle_action(0.0, &mut rng);
        let n = (a.0[0].powi(2) + a.0[1].powi(2)).sqrt();
        assert!(n <= ORACLE_MAX_NORM + 1e-12);
    }

    #[test]
    fn trajectories_are_bit_reproducible() {
        for kind in EnvKind::ALL {
            let mut e = env(kind);
            let mut run = || {
                e.reset(11);
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let mut obs = Vec::new();
                for _ in 0..20 {
                    let a = random_action(kind.action_dim(), &mut rng);
                    let (o, done, _) = e.step(&a).unwrap();
                    obs.push(o);
                    if done {
                        break;
                    }
                }
                obs
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn random_walks_stay_in_workspace_and_terminate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in EnvKind::ALL {
            let mut e = env(kind);
            for seed in 0..30 {
                e.reset(seed);
                let mut n = 0;
                loop {
                    let a = random_action(kind.action_dim(), &mut rng).0.iter().map(|v| v * 3.0).collect();
                    let (_, done, _) = e.step(&ActionVector(a)).unwrap();
                    n += 1;
                    let p = e.state().pos;
                    assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
                    if kind == EnvKind::Insert2d && p[1] > WALL_Y - AGENT_RADIUS {
                        assert!((p[0] - e.state().slot_x).abs() <= SLOT_CLEARANCE + 1e-12);
                    }
                    if done {
                        break;
                    }
                }
                assert!(n <= DEFAULT_HORIZON);
            }
        }
    }

    #[test]
    fn insert_walls_block_and_flag_unsafe() {
        let mut e = env(EnvKind::Insert2d);
        e.reset(0);
        let mut s = e.state().clone();
        s.pos = [s.slot_x + 0.2, WALL_Y - AGENT_RADIUS];
        e.set_state(s);
        let (_, _, info) = e.step(&ActionVector(vec![0.0, 1.0])).unwrap();
        assert_eq!(e.state().pos[1], WALL_Y - AGENT_RADIUS);
        assert!(info.unsafe_contact);
        let (_, _, info) = e.step(&ActionVector(vec![0.0, 0.3])).unwrap();
        assert!(!info.unsafe_contact);
    }

    #[test]
    fn pickplace_grasp_carry_release() {
        let mut e = env(EnvKind::Pickplace2d);
        e.reset(2);
        let mut s = e.state().clone();
        s.pos = [s.object[0] + 0.02, s.object[1]];
        e.set_state(s);
        e.step(&ActionVector(vec![0.0, 0.0, 1.0])).unwrap();
        assert!(e.state().holding);
        e.step(&ActionVector(vec![1.0, 0.0, 1.0])).unwrap();
        assert_eq!(e.state().object, e.state().pos);
        e.step(&ActionVector(vec![0.0, 0.0, -1.0])).unwrap();
        assert!(!e.state().holding);
        let o = e.state().object;
        e.step(&ActionVector(vec![1.0, 0.0, -1.0])).unwrap();
        assert_eq!(e.state().object, o);
    }

    #[test]
    fn closing_far_from_object_grasps_nothing() {
        let mut e = env(EnvKind::Pickplace2d);
        e.reset(2);
        e.step(&ActionVector(vec![0.0, 0.0, 1.0])).unwrap();
        assert!(!e.state().holding);
    }

    #[test]
    fn rendering_is_deterministic_bounded_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in EnvKind::ALL {
            let mut e = env(kind);
            e.reset(1);
            let a = e.render();
            assert_eq!(a, e.render());
            assert_eq!(a[0].shape(), [32, 32, 3]);
            assert_eq!(a[1].shape(), [16, 16, 3]);
            assert!(a.iter().all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
            for _ in 0..50 {
                let mut s = e.state().clone();
                let p = [rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)];
                let q = [p[0] + rng.random_range(0.01..0.1), p[1]];
                s.pos = p;
                e.set_state(s.clone());
                let ra = e.render();
                s.pos = q;
                e.set_state(s);
                assert_ne!(ra[0], e.render()[0]);
            }
        }
    }
}
