use serde::{Deserialize, Serialize};

use super::kinematics::{contact_torque, forward_kinematics, inverse_kinematics, wrap_angle};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const EPISODE_STEPS: usize = 60;
pub const MAX_JOINT_STEP: f64 = 0.1;
pub const MAX_APERTURE_STEP: f64 = 0.1;
pub const ACTION_DIM: usize = 3;
pub const STATE_DIM: usize = 5;
pub const VISUAL_DIM: usize = 8;
pub const TACTILE_DIM: usize = 4;
pub const TORQUE_DIM: usize = 2;

/// End-effector position every episode starts from.
pub const HOME: [f64; 2] = [1.0, -0.6];

// FragileGrasp geometry
/// Finger span at aperture 1.
pub const MAX_OPEN: f64 = 0.5;
pub const TABLE_Y: f64 = -0.95;
pub const GRASP_TOLERANCE: f64 = 0.03;
pub const LIFT_SUCCESS: f64 = 0.2;
pub const SOFT_STIFFNESS: f64 = 2.0;
pub const HARD_STIFFNESS: f64 = 8.0;
/// Effective contact width per stiffness class; neither is visible.
pub const SOFT_WIDTH: f64 = 0.20;
pub const HARD_WIDTH: f64 = 0.30;
pub const SOFT_WINDOW: (f64, f64) = (0.2, 0.5);
pub const HARD_WINDOW: (f64, f64) = (0.8, 1.2);
pub const SOFT_BREAK: f64 = 0.6;
pub const HARD_BREAK: f64 = 1.5;
pub const TANGENTIAL_RATIO: f64 = 0.1;

// BlindInsert geometry
pub const SURFACE_Y: f64 = -1.0;
pub const SOCKET_OFFSET: f64 = 0.3;
pub const SLOT_HALF_WIDTH: f64 = 0.05;
pub const SLOT_DEPTH: f64 = 0.1;
pub const PROBE_HALF_WIDTH: f64 = 0.05;
pub const SURFACE_STIFFNESS: f64 = 20.0;
/// Lateral force per unit normal force on the probe chamfer.
pub const CHAMFER_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FragileGrasp,
    BlindInsert,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::FragileGrasp, Task::BlindInsert];

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(Task::FragileGrasp),
            1 => Ok(Task::BlindInsert),
            _ => Err(Error::Invalid(format!("unknown task id {id}"))),
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::FragileGrasp => "fragile_grasp",
            Task::BlindInsert => "blind_insert",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task `{s}`")))
    }
}

/// Hidden latent class: 0 = soft / socket left, 1 = hard / socket right.
/// Assigned by seed parity so any run of consecutive seeds is balanced.
pub fn latent_class(seed: u64) -> usize {
    (seed & 1) as usize
}

/// Value of the hidden latent (stiffness in N/m or socket side ±1).
pub fn latent_value(task: Task, class: usize) -> f64 {
    match (task, class) {
        (Task::FragileGrasp, 0) => SOFT_STIFFNESS,
        (Task::FragileGrasp, _) => HARD_STIFFNESS,
        (Task::BlindInsert, 0) => -1.0,
        (Task::BlindInsert, _) => 1.0,
    }
}

/// Success force window for a stiffness value.
pub fn grip_window(stiffness: f64) -> (f64, f64) {
    if stiffness <= SOFT_STIFFNESS {
        SOFT_WINDOW
    } else {
        HARD_WINDOW
    }
}

pub fn break_force(stiffness: f64) -> f64 {
    if stiffness <= SOFT_STIFFNESS {
        SOFT_BREAK
    } else {
        HARD_BREAK
    }
}

/// Whether holding an object of this stiffness at grip force `f` counts as a
/// successful lift.
pub fn grip_succeeds(stiffness: f64, f: f64) -> bool {
    let (lo, hi) = grip_window(stiffness);
    f >= lo && f <= hi && f <= break_force(stiffness)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TactileReading {
    /// Left/right normal force then left/right tangential proxy.
    pub values: [f64; 4],
    pub normal_force: f64,
    pub broken: bool,
}

/// Finger forces for a parallel gripper squeezing a compliant object.
pub fn tactile_read(aperture: f64, object_width: f64, stiffness: f64) -> TactileReading {
    let overlap = (object_width - aperture * MAX_OPEN).max(0.0);
    let f = stiffness * overlap;
    TactileReading {
        values: [f, f, TANGENTIAL_RATIO * f, TANGENTIAL_RATIO * f],
        normal_force: f,
        broken: f > break_force(stiffness),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Entity x, entity y, entity lift, ee x, ee y, q1, q2, aperture.
    pub visual_feat: Vec<f64>,
    /// q1, q2, last Δq1, last Δq2, aperture.
    pub state: Vec<f64>,
    pub tactile: Vec<f64>,
    pub torque: Vec<f64>,
    pub t: usize,
}

impl Observation {
    /// Physical signal by modality name.
    pub fn modality(&self, name: &str) -> Result<&[f64]> {
        match name {
            "tactile" => Ok(&self.tactile),
            "torque" => Ok(&self.torque),
            _ => Err(Error::Invalid(format!("unknown modality `{name}`"))),
        }
    }
}

/// Width of a named physical modality as produced by the environment.
pub fn modality_dim(name: &str) -> Result<usize> {
    match name {
        "tactile" => Ok(TACTILE_DIM),
        "torque" => Ok(TORQUE_DIM),
        _ => Err(Error::Invalid(format!("unknown modality `{name}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Standard deviation of noise added to in-contact tactile/torque channels.
    pub obs_noise: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { obs_noise: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub done: bool,
    pub success: bool,
}

/// Ground truth the scripted expert is allowed to read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Privileged {
    pub task: Task,
    pub latent: f64,
    pub q: [f64; 2],
    pub aperture: f64,
    pub ee: [f64; 2],
    /// Object centre (FragileGrasp) or probe point (BlindInsert).
    pub entity: [f64; 2],
    pub object_width: f64,
    pub socket_x: f64,
    pub grip_force: f64,
}

#[derive(Clone, Debug)]
pub struct Env {
    task: Task,
    seed: u64,
    config: EnvConfig,
    latent: f64,
    q: [f64; 2],
    last_dq: [f64; 2],
    aperture: f64,
    t: usize,
    done: bool,
    success: bool,
    entity: [f64; 2],
    // FragileGrasp
    held_offset: Option<[f64; 2]>,
    grip_force: f64,
    // BlindInsert
    in_slot: bool,
    contact_force: [f64; 2],
    noise: Rng,
}

impl Env {
    /// Starts an episode; the latent class follows seed parity.
    pub fn reset(task_id: usize, seed: u64, config: &EnvConfig) -> Result<(Self, Observation)> {
        let task = Task::from_id(task_id)?;
        Self::reset_with_latent(task, seed, latent_class(seed), config)
    }

    /// Starts an episode with an explicit latent class. Layout jitter depends on
    /// `seed >> 1` only, so seeds `2k` and `2k+1` share a visual scene.
    pub fn reset_with_latent(task: Task, seed: u64, class: usize, config: &EnvConfig) -> Result<(Self, Observation)> {
        if class > 1 {
            return Err(Error::Invalid(format!("latent class {class}")));
        }
        let mut layout = Rng::derive(seed >> 1, "env-layout", task.id() as u64);
        let entity = match task {
            Task::FragileGrasp => [1.0 + layout.uniform_range(-0.05, 0.05), TABLE_Y],
            Task::BlindInsert => [1.0 + layout.uniform_range(-0.03, 0.03), SURFACE_Y],
        };
        let q = inverse_kinematics(HOME).expect("home pose is reachable");
        let mut env = Self {
            task,
            seed,
            config: config.clone(),
            latent: latent_value(task, class),
            q,
            last_dq: [0.0; 2],
            aperture: 1.0,
            t: 0,
            done: false,
            success: false,
            entity,
            held_offset: None,
            grip_force: 0.0,
            in_slot: false,
            contact_force: [0.0; 2],
            noise: Rng::derive(seed, "env-noise", task.id() as u64),
        };
        env.update_contacts();
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent(&self) -> f64 {
        self.latent
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    pub fn ee(&self) -> [f64; 2] {
        forward_kinematics(self.q)
    }

    fn object_width(&self) -> f64 {
        if self.latent <= SOFT_STIFFNESS {
            SOFT_WIDTH
        } else {
            HARD_WIDTH
        }
    }

    fn socket_x(&self) -> f64 {
        self.entity[0] + self.latent * SOCKET_OFFSET
    }

    pub fn privileged(&self) -> Privileged {
        Privileged {
            task: self.task,
            latent: self.latent,
            q: self.q,
            aperture: self.aperture,
            ee: self.ee(),
            entity: self.object_pos(),
            object_width: self.object_width(),
            socket_x: self.socket_x(),
            grip_force: self.grip_force,
        }
    }

    /// Object position: follows the gripper while held.
    fn object_pos(&self) -> [f64; 2] {
        match self.held_offset {
            Some(off) => {
                let ee = self.ee();
                [ee[0] + off[0], ee[1] + off[1]]
            }
            None => self.entity,
        }
    }

    /// Recomputes contact state after the arm moved. Returns the grip reading
    /// for FragileGrasp.
    fn update_contacts(&mut self) -> Option<TactileReading> {
        let ee = self.ee();
        match self.task {
            Task::FragileGrasp => {
                let obj = self.object_pos();
                let reachable = self.held_offset.is_some()
                    || ((ee[0] - obj[0]).abs() <= GRASP_TOLERANCE && (ee[1] - obj[1]).abs() <= GRASP_TOLERANCE);
                if !reachable {
                    self.grip_force = 0.0;
                    return None;
                }
                let reading = tactile_read(self.aperture, self.object_width(), self.latent);
                self.grip_force = reading.normal_force;
                if reading.normal_force > 0.0 {
                    if self.held_offset.is_none() {
                        self.held_offset = Some([obj[0] - ee[0], obj[1] - ee[1]]);
                    }
                } else if let Some(off) = self.held_offset.take() {
                    // released: the object drops back onto the table
                    self.entity = [ee[0] + off[0], TABLE_Y];
                }
                Some(reading)
            }
            Task::BlindInsert => {
                let sx = self.socket_x();
                let in_column = (ee[0] - sx).abs() <= SLOT_HALF_WIDTH;
                self.in_slot = in_column && (ee[1] >= SURFACE_Y || self.in_slot);
                self.contact_force = if ee[1] < SURFACE_Y && !self.in_slot {
                    let fy = SURFACE_STIFFNESS * (SURFACE_Y - ee[1]);
                    let fx = if (ee[0] - self.entity[0]).abs() <= PROBE_HALF_WIDTH {
                        self.latent * CHAMFER_RATIO * fy
                    } else {
                        0.0
                    };
                    [fx, fy]
                } else {
                    [0.0, 0.0]
                };
                None
            }
        }
    }

    fn noisy(&mut self, v: f64) -> f64 {
        if v == 0.0 || self.config.obs_noise == 0.0 {
            v
        } else {
            v + self.config.obs_noise * self.noise.normal()
        }
    }

    /// Current observation. Noise is drawn only for in-contact channels, so
    /// contact-free readings are exactly zero.
    pub fn observe(&mut self) -> Observation {
        let ee = self.ee();
        let obj = self.object_pos();
        let lift = match self.task {
            Task::FragileGrasp => obj[1] - TABLE_Y,
            Task::BlindInsert => 0.0,
        };
        let entity = match self.task {
            Task::FragileGrasp => obj,
            Task::BlindInsert => self.entity,
        };
        let tactile_raw = match self.task {
            Task::FragileGrasp if self.grip_force > 0.0 => {
                let f = self.grip_force;
                [f, f, TANGENTIAL_RATIO * f, TANGENTIAL_RATIO * f]
            }
            _ => [0.0; 4],
        };
        let torque_raw = contact_torque(self.q, self.contact_force);
        let tactile = tactile_raw.iter().map(|&v| self.noisy(v)).collect();
        let torque = torque_raw.iter().map(|&v| self.noisy(v)).collect();
        Observation {
            visual_feat: vec![entity[0], entity[1], lift, ee[0], ee[1], self.q[0], self.q[1], self.aperture],
            state: vec![self.q[0], self.q[1], self.last_dq[0], self.last_dq[1], self.aperture],
            tactile,
            torque,
            t: self.t,
        }
    }

    /// Applies one clamped action and advances time.
    pub fn step(&mut self, action: [f64; 3]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = clamp_action(action);
        self.q = [wrap_angle(self.q[0] + a[0]), wrap_angle(self.q[1] + a[1])];
        self.last_dq = [a[0], a[1]];
        self.aperture = (self.aperture + a[2]).clamp(0.0, 1.0);
        self.t += 1;

        let reading = self.update_contacts();
        match self.task {
            Task::FragileGrasp => {
                if let Some(r) = reading {
                    if r.broken {
                        self.done = true;
                    } else if self.held_offset.is_some() && self.object_pos()[1] - TABLE_Y >= LIFT_SUCCESS {
                        self.done = true;
                        self.success = grip_succeeds(self.latent, r.normal_force);
                    }
                }
            }
            Task::BlindInsert => {
                let ee = self.ee();
                if self.in_slot && ee[1] <= SURFACE_Y - SLOT_DEPTH {
                    self.done = true;
                    self.success = true;
                }
            }
        }
        if self.t >= EPISODE_STEPS {
            self.done = true;
        }
        let obs = self.observe();
        Ok(StepOutcome { obs, done: self.done, success: self.success })
    }
}

pub fn clamp_action(a: [f64; 3]) -> [f64; 3] {
    let c = |v: f64, m: f64| if v.is_finite() { v.clamp(-m, m) } else { 0.0 };
    [c(a[0], MAX_JOINT_STEP), c(a[1], MAX_JOINT_STEP), c(a[2], MAX_APERTURE_STEP)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> EnvConfig {
        EnvConfig { obs_noise: 0.0 }
    }

    #[test]
    fn tactile_rules() {
        let open = tactile_read(1.0, HARD_WIDTH, HARD_STIFFNESS);
        assert_eq!(open.values, [0.0; 4]);
        // overlap 0.1 at k = 5
        let r = tactile_read((0.3 - 0.1) / MAX_OPEN, 0.3, 5.0);
        assert!((r.normal_force - 0.5).abs() < 1e-12);
        assert!((r.values[0] - 0.5).abs() < 1e-12 && (r.values[1] - 0.5).abs() < 1e-12);
        // soft object squeezed to 0.7 N breaks
        let soft = tactile_read((0.6 - 0.35) / MAX_OPEN, 0.6, SOFT_STIFFNESS);
        assert!((soft.normal_force - 0.7).abs() < 1e-12);
        assert!(soft.broken);
    }

    #[test]
    fn force_windows_are_disjoint() {
        assert!(grip_succeeds(SOFT_STIFFNESS, 0.45));
        assert!(!grip_succeeds(HARD_STIFFNESS, 0.45));
        assert!(grip_succeeds(HARD_STIFFNESS, 0.9));
        assert!(!grip_succeeds(SOFT_STIFFNESS, 0.9));
    }

    #[test]
    fn reset_is_deterministic() {
        let (_, a) = Env::reset(0, 17, &EnvConfig::default()).unwrap();
        let (_, b) = Env::reset(0, 17, &EnvConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(Env::reset(2, 0, &quiet()).is_err());
    }

    #[test]
    fn latents_are_balanced() {
        for task in Task::ALL {
            let hard = (0..200u64)
                .filter(|&s| {
                    let (e, _) = Env::reset(task.id(), s, &quiet()).unwrap();
                    e.latent() == latent_value(task, 1)
                })
                .count();
            assert_eq!(hard, 100);
        }
    }

    #[test]
    fn visual_features_hide_the_latent() {
        for task in Task::ALL {
            for k in 0..10u64 {
                let (_, a) = Env::reset_with_latent(task, 2 * k, 0, &quiet()).unwrap();
                let (_, b) = Env::reset_with_latent(task, 2 * k, 1, &quiet()).unwrap();
                assert_eq!(a.visual_feat, b.visual_feat);
                // paired seeds share a scene
                let (_, c) = Env::reset(task.id(), 2 * k + 1, &quiet()).unwrap();
                assert_eq!(a.visual_feat, c.visual_feat);
            }
        }
    }

    #[test]
    fn zero_action_times_out() {
        for task in Task::ALL {
            let (mut env, _) = Env::reset(task.id(), 3, &EnvConfig::default()).unwrap();
            let mut steps = 0;
            loop {
                let out = env.step([0.0; 3]).unwrap();
                steps += 1;
                assert_eq!(out.obs.tactile, vec![0.0; 4]);
                assert_eq!(out.obs.torque, vec![0.0; 2]);
                if out.done {
                    assert!(!out.success);
                    break;
                }
            }
            assert_eq!(steps, EPISODE_STEPS);
            assert!(matches!(env.step([0.0; 3]), Err(Error::EpisodeDone)));
        }
    }

    #[test]
    fn actions_are_clamped() {
        assert_eq!(clamp_action([1.0, -1.0, 0.5]), [0.1, -0.1, 0.1]);
        assert_eq!(clamp_action([f64::NAN, 0.05, -0.02]), [0.0, 0.05, -0.02]);
    }
}
