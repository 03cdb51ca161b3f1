//! Planar contact simulator with asynchronous camera and wrench streams.
//!
//! The tool moves in the vertical x-z plane and spins about the vertical
//! axis (yaw). Tool motion is kinematic: each 30 Hz action is spread linearly
//! over the 1 kHz physics ticks of the frame. Contact forces come from a
//! spring-damper model; the sensor reports them together with the tool's
//! gravitational load and noise.

mod expert;
mod render;

pub use expert::Expert;
pub use render::{render, Rect, View};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::{apply_delta, DeltaPose, Pose};
use crate::wrench::{gravitational_wrench, FrameId, SensorNoise, ToolInertia, STANDARD_GRAVITY};

pub const PHYSICS_HZ: u64 = 1000;
pub const FRAME_HZ: u64 = 30;
pub const FT_HZ: u64 = 200;
/// Hand-eye camera exposure lead relative to the global camera.
pub const CAM2_LEAD_MS: u64 = 4;
const FT_EVERY_MS: u64 = PHYSICS_HZ / FT_HZ;
const IMAGE_SIDE: usize = 32;
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    PegInsert,
    LatchSpike,
}

impl TaskId {
    pub fn name(self) -> &'static str {
        match self {
            TaskId::PegInsert => "peg_insert",
            TaskId::LatchSpike => "latch_spike",
        }
    }
}

/// Task geometry, contact parameters and sensor model. Lengths in m, angles
/// in degrees, forces in N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub task: TaskId,
    pub episode_s: f64,
    /// Range of the fixture's x position.
    pub fixture_x: [f64; 2],
    /// Range of the initial tool x offset from the fixture.
    pub start_dx: [f64; 2],
    pub start_z: [f64; 2],
    pub stiffness: f64,
    pub damping: f64,
    /// Stiffness of hard stops (bottoms, table, jammed collar).
    pub stop_stiffness: f64,
    pub max_force: f64,
    pub spike_force: f64,
    pub spike_ms: u64,
    /// Per-frame action limits `(x, z, yaw_deg)`.
    pub max_step: [f64; 3],
    pub button_half_width: f64,
    pub release_depth: [f64; 2],
    pub button_stop: f64,
    pub overtravel: f64,
    pub lift_height: f64,
    /// Lateral tolerance for entering the socket.
    pub clearance: f64,
    pub socket_half_width: f64,
    pub block_half_width: f64,
    pub socket_depth: f64,
    pub key_phase_deg: [f64; 2],
    pub key_period_deg: f64,
    pub engage_depth: f64,
    pub engage_tol_deg: f64,
    pub insert_tol_deg: f64,
    pub jam_deg: f64,
    /// Penetration beyond which an unengaged collar becomes a hard stop.
    pub collar_stop: f64,
    /// Penetration at which the engaged collar force saturates.
    pub collar_free: f64,
    pub success_margin: f64,
    pub tool_mass: f64,
    pub r_com: [f64; 3],
    pub noise: SensorNoise,
    pub imu_sigma: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: TaskId::LatchSpike,
            episode_s: 2.0,
            fixture_x: [-0.02, 0.02],
            start_dx: [-0.015, 0.015],
            start_z: [0.015, 0.025],
            stiffness: 500.0,
            damping: 5.0,
            stop_stiffness: 5000.0,
            max_force: 10.0,
            spike_force: 3.0,
            spike_ms: 10,
            max_step: [0.004, 0.005, 8.0],
            button_half_width: 0.006,
            release_depth: [0.003, 0.012],
            button_stop: 0.016,
            overtravel: 0.003,
            lift_height: 0.015,
            clearance: 0.0015,
            socket_half_width: 0.0035,
            block_half_width: 0.015,
            socket_depth: 0.015,
            key_phase_deg: [0.0, 60.0],
            key_period_deg: 60.0,
            engage_depth: 0.001,
            engage_tol_deg: 1.0,
            insert_tol_deg: 5.0,
            jam_deg: 9.0,
            collar_stop: 0.006,
            collar_free: 0.004,
            success_margin: 0.0015,
            tool_mass: 0.5,
            r_com: [0.02, 0.0, 0.05],
            noise: SensorNoise { force_sigma: 0.05, torque_sigma: 0.005 },
            imu_sigma: 0.02,
        }
    }
}

impl TaskSpec {
    pub fn latch_spike() -> Self {
        Self::default()
    }

    pub fn peg_insert() -> Self {
        Self { task: TaskId::PegInsert, ..Self::default() }
    }

    pub fn for_task(task: TaskId) -> Self {
        Self { task, ..Self::default() }
    }

    pub fn max_frames(&self) -> usize {
        (self.episode_s * FRAME_HZ as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        let ranges = [("fixture_x", self.fixture_x), ("start_dx", self.start_dx), ("start_z", self.start_z), ("release_depth", self.release_depth), ("key_phase_deg", self.key_phase_deg)];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(format!("{name}: invalid range [{lo}, {hi}]"));
            }
        }
        if !(self.clearance > 0.0) || !(self.button_half_width > 0.0) {
            return Err("clearance must be positive".into());
        }
        if !(self.stiffness > 0.0 && self.damping >= 0.0 && self.stop_stiffness > 0.0) {
            return Err("contact parameters must be positive".into());
        }
        if !(self.episode_s > 0.0) || !(self.tool_mass > 0.0) {
            return Err("episode_s and tool_mass must be positive".into());
        }
        if self.max_step.iter().any(|v| !(*v > 0.0)) {
            return Err("max_step entries must be positive".into());
        }
        Ok(())
    }

    fn tool(&self) -> ToolInertia<f64> {
        ToolInertia::new(self.tool_mass, Vector3::from(self.r_com)).expect("validated tool")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    ExcessiveForce,
    OverTravel,
    Jammed,
}

/// Complete simulator state; the expert reads it directly.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub tick: u64,
    pub frame: usize,
    pub x: f64,
    pub z: f64,
    pub yaw: f64,
    /// Commanded vertical velocity over the current frame (m/s).
    pub vz: f64,
    pub fixture_x: f64,
    pub release_depth: f64,
    pub key_phase: f64,
    pub released: bool,
    pub engaged: bool,
    /// Rendered button travel; a released latch stays open.
    pub button_depth: f64,
    pub contact_force: f64,
    pub failure: Option<Failure>,
    pub success: bool,
    /// `[start, end)` of every injected force spike, in seconds.
    pub spikes: Vec<[f64; 2]>,
}

impl EnvState {
    pub fn pose(&self) -> Pose {
        Pose::from_xyz_yaw(self.x, 0.0, self.z, self.yaw)
    }

    /// Key misalignment in degrees, wrapped to `(-period/2, period/2]`.
    pub fn key_error_deg(&self, spec: &TaskSpec) -> f64 {
        let p = spec.key_period_deg;
        let mut a = (self.yaw - self.key_phase).to_degrees() % p;
        if a > p / 2.0 {
            a -= p;
        } else if a <= -p / 2.0 {
            a += p;
        }
        a
    }

    /// Penetration below the fixture's top surface.
    pub fn depth(&self) -> f64 {
        (-self.z).max(0.0)
    }
}

/// Images from both cameras for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub cam1_t: f64,
    pub cam1: Vec<f32>,
    pub cam2_t: f64,
    pub cam2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub frame: Frame,
    /// Raw sensor readings `(t, [Fx, Fy, Fz, Tx, Ty, Tz])`.
    pub ft: Vec<(f64, [f64; 6])>,
    /// Gravity measured by the IMU `(t, g)`.
    pub imu: Vec<(f64, [f64; 3])>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("simulation diverged at tick {0}")]
    Diverged(u64),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
}

/// Physics tick of image frame `k`.
pub fn frame_tick(k: usize) -> u64 {
    (k as u64 * PHYSICS_HZ + FRAME_HZ / 2) / FRAME_HZ
}

pub struct Env {
    spec: TaskSpec,
    state: EnvState,
    rng: ChaCha8Rng,
    tool: ToolInertia<f64>,
    render_images: bool,
    spike_until: u64,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl Env {
    /// Randomized initial state; returns the environment and frame 0.
    pub fn reset(spec: &TaskSpec, seed: u64, render_images: bool) -> Result<(Self, Frame), SimError> {
        spec.validate().map_err(SimError::InvalidSpec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fixture_x = uniform(&mut rng, spec.fixture_x);
        let x = fixture_x + uniform(&mut rng, spec.start_dx);
        let z = uniform(&mut rng, spec.start_z);
        let release_depth = uniform(&mut rng, spec.release_depth);
        let key_phase = uniform(&mut rng, spec.key_phase_deg).to_radians();
        let state = EnvState {
            tick: 0,
            frame: 0,
            x,
            z,
            yaw: 0.0,
            vz: 0.0,
            fixture_x,
            release_depth,
            key_phase,
            released: false,
            engaged: false,
            button_depth: 0.0,
            contact_force: 0.0,
            failure: None,
            success: false,
            spikes: Vec::new(),
        };
        let mut env = Self { spec: spec.clone(), state, rng, tool: spec.tool(), render_images, spike_until: 0 };
        env.update_contact();
        let img = env.render_cam1();
        let cam2 = env.render_cam2();
        let frame = Frame { index: 0, cam1_t: 0.0, cam1: img, cam2_t: -(CAM2_LEAD_MS as f64) / 1000.0, cam2 };
        Ok((env, frame))
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn done(&self) -> bool {
        self.state.success || self.state.failure.is_some() || self.state.frame >= self.spec.max_frames()
    }

    pub fn success(&self) -> bool {
        self.state.success
    }

    /// Clamps a pose delta to the per-frame limits; tilts are dropped.
    pub fn clamp_action(&self, a: &DeltaPose) -> DeltaPose {
        let [mx, mz, myaw] = self.spec.max_step;
        let myaw = myaw.to_radians();
        let c = |v: f64, m: f64| if v.is_finite() { v.clamp(-m, m) } else { 0.0 };
        [c(a[0], mx), c(a[1], mx), c(a[2], mz), 0.0, 0.0, c(a[5], myaw)]
    }

    /// Advances one 30 Hz frame under a tool-frame pose delta. The resulting
    /// pose is projected back onto the x-z plane.
    pub fn step(&mut self, action: &DeltaPose) -> Result<StepOutput, SimError> {
        let a = self.clamp_action(action);
        let start = self.state.pose();
        let target = apply_delta(&start, &a);
        let tp = target.position();
        let (x0, z0, yaw0) = (self.state.x, self.state.z, self.state.yaw);
        let (x1, z1) = (tp.x, tp.z);
        let yaw1 = yaw0 + a[5];
        let t_start = self.state.tick;
        let next = self.state.frame + 1;
        let t_end = frame_tick(next);
        let span = (t_end - t_start) as f64;
        self.state.vz = (z1 - z0) / (span / PHYSICS_HZ as f64);
        let mut ft = Vec::with_capacity(8);
        let mut imu = Vec::with_capacity(8);
        let mut cam2 = None;
        for tick in t_start + 1..=t_end {
            let u = (tick - t_start) as f64 / span;
            self.state.tick = tick;
            self.state.x = x0 + (x1 - x0) * u;
            self.state.z = z0 + (z1 - z0) * u;
            self.state.yaw = yaw0 + (yaw1 - yaw0) * u;
            self.update_contact();
            if !(self.state.x.is_finite() && self.state.z.is_finite() && self.state.contact_force.is_finite()) {
                return Err(SimError::Diverged(tick));
            }
            if tick % FT_EVERY_MS == 0 {
                let t = tick as f64 / PHYSICS_HZ as f64;
                let (w, g) = self.read_sensors();
                ft.push((t, w));
                imu.push((t, g));
            }
            if tick + CAM2_LEAD_MS == t_end {
                cam2 = Some(self.render_cam2());
            }
        }
        self.state.frame = next;
        let frame = Frame {
            index: next,
            cam1_t: t_end as f64 / PHYSICS_HZ as f64,
            cam1: self.render_cam1(),
            cam2_t: (t_end - CAM2_LEAD_MS) as f64 / PHYSICS_HZ as f64,
            cam2: cam2.unwrap_or_else(|| self.render_cam2()),
        };
        Ok(StepOutput { frame, ft, imu })
    }

    fn fail(&mut self, f: Failure) {
        if self.state.failure.is_none() && !self.state.success {
            self.state.failure = Some(f);
        }
    }

    fn start_spike(&mut self) {
        let tick = self.state.tick;
        self.spike_until = tick + self.spec.spike_ms;
        self.state.spikes.push([tick as f64 / PHYSICS_HZ as f64, self.spike_until as f64 / PHYSICS_HZ as f64]);
    }

    fn spring(&self, delta: f64) -> f64 {
        let s = &self.spec;
        (s.stiffness * delta + s.damping * (-self.state.vz)).max(0.0)
    }

    fn update_contact(&mut self) {
        let s = self.spec.clone();
        let st = &self.state;
        let dx = (st.x - st.fixture_x).abs();
        let depth = -st.z;
        let mut force = 0.0;
        match s.task {
            TaskId::LatchSpike => {
                if dx <= s.button_half_width {
                    if depth > 0.0 {
                        force = self.spring(depth);
                        if depth > s.button_stop {
                            force += s.stop_stiffness * (depth - s.button_stop);
                        }
                        if !self.state.released && depth >= self.state.release_depth {
                            self.state.released = true;
                            self.start_spike();
                        }
                        if self.state.released && depth > self.state.release_depth + s.overtravel {
                            self.fail(Failure::OverTravel);
                        }
                    }
                    self.state.button_depth = depth.clamp(0.0, s.button_stop);
                } else {
                    self.state.button_depth = 0.0;
                }
                if self.state.released {
                    self.state.button_depth = self.state.button_depth.max(self.state.release_depth);
                }
                if dx > s.button_half_width {
                    let table = depth - 0.02;
                    if table > 0.0 {
                        force = s.stop_stiffness * table;
                    }
                }
                if self.state.released && self.state.failure.is_none() && self.state.z >= s.lift_height {
                    self.state.success = true;
                }
            }
            TaskId::PegInsert => {
                let a = self.state.key_error_deg(&s).abs();
                if dx <= s.block_half_width {
                    if depth > 0.0 {
                        let in_hole = dx <= s.clearance;
                        if in_hole && self.state.engaged && a <= s.insert_tol_deg {
                            force = s.stiffness * depth.min(s.collar_free);
                            if depth > s.socket_depth {
                                force += s.stop_stiffness * (depth - s.socket_depth);
                            }
                        } else {
                            force = self.spring(depth);
                            if depth > s.collar_stop {
                                force += s.stop_stiffness * (depth - s.collar_stop);
                            }
                        }
                        if in_hole && !self.state.engaged && depth > s.engage_depth && a <= s.engage_tol_deg {
                            self.state.engaged = true;
                            self.start_spike();
                        }
                    }
                } else {
                    let table = depth - 0.03;
                    if table > 0.0 {
                        force = s.stop_stiffness * table;
                    }
                }
                if self.state.engaged && a > s.jam_deg {
                    self.fail(Failure::Jammed);
                }
                let inserted = dx <= s.clearance && depth >= s.socket_depth - s.success_margin;
                if self.state.engaged && a <= s.insert_tol_deg && inserted && self.state.failure.is_none() {
                    self.state.success = true;
                }
            }
        }
        if force > s.max_force {
            self.fail(Failure::ExcessiveForce);
        }
        self.state.contact_force = force;
    }

    /// Raw wrench in the sensor frame and IMU gravity.
    fn read_sensors(&mut self) -> ([f64; 6], [f64; 3]) {
        let mut fz = self.state.contact_force;
        if self.state.tick < self.spike_until {
            fz += self.spec.spike_force;
        }
        // The sensor frame spins with the tool about the vertical axis,
        // which leaves vertical vectors unchanged.
        let g_ft = Vector3::new(0.0, 0.0, -STANDARD_GRAVITY);
        let load = gravitational_wrench(&self.tool, &g_ft, FrameId::sensor());
        let noise = self.spec.noise.sample(&mut self.rng);
        let mut w = [0.0; 6];
        let contact = [0.0, 0.0, fz, 0.0, 0.0, 0.0];
        let grav = load.to_array();
        for i in 0..6 {
            w[i] = contact[i] + grav[i] + noise[i];
        }
        let mut g = [g_ft.x, g_ft.y, g_ft.z];
        if self.spec.imu_sigma > 0.0 {
            let n = Normal::new(0.0, self.spec.imu_sigma).expect("finite sigma");
            for v in &mut g {
                *v += n.sample(&mut self.rng);
            }
        }
        (w, g)
    }

    /// Rectangles describing the current scene.
    pub fn scene(&self) -> Vec<Rect> {
        let s = &self.spec;
        let st = &self.state;
        let fx = st.fixture_x;
        let mut rects = Vec::with_capacity(5);
        match s.task {
            TaskId::LatchSpike => {
                rects.push(Rect::new(-1.0, 1.0, -1.0, -0.02, 0.3));
                rects.push(Rect::new(fx - s.button_half_width, fx + s.button_half_width, -0.02, -st.button_depth, 0.6));
            }
            TaskId::PegInsert => {
                rects.push(Rect::new(-1.0, 1.0, -1.0, -0.03, 0.3));
                rects.push(Rect::new(fx - s.block_half_width, fx + s.block_half_width, -0.03, 0.0, 0.5));
                rects.push(Rect::new(fx - s.socket_half_width, fx + s.socket_half_width, -s.socket_depth, 0.0, 0.1));
            }
        }
        rects.push(Rect::new(st.x - 0.003, st.x + 0.003, st.z, st.z + 0.1, 1.0));
        rects
    }

    fn render_cam1(&self) -> Vec<f32> {
        if !self.render_images {
            return Vec::new();
        }
        render(&self.scene(), View { cx: 0.0, cz: 0.04, half: 0.08 }, IMAGE_SIDE, SUPERSAMPLE)
    }

    fn render_cam2(&self) -> Vec<f32> {
        if !self.render_images {
            return Vec::new();
        }
        render(&self.scene(), View { cx: self.state.x, cz: self.state.z, half: 0.04 }, IMAGE_SIDE, SUPERSAMPLE)
    }
}

pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
