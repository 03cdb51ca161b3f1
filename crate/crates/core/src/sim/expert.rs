//! Scripted demonstrator with privileged access to the simulator state.

use crate::align::{pose_delta, DeltaPose, Pose};

use super::{EnvState, TaskId, TaskSpec};

const LATERAL_GAIN: f64 = 0.6;
const PRESS_TOL: f64 = 0.002;
const INSERT_TOL: f64 = 0.0005;
const HOVER_Z: f64 = 0.010;
const DESCEND_STEP: f64 = 0.003;
const PRESS_STEP: f64 = 0.0005;
const LIFT_STEP: f64 = 0.005;
const PROBE_DEPTH: f64 = 0.0035;
const SEARCH_STEP_DEG: f64 = 4.0;
const KEY_TOL_DEG: f64 = 0.3;

/// Expert that reacts to hidden events (latch release, key engagement) only
/// at plan boundaries, i.e. every `n_exec` frames.
#[derive(Debug, Clone)]
pub struct Expert {
    n_exec: usize,
    known_event: bool,
}

impl Expert {
    pub fn new(n_exec: usize) -> Self {
        Self { n_exec: n_exec.max(1), known_event: false }
    }

    /// Tool-frame pose delta for the current frame.
    pub fn act(&mut self, spec: &TaskSpec, st: &EnvState) -> DeltaPose {
        if st.frame % self.n_exec == 0 {
            self.known_event = match spec.task {
                TaskId::LatchSpike => st.released,
                TaskId::PegInsert => st.engaged,
            };
        }
        if st.success {
            return [0.0; 6];
        }
        let (dx, dz, dyaw_deg) = match spec.task {
            TaskId::LatchSpike => self.latch(spec, st),
            TaskId::PegInsert => self.peg(spec, st),
        };
        let here = st.pose();
        let target = Pose::from_xyz_yaw(st.x + dx, 0.0, st.z + dz, st.yaw + dyaw_deg.to_radians());
        pose_delta(&here, &target)
    }

    fn lateral(spec: &TaskSpec, ex: f64) -> f64 {
        (-LATERAL_GAIN * ex).clamp(-spec.max_step[0], spec.max_step[0])
    }

    /// Centres over the fixture at hover height.
    fn approach(spec: &TaskSpec, st: &EnvState, ex: f64) -> (f64, f64, f64) {
        let dz = (HOVER_Z - st.z).clamp(0.0, spec.max_step[1]);
        (Self::lateral(spec, ex), dz, 0.0)
    }

    fn latch(&self, spec: &TaskSpec, st: &EnvState) -> (f64, f64, f64) {
        let ex = st.x - st.fixture_x;
        if self.known_event {
            return (0.0, LIFT_STEP.min(spec.max_step[1]), 0.0);
        }
        if ex.abs() > PRESS_TOL {
            return Self::approach(spec, st, ex);
        }
        if st.z > 0.0 {
            return (Self::lateral(spec, ex), (-st.z).max(-DESCEND_STEP), 0.0);
        }
        (Self::lateral(spec, ex), -PRESS_STEP, 0.0)
    }

    fn peg(&self, spec: &TaskSpec, st: &EnvState) -> (f64, f64, f64) {
        let ex = st.x - st.fixture_x;
        let a = st.key_error_deg(spec);
        if self.known_event {
            if a.abs() > KEY_TOL_DEG {
                let m = spec.max_step[2];
                return (0.0, 0.0, (-a).clamp(-m, m));
            }
            let goal = -(spec.socket_depth - spec.success_margin / 3.0 * 2.0);
            return (0.0, (goal - st.z).clamp(-DESCEND_STEP, 0.0), 0.0);
        }
        if st.z > 0.0 && ex.abs() > INSERT_TOL {
            return Self::approach(spec, st, ex);
        }
        if st.z > -PROBE_DEPTH {
            return (Self::lateral(spec, ex), (-PROBE_DEPTH - st.z).max(-DESCEND_STEP), 0.0);
        }
        (0.0, 0.0, SEARCH_STEP_DEG)
    }
}
