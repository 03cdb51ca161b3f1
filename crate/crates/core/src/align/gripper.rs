use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GripperState {
    Open,
    Closed,
}

impl GripperState {
    pub fn as_scalar(self) -> f64 {
        match self {
            GripperState::Open => 0.0,
            GripperState::Closed => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GripperEventKind {
    Closing,
    Opening,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GripperEvent {
    pub frame: usize,
    pub kind: GripperEventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GripperTrack {
    pub labels: Vec<GripperState>,
    pub events: Vec<GripperEvent>,
    /// Frames whose marker pair was missing; their label is held.
    pub interpolated: Vec<bool>,
    /// Inter-jaw distance velocity (m/s), `None` where not computable.
    pub velocity: Vec<Option<f64>>,
}

/// Latching open/close inference from the rate of change of the distance
/// between the two jaw markers.
pub fn infer_gripper_state(
    times: &[f64],
    jaws: &[Option<(Vector3<f64>, Vector3<f64>)>],
    velocity_threshold: f64,
    initial: GripperState,
) -> Result<GripperTrack, super::AlignError> {
    if times.len() != jaws.len() {
        return Err(super::AlignError::LengthMismatch(format!(
            "{} timestamps for {} marker frames",
            times.len(),
            jaws.len()
        )));
    }
    if jaws.len() < 2 {
        return Err(super::AlignError::InvalidArgument("need at least 2 frames".into()));
    }
    super::window::check_increasing("jaw markers", times)?;
    let mut state = initial;
    let mut last: Option<(f64, f64)> = None;
    let mut track = GripperTrack {
        labels: Vec::with_capacity(jaws.len()),
        events: Vec::new(),
        interpolated: Vec::with_capacity(jaws.len()),
        velocity: Vec::with_capacity(jaws.len()),
    };
    for (i, (&t, pair)) in times.iter().zip(jaws).enumerate() {
        let Some((a, b)) = pair else {
            track.labels.push(state);
            track.interpolated.push(true);
            track.velocity.push(None);
            continue;
        };
        let dist = (a - b).norm();
        let vel = last.map(|(t0, d0)| (dist - d0) / (t - t0));
        if let Some(v) = vel {
            if v < -velocity_threshold && state == GripperState::Open {
                state = GripperState::Closed;
                track.events.push(GripperEvent { frame: i, kind: GripperEventKind::Closing });
            } else if v > velocity_threshold && state == GripperState::Closed {
                state = GripperState::Open;
                track.events.push(GripperEvent { frame: i, kind: GripperEventKind::Opening });
            }
        }
        last = Some((t, dist));
        track.labels.push(state);
        track.interpolated.push(false);
        track.velocity.push(vel);
    }
    Ok(track)
}
