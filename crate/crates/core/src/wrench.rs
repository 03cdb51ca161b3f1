//! Tool gravity compensation for wrist force/torque readings.
//!
//! The IMU gravity vector is rotated into the sensor frame, turned into the
//! gravitational wrench of the tool, and subtracted from the measurement:
//!
//! ```text
//! g_ft  = R_ft_imu * g_imu
//! F_g   = m * g_ft            tau_g    = r_com x F_g
//! F_cmp = F_meas - F_g        tau_cmp  = tau_meas - tau_g
//! ```

use std::fmt;

use nalgebra::{convert, DMatrix, DVector, Matrix3, RealField, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Standard gravity used when nothing else is configured (m/s²).
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WrenchError {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid tool: {0}")]
    InvalidTool(String),
    #[error("frame mismatch: '{left}' vs '{right}'")]
    FrameMismatch { left: String, right: String },
    #[error("invalid wrench: {0}")]
    InvalidWrench(String),
    #[error("gravity magnitude {0} outside the physical range [9.0, 10.6] m/s²")]
    NonPhysicalGravity(f64),
    #[error("rank-deficient calibration: {0}")]
    RankDeficient(String),
}

/// Name of the coordinate frame a wrench is expressed in.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameId(String);

impl FrameId {
    pub fn new(name: impl Into<String>) -> Result<Self, WrenchError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(WrenchError::InvalidWrench("frame identifier is empty".into()));
        }
        Ok(Self(name))
    }

    /// The wrist force/torque sensor frame.
    pub fn sensor() -> Self {
        Self("ft_sensor".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Force (N) and torque (N·m) in a named frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Wrench<T: RealField + Copy> {
    pub force: Vector3<T>,
    pub torque: Vector3<T>,
    pub frame: FrameId,
}

impl<T: RealField + Copy> Wrench<T> {
    pub fn new(force: Vector3<T>, torque: Vector3<T>, frame: FrameId) -> Result<Self, WrenchError> {
        if force.iter().chain(torque.iter()).any(|v| !v.is_finite()) {
            return Err(WrenchError::InvalidWrench("non-finite component".into()));
        }
        Ok(Self { force, torque, frame })
    }

    pub fn zero(frame: FrameId) -> Self {
        Self { force: Vector3::zeros(), torque: Vector3::zeros(), frame }
    }

    /// `[fx, fy, fz, tx, ty, tz]`
    pub fn to_array(&self) -> [T; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }

    pub fn from_array(v: [T; 6], frame: FrameId) -> Result<Self, WrenchError> {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]), frame)
    }

    fn check_frame(&self, other: &Self) -> Result<(), WrenchError> {
        if self.frame != other.frame {
            return Err(WrenchError::FrameMismatch {
                left: self.frame.to_string(),
                right: other.frame.to_string(),
            });
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self, WrenchError> {
        self.check_frame(other)?;
        Ok(Self {
            force: self.force + other.force,
            torque: self.torque + other.torque,
            frame: self.frame.clone(),
        })
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { force: self.force * s, torque: self.torque * s, frame: self.frame.clone() }
    }
}

/// Proper rotation stored as an orthonormal 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidRotation<T: RealField + Copy> {
    matrix: Matrix3<T>,
}

fn orthonormal_tolerance<T: RealField + Copy>() -> T {
    let eps: T = T::default_epsilon();
    let scaled = eps * convert::<f64, T>(100.0);
    let floor: T = convert(1e-9);
    if scaled > floor {
        scaled
    } else {
        floor
    }
}

impl<T: RealField + Copy> RigidRotation<T> {
    pub fn identity() -> Self {
        Self { matrix: Matrix3::identity() }
    }

    /// Validates `RᵀR = I` and `det R = +1`.
    pub fn from_matrix(matrix: Matrix3<T>) -> Result<Self, WrenchError> {
        let tol = orthonormal_tolerance::<T>();
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(WrenchError::InvalidRotation("non-finite entry".into()));
        }
        let err = (matrix.transpose() * matrix - Matrix3::identity()).abs().max();
        if err > tol {
            return Err(WrenchError::InvalidRotation(format!(
                "not orthonormal (max |RᵀR - I| = {err})"
            )));
        }
        let det = matrix.determinant();
        if (det - T::one()).abs() > tol {
            return Err(WrenchError::InvalidRotation(format!("determinant {det} != +1")));
        }
        Ok(Self { matrix })
    }

    /// Quaternions are accepted at the boundary and stored as matrices.
    pub fn from_quaternion(q: &UnitQuaternion<T>) -> Self {
        Self { matrix: q.to_rotation_matrix().into_inner() }
    }

    pub fn about_x(angle: T) -> Self {
        Self::from_axis_angle(Vector3::x_axis(), angle)
    }

    pub fn about_y(angle: T) -> Self {
        Self::from_axis_angle(Vector3::y_axis(), angle)
    }

    pub fn about_z(angle: T) -> Self {
        Self::from_axis_angle(Vector3::z_axis(), angle)
    }

    pub fn from_axis_angle(axis: nalgebra::Unit<Vector3<T>>, angle: T) -> Self {
        Self::from_quaternion(&UnitQuaternion::from_axis_angle(&axis, angle))
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.matrix
    }

    pub fn transpose(&self) -> Self {
        Self { matrix: self.matrix.transpose() }
    }

    pub fn then(&self, next: &Self) -> Self {
        Self { matrix: next.matrix * self.matrix }
    }

    pub fn apply(&self, v: &Vector3<T>) -> Vector3<T> {
        self.matrix * v
    }
}

/// Mass and center of mass of everything mounted after the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToolInertia<T: RealField + Copy> {
    mass: T,
    r_com: Vector3<T>,
}

impl<T: RealField + Copy> ToolInertia<T> {
    pub fn new(mass: T, r_com: Vector3<T>) -> Result<Self, WrenchError> {
        if !mass.is_finite() || mass <= T::zero() {
            return Err(WrenchError::InvalidTool(format!("mass must be > 0, got {mass}")));
        }
        if r_com.iter().any(|v| !v.is_finite()) {
            return Err(WrenchError::InvalidTool("center of mass is not finite".into()));
        }
        Ok(Self { mass, r_com })
    }

    pub fn mass(&self) -> T {
        self.mass
    }

    pub fn r_com(&self) -> &Vector3<T> {
        &self.r_com
    }
}

/// `g_ft = R · g_imu`.
pub fn rotate_gravity<T: RealField + Copy>(r: &RigidRotation<T>, g_imu: &Vector3<T>) -> Vector3<T> {
    r.apply(g_imu)
}

/// Rejects accelerometer readings that cannot be gravity at rest.
pub fn check_physical_gravity<T: RealField + Copy>(g: &Vector3<T>) -> Result<(), WrenchError> {
    let n = g.norm();
    let lo: T = convert(9.0);
    let hi: T = convert(10.6);
    if n < lo || n > hi {
        return Err(WrenchError::NonPhysicalGravity(
            nalgebra::try_convert::<T, f64>(n).unwrap_or(f64::NAN),
        ));
    }
    Ok(())
}

/// `F_g = m · g_ft`, `τ_g = r_com × F_g`, expressed in `frame`.
pub fn gravitational_wrench<T: RealField + Copy>(
    tool: &ToolInertia<T>,
    g_ft: &Vector3<T>,
    frame: FrameId,
) -> Wrench<T> {
    let force = g_ft * tool.mass;
    let torque = tool.r_com.cross(&force);
    Wrench { force, torque, frame }
}

/// Component-wise `measured - grav` on force and torque.
pub fn compensate<T: RealField + Copy>(
    measured: &Wrench<T>,
    grav: &Wrench<T>,
) -> Result<Wrench<T>, WrenchError> {
    measured.check_frame(grav)?;
    Ok(Wrench {
        force: measured.force - grav.force,
        torque: measured.torque - grav.torque,
        frame: measured.frame.clone(),
    })
}

/// Full pipeline for one sample: IMU gravity, extrinsic, tool model.
pub fn compensate_with_imu<T: RealField + Copy>(
    measured: &Wrench<T>,
    r_ft_imu: &RigidRotation<T>,
    g_imu: &Vector3<T>,
    tool: &ToolInertia<T>,
) -> Result<Wrench<T>, WrenchError> {
    let g_ft = rotate_gravity(r_ft_imu, g_imu);
    compensate(measured, &gravitational_wrench(tool, &g_ft, measured.frame.clone()))
}

/// Result of fitting a tool model to static poses.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolCalibration<T: RealField + Copy> {
    pub tool: ToolInertia<T>,
    /// RMS over all force and torque residual components.
    pub residual_rms: T,
}

/// Least-squares tool fit from static samples `(R_i, W_i)` where the gravity
/// seen by the sensor is `R_i · g_ref`.
///
/// Mass comes first from the force norms, then `r_com` from the stacked
/// linear system `τ_i = r_com × F_i = -[F_i]× r_com`.
pub fn calibrate_tool<T: RealField + Copy>(
    samples: &[(RigidRotation<T>, Wrench<T>)],
    g_ref: &Vector3<T>,
) -> Result<ToolCalibration<T>, WrenchError> {
    if samples.len() < 3 {
        return Err(WrenchError::RankDeficient(format!(
            "need at least 3 static samples, got {}",
            samples.len()
        )));
    }
    let frame = &samples[0].1.frame;
    if let Some((_, w)) = samples.iter().find(|(_, w)| &w.frame != frame) {
        return Err(WrenchError::FrameMismatch { left: frame.to_string(), right: w.frame.to_string() });
    }
    let gravities: Vec<Vector3<T>> = samples.iter().map(|(r, _)| r.apply(g_ref)).collect();

    // Gravity directions must span more than a line.
    let mut scatter = Matrix3::<T>::zeros();
    for g in &gravities {
        let u = g.normalize();
        scatter += u * u.transpose();
    }
    let eig = scatter.symmetric_eigenvalues();
    let mut ev: Vec<T> = eig.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let collinear_tol: T = convert(1e-9);
    if ev[1] <= collinear_tol * ev[0] {
        return Err(WrenchError::RankDeficient("all gravity directions are collinear".into()));
    }

    let mut num = T::zero();
    let mut den = T::zero();
    for ((_, w), g) in samples.iter().zip(&gravities) {
        num += w.force.norm() * g.norm();
        den += g.norm_squared();
    }
    let mass = num / den;

    let n = samples.len();
    let mut a = DMatrix::<T>::zeros(3 * n, 3);
    let mut b = DVector::<T>::zeros(3 * n);
    for (i, (_, w)) in samples.iter().enumerate() {
        let skew = -w.force.cross_matrix();
        a.view_mut((3 * i, 0), (3, 3)).copy_from(&skew);
        b.rows_mut(3 * i, 3).copy_from(&w.torque);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= collinear_tol * smax {
        return Err(WrenchError::RankDeficient("torque system is singular".into()));
    }
    let eps: T = T::default_epsilon();
    let x = svd
        .solve(&b, eps * smax)
        .map_err(|e| WrenchError::RankDeficient(e.to_string()))?;
    let r_com = Vector3::new(x[0], x[1], x[2]);
    let tool = ToolInertia::new(mass, r_com)?;

    let mut sq = T::zero();
    for ((_, w), g) in samples.iter().zip(&gravities) {
        let pred = gravitational_wrench(&tool, g, w.frame.clone());
        sq += (w.force - pred.force).norm_squared() + (w.torque - pred.torque).norm_squared();
    }
    let residual_rms = (sq / convert::<f64, T>((6 * n) as f64)).sqrt();
    Ok(ToolCalibration { tool, residual_rms })
}

/// Additive sensor noise model for synthetic readings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub force_sigma: f64,
    pub torque_sigma: f64,
}

impl SensorNoise {
    pub const NONE: SensorNoise = SensorNoise { force_sigma: 0.0, torque_sigma: 0.0 };

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (i, v) in out.iter_mut().enumerate() {
            let sigma = if i < 3 { self.force_sigma } else { self.torque_sigma };
            if sigma > 0.0 {
                *v = Normal::new(0.0, sigma).expect("sigma is finite").sample(rng);
            }
        }
        out
    }
}

/// Summary of a scripted ±90° tilt sweep about x then y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltSweepReport {
    pub samples: usize,
    /// Largest absolute raw force component.
    pub peak_raw_force: f64,
    /// Largest absolute raw torque component.
    pub peak_raw_torque: f64,
    /// Largest absolute compensated force component.
    pub max_residual_force: f64,
    /// Largest absolute compensated torque component.
    pub max_residual_torque: f64,
}

/// Rotates a handheld device through ±90° about x and then about y, reads a
/// synthetic sensor carrying only the tool load plus noise, and compensates
/// every reading through the IMU path.
pub fn tilt_sweep<R: Rng + ?Sized>(
    tool: &ToolInertia<f64>,
    r_ft_imu: &RigidRotation<f64>,
    gravity: f64,
    noise: SensorNoise,
    steps_per_axis: usize,
    rng: &mut R,
) -> Result<TiltSweepReport, WrenchError> {
    let g_world = Vector3::new(0.0, 0.0, -gravity);
    let frame = FrameId::sensor();
    let mut report = TiltSweepReport {
        samples: 0,
        peak_raw_force: 0.0,
        peak_raw_torque: 0.0,
        max_residual_force: 0.0,
        max_residual_torque: 0.0,
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    for axis in [Vector3::x_axis(), Vector3::y_axis()] {
        for i in 0..steps_per_axis {
            let u = if steps_per_axis > 1 { i as f64 / (steps_per_axis - 1) as f64 } else { 0.5 };
            let angle = -half_pi + 2.0 * half_pi * u;
            // Device orientation in the world; the IMU is rigidly attached.
            let device = RigidRotation::from_axis_angle(axis, angle);
            let g_imu = device.transpose().apply(&g_world);
            let g_ft = rotate_gravity(r_ft_imu, &g_imu);
            let load = gravitational_wrench(tool, &g_ft, frame.clone());
            let n = noise.sample(rng);
            let raw = Wrench::new(
                load.force + Vector3::new(n[0], n[1], n[2]),
                load.torque + Vector3::new(n[3], n[4], n[5]),
                frame.clone(),
            )?;
            let comp = compensate_with_imu(&raw, r_ft_imu, &g_imu, tool)?;
            report.samples += 1;
            report.peak_raw_force = report.peak_raw_force.max(raw.force.amax());
            report.peak_raw_torque = report.peak_raw_torque.max(raw.torque.amax());
            report.max_residual_force = report.max_residual_force.max(comp.force.amax());
            report.max_residual_torque = report.max_residual_torque.max(comp.torque.amax());
        }
    }
    Ok(report)
}
