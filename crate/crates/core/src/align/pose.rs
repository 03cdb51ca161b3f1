use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};

/// 6-DOF pose: position (m) and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(pub Isometry3<f64>);

/// `[tx, ty, tz, rx, ry, rz]`: translation (m) in the earlier TCP frame and
/// rotation as an axis-angle vector (rad).
pub type DeltaPose = [f64; 6];

impl Pose {
    pub fn identity() -> Self {
        Self(Isometry3::identity())
    }

    /// Builds a pose from a possibly slightly denormalized quaternion
    /// `(w, x, y, z)`. Deviations above 1e-3 are logged.
    pub fn from_parts(position: Vector3<f64>, q: Quaternion<f64>) -> Self {
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-3 {
            log::warn!("renormalizing quaternion with norm {norm:.6}");
        }
        let rot = if norm > 0.0 { UnitQuaternion::from_quaternion(q) } else { UnitQuaternion::identity() };
        Self(Isometry3::from_parts(Translation3::from(position), rot))
    }

    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self(Isometry3::from_parts(
            Translation3::new(x, y, z),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        ))
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.translation.vector
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.0.rotation
    }

    /// `[x, y, z, qw, qx, qy, qz]`
    pub fn to_array(&self) -> [f64; 7] {
        let p = self.position();
        let q = self.rotation();
        [p.x, p.y, p.z, q.w, q.i, q.j, q.k]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self::from_parts(Vector3::new(v[0], v[1], v[2]), Quaternion::new(v[3], v[4], v[5], v[6]))
    }
}

/// Motion from `from` to `to`, expressed in the `from` frame.
pub fn pose_delta(from: &Pose, to: &Pose) -> DeltaPose {
    let rel = from.0.inverse() * to.0;
    let t = rel.translation.vector;
    let r = rel.rotation.scaled_axis();
    [t.x, t.y, t.z, r.x, r.y, r.z]
}

/// Right-composes a delta onto a pose; inverse of [`pose_delta`].
pub fn apply_delta(pose: &Pose, delta: &DeltaPose) -> Pose {
    let rel = Isometry3::from_parts(
        Translation3::new(delta[0], delta[1], delta[2]),
        UnitQuaternion::from_scaled_axis(Vector3::new(delta[3], delta[4], delta[5])),
    );
    Pose(pose.0 * rel)
}

/// `T_world_tcp = T_world_marker · T_marker_tcp`.
pub fn transform_marker_to_tcp(marker: &Pose, marker_to_tcp: &Isometry3<f64>) -> Pose {
    Pose(marker.0 * marker_to_tcp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let q = UnitQuaternion::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        );
        let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Pose(Isometry3::from_parts(Translation3::from(p), q))
    }

    #[test]
    fn identical_poses_give_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_pose(&mut rng);
        for v in pose_delta(&p, &p) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn frame_aligned_translation() {
        let a = Pose::identity();
        let b = Pose::from_xyz_yaw(0.0, 0.0, 0.01, 0.0);
        let d = pose_delta(&a, &b);
        let expect = [0.0, 0.0, 0.01, 0.0, 0.0, 0.0];
        for i in 0..6 {
            assert!((d[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn composing_delta_reproduces_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let d = pose_delta(&a, &b);
            let angle = (d[3] * d[3] + d[4] * d[4] + d[5] * d[5]).sqrt();
            assert!(angle <= std::f64::consts::PI + 1e-12);
            let c = apply_delta(&a, &d);
            assert!((c.position() - b.position()).norm() < 1e-9);
            assert!(c.rotation().angle_to(&b.rotation()) < 1e-9);
        }
    }

    #[test]
    fn episode_delta_chain_reproduces_final_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut poses = vec![random_pose(&mut rng)];
        for _ in 0..300 {
            let step = [
                rng.random_range(-0.004..0.004),
                rng.random_range(-0.004..0.004),
                rng.random_range(-0.004..0.004),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ];
            let next = apply_delta(poses.last().unwrap(), &step);
            poses.push(next);
        }
        let deltas: Vec<DeltaPose> = poses.windows(2).map(|w| pose_delta(&w[0], &w[1])).collect();
        let mut p = poses[0];
        for d in &deltas {
            p = apply_delta(&p, d);
        }
        let last = poses.last().unwrap();
        assert!((p.position() - last.position()).norm() < 1e-6);
        assert!(p.rotation().angle_to(&last.rotation()) < 1e-6);
    }

    #[test]
    fn marker_to_tcp_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let marker = random_pose(&mut rng);
        assert_eq!(transform_marker_to_tcp(&marker, &Isometry3::identity()), marker);

        let offset = Vector3::new(0.0, 0.02, 0.11);
        let ext = Isometry3::translation(offset.x, offset.y, offset.z);
        let out = transform_marker_to_tcp(&marker, &ext);
        // homogeneous 4x4 product
        let m: Matrix4<f64> = marker.0.to_homogeneous() * ext.to_homogeneous();
        let expect = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        assert!((out.position() - expect).norm() < 1e-12);
        assert!((out.position() - (marker.position() + marker.rotation() * offset)).norm() < 1e-12);

        let ext = random_pose(&mut rng).0;
        let back = transform_marker_to_tcp(&transform_marker_to_tcp(&marker, &ext), &ext.inverse());
        assert!((back.position() - marker.position()).norm() < 1e-9);
        assert!(back.rotation().angle_to(&marker.rotation()) < 1e-9);
    }

    #[test]
    fn denormalized_quaternion_is_normalized() {
        let p = Pose::from_parts(Vector3::zeros(), Quaternion::new(1.01, 0.0, 0.0, 0.0));
        assert!((p.rotation().norm() - 1.0).abs() < 1e-12);
    }
}
