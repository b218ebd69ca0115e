//! Shape and pose value types, weak-perspective projection and the Euler
//! angle convention shared by the rest of the crate.
//!
//! Rotations follow `R = Rz(roll) · Ry(yaw) · Rx(pitch)` (right-handed,
//! intrinsic). Angles are radians everywhere inside the library; degrees only
//! appear at file and command-line boundaries.

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Matrix3, RowVector3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold on `|cos(yaw)|` below which the pitch/roll split is ambiguous.
pub const GIMBAL_EPS: f64 = 1e-6;

const MIN_ROW_NORM: f64 = 1e-12;

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}

/// Stacked 2D landmark coordinates `(u0, v0, u1, v1, ...)` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape2D {
    coords: Vec<f64>,
}

impl Shape2D {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "2D shape needs an even number of coordinates, got {}",
                coords.len()
            )));
        }
        check_finite(&coords, "2D shape")?;
        Ok(Self { coords })
    }

    pub fn zeros(landmarks: usize) -> Self {
        Self {
            coords: vec![0.0; 2 * landmarks],
        }
    }

    pub fn from_points<I: IntoIterator<Item = [f64; 2]>>(points: I) -> Result<Self> {
        Self::new(points.into_iter().flatten().collect())
    }

    /// Number of landmarks `D`.
    pub fn len(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.coords[2 * k], self.coords[2 * k + 1]]
    }

    pub fn set_point(&mut self, k: usize, p: [f64; 2]) {
        self.coords[2 * k] = p[0];
        self.coords[2 * k + 1] = p[1];
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.coords.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }

    /// Element-wise sum with a coordinate update of the same layout.
    pub fn add_update(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.coords.len() {
            return Err(Error::invalid(format!(
                "update length {} does not match shape length {}",
                delta.len(),
                self.coords.len()
            )));
        }
        Self::new(self.coords.iter().zip(delta).map(|(a, b)| a + b).collect())
    }
}

/// Stacked 3D model points `(x0, y0, z0, x1, ...)` in model units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape3D {
    coords: Vec<f64>,
}

impl Shape3D {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if !coords.len().is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "3D shape length {} is not a multiple of 3",
                coords.len()
            )));
        }
        check_finite(&coords, "3D shape")?;
        Ok(Self { coords })
    }

    pub fn from_points<I: IntoIterator<Item = [f64; 3]>>(points: I) -> Result<Self> {
        Self::new(points.into_iter().flatten().collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.coords[3 * k],
            self.coords[3 * k + 1],
            self.coords[3 * k + 2],
        )
    }

    pub fn points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.coords
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Head pose as Euler angles in radians, each canonicalized to `(-pi, pi]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseAngles {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
}

impl PoseAngles {
    pub fn new(pitch: f64, yaw: f64, roll: f64) -> Self {
        Self {
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
            roll: wrap_angle(roll),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_degrees(pitch: f64, yaw: f64, roll: f64) -> Self {
        Self::new(pitch.to_radians(), yaw.to_radians(), roll.to_radians())
    }

    /// `[pitch, yaw, roll]` in degrees.
    pub fn to_degrees(&self) -> [f64; 3] {
        [
            self.pitch.to_degrees(),
            self.yaw.to_degrees(),
            self.roll.to_degrees(),
        ]
    }

    /// `[pitch, yaw, roll]` in radians, the feature layout used by the regressors.
    pub fn as_array(&self) -> [f64; 3] {
        [self.pitch, self.yaw, self.roll]
    }

    pub fn is_finite(&self) -> bool {
        self.pitch.is_finite() && self.yaw.is_finite() && self.roll.is_finite()
    }
}

/// Scaled-orthographic camera: `[u; v] = M · p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakPerspectivePose {
    pub m: Matrix2x3<f64>,
    pub t: Vector2<f64>,
    pub scale: f64,
}

impl WeakPerspectivePose {
    /// Wraps an arbitrary 2x3 matrix without canonicalizing it. The scale is
    /// the mean of the two row norms.
    pub fn from_matrix(m: Matrix2x3<f64>, t: Vector2<f64>) -> Result<Self> {
        check_finite(m.as_slice(), "projection matrix")?;
        check_finite(t.as_slice(), "translation")?;
        let scale = 0.5 * (m.row(0).norm() + m.row(1).norm());
        if scale <= 0.0 {
            return Err(Error::invalid("projection matrix has zero scale"));
        }
        Ok(Self { m, t, scale })
    }

    /// Projects `m` to the nearest scaled rotation and keeps `t`.
    pub fn canonical(m: Matrix2x3<f64>, t: Vector2<f64>) -> Result<Self> {
        check_finite(t.as_slice(), "translation")?;
        let dec = angles_from_pose(&m)?;
        Ok(Self {
            m: dec.m,
            t,
            scale: dec.scale,
        })
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        self.m * p + self.t
    }

    /// Euler angles of the rotation encoded by `m`.
    pub fn angles(&self) -> Result<PoseAngles> {
        Ok(angles_from_pose(&self.m)?.angles)
    }
}

/// Per-landmark visibility probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityVector {
    probs: Vec<f64>,
}

impl VisibilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!(
                "visibility probability {bad} outside [0, 1]"
            )));
        }
        Ok(Self { probs })
    }

    /// Clamps every entry into `[0, 1]`; NaN becomes 0.
    pub fn clamped(probs: Vec<f64>) -> Self {
        Self {
            probs: probs
                .into_iter()
                .map(|p| if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) })
                .collect(),
        }
    }

    pub fn ones(landmarks: usize) -> Self {
        Self {
            probs: vec![1.0; landmarks],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

pub fn rotation_from_angles(angles: &PoseAngles) -> Matrix3<f64> {
    let (sp, cp) = angles.pitch.sin_cos();
    let (sy, cy) = angles.yaw.sin_cos();
    let (sr, cr) = angles.roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Extracts Euler angles from a proper rotation. The flag reports gimbal
/// proximity, in which case roll is pinned to zero and pitch absorbs the
/// remaining in-plane rotation.
pub fn angles_from_rotation(r: &Matrix3<f64>) -> (PoseAngles, bool) {
    let cos_yaw = r[(2, 1)].hypot(r[(2, 2)]);
    let yaw = (-r[(2, 0)]).atan2(cos_yaw);
    if cos_yaw < GIMBAL_EPS {
        // R = Ry(yaw) · Rx(pitch) with roll = 0.
        let pitch = (-r[(1, 2)]).atan2(r[(1, 1)]);
        (PoseAngles::new(pitch, yaw, 0.0), true)
    } else {
        let pitch = r[(2, 1)].atan2(r[(2, 2)]);
        let roll = r[(1, 0)].atan2(r[(0, 0)]);
        (PoseAngles::new(pitch, yaw, roll), false)
    }
}

/// Nearest proper rotation in Frobenius norm (orthogonal Procrustes with
/// determinant correction).
pub fn nearest_rotation(a: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = a.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numeric("SVD did not converge".into())),
    };
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        let smallest = svd.singular_values.imin();
        d[(smallest, smallest)] = -1.0;
    }
    Ok(u * d * v_t)
}

/// Result of decomposing a 2x3 projection matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseDecomposition {
    pub angles: PoseAngles,
    pub scale: f64,
    /// `scale` times the first two rows of `rotation`.
    pub m: Matrix2x3<f64>,
    pub rotation: Matrix3<f64>,
    pub gimbal: bool,
}

pub fn angles_from_pose(m: &Matrix2x3<f64>) -> Result<PoseDecomposition> {
    check_finite(m.as_slice(), "projection matrix")?;
    let n1 = m.row(0).norm();
    let n2 = m.row(1).norm();
    if n1 < MIN_ROW_NORM || n2 < MIN_ROW_NORM {
        return Err(Error::DegeneratePose(format!(
            "projection row norms ({n1:e}, {n2:e}) are too small"
        )));
    }
    let scale = 0.5 * (n1 + n2);
    let r1: RowVector3<f64> = m.row(0) / scale;
    let r2: RowVector3<f64> = m.row(1) / scale;
    let r3 = r1.cross(&r2);
    let stacked = Matrix3::from_rows(&[r1, r2, r3]);
    let rotation = nearest_rotation(&stacked)?;
    let (angles, gimbal) = angles_from_rotation(&rotation);
    if gimbal {
        log::debug!("pose decomposition near gimbal lock (yaw = {})", angles.yaw);
    }
    let canonical = Matrix2x3::from_rows(&[rotation.row(0) * scale, rotation.row(1) * scale]);
    Ok(PoseDecomposition {
        angles,
        scale,
        m: canonical,
        rotation,
        gimbal,
    })
}

pub fn pose_from_angles(
    angles: &PoseAngles,
    scale: f64,
    t: Vector2<f64>,
) -> Result<WeakPerspectivePose> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!(
            "scale must be positive, got {scale}"
        )));
    }
    if !angles.is_finite() {
        return Err(Error::invalid("pose angles must be finite"));
    }
    check_finite(t.as_slice(), "translation")?;
    let r = rotation_from_angles(angles);
    let m = Matrix2x3::from_rows(&[r.row(0) * scale, r.row(1) * scale]);
    Ok(WeakPerspectivePose { m, t, scale })
}

pub fn project_weak_perspective(pose: &WeakPerspectivePose, shape: &Shape3D) -> Result<Shape2D> {
    check_finite(pose.m.as_slice(), "projection matrix")?;
    check_finite(pose.t.as_slice(), "translation")?;
    let mut coords = Vec::with_capacity(2 * shape.len());
    for p in shape.points() {
        let q = pose.project_point(&p);
        coords.push(q.x);
        coords.push(q.y);
    }
    Shape2D::new(coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let angles = PoseAngles::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.4..1.4),
            rng.random_range(-3.0..3.0),
        );
        rotation_from_angles(&angles)
    }

    #[test]
    fn orthographic_projection_drops_depth() {
        let pose =
            WeakPerspectivePose::from_matrix(Matrix2x3::identity(), Vector2::zeros()).unwrap();
        let shape = Shape3D::new(vec![2.0, 3.0, 5.0]).unwrap();
        let out = project_weak_perspective(&pose, &shape).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn projection_scales_and_translates() {
        let pose =
            WeakPerspectivePose::from_matrix(Matrix2x3::identity() * 2.0, Vector2::new(1.0, 1.0))
                .unwrap();
        let shape = Shape3D::new(vec![1.0, 1.0, 0.0]).unwrap();
        let out = project_weak_perspective(&pose, &shape).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn projection_matches_rotate_then_drop_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let s: f64 = rng.random_range(0.1..10.0);
            let t = Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let pts: Vec<[f64; 3]> = (0..10)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ]
                })
                .collect();
            let shape = Shape3D::from_points(pts.clone()).unwrap();
            let m = Matrix2x3::from_rows(&[r.row(0) * s, r.row(1) * s]);
            let pose = WeakPerspectivePose::from_matrix(m, t).unwrap();
            let out = project_weak_perspective(&pose, &shape).unwrap();
            for (k, p) in pts.iter().enumerate() {
                // rotate, keep x/y, scale, translate
                let rotated = r * Vector3::new(p[0], p[1], p[2]);
                let expect = [s * rotated.x + t.x, s * rotated.y + t.y];
                let got = out.point(k);
                assert_abs_diff_eq!(got[0], expect[0], epsilon = 1e-12);
                assert_abs_diff_eq!(got[1], expect[1], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn projection_rejects_non_finite_pose() {
        let pose = WeakPerspectivePose {
            m: Matrix2x3::identity(),
            t: Vector2::new(f64::NAN, 0.0),
            scale: 1.0,
        };
        let shape = Shape3D::new(vec![0.0; 3]).unwrap();
        assert!(matches!(
            project_weak_perspective(&pose, &shape),
            Err(Error::InvalidInput(_))
        ));
        assert!(Shape3D::new(vec![0.0, f64::INFINITY, 1.0]).is_err());
        assert!(Shape2D::new(vec![0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn identity_angles_give_identity_projection() {
        let pose = pose_from_angles(&PoseAngles::zero(), 1.0, Vector2::zeros()).unwrap();
        assert_eq!(pose.m, Matrix2x3::identity());
    }

    #[test]
    fn pure_roll_quarter_turn() {
        let pose =
            pose_from_angles(&PoseAngles::new(0.0, 0.0, PI / 2.0), 3.0, Vector2::zeros()).unwrap();
        let row = pose.m.row(0) / pose.scale;
        assert_abs_diff_eq!(row[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(row[1], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(row[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        for s in [0.0, -1.0, f64::NAN] {
            assert!(pose_from_angles(&PoseAngles::zero(), s, Vector2::zeros()).is_err());
        }
    }

    #[test]
    fn identity_matrix_decomposes_to_zero_angles() {
        let dec = angles_from_pose(&Matrix2x3::identity()).unwrap();
        assert_eq!(dec.angles, PoseAngles::zero());
        assert_abs_diff_eq!(dec.scale, 1.0);
        assert!(!dec.gimbal);
    }

    #[test]
    fn yaw_thirty_degrees_round_trips() {
        let yaw = 30f64.to_radians();
        let pose =
            pose_from_angles(&PoseAngles::new(0.0, yaw, 0.0), 2.5, Vector2::zeros()).unwrap();
        let dec = angles_from_pose(&pose.m).unwrap();
        assert_abs_diff_eq!(dec.angles.yaw, yaw, epsilon = 1e-9);
    }

    #[test]
    fn thousand_random_angles_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lim = 85f64.to_radians();
        for _ in 0..1000 {
            let h = PoseAngles::new(
                rng.random_range(-lim..lim),
                rng.random_range(-lim..lim),
                rng.random_range(-PI..PI),
            );
            let s = rng.random_range(0.01..100.0);
            let pose = pose_from_angles(&h, s, Vector2::zeros()).unwrap();
            let dec = angles_from_pose(&pose.m).unwrap();
            assert!(wrap_angle(dec.angles.pitch - h.pitch).abs() <= 1e-9);
            assert!(wrap_angle(dec.angles.yaw - h.yaw).abs() <= 1e-9);
            assert!(wrap_angle(dec.angles.roll - h.roll).abs() <= 1e-9);
            assert!((dec.scale - s).abs() <= 1e-9 * s);
        }
    }

    /// Polar factor by Newton iteration `X <- (X + X^-T) / 2`, with the sign
    /// fixed afterwards; independent of the SVD route.
    fn polar_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
        let mut x = *a;
        for _ in 0..100 {
            let inv_t = x.try_inverse().unwrap().transpose();
            x = 0.5 * (x + inv_t);
        }
        x
    }

    #[test]
    fn noisy_rows_project_to_procrustes_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let s = rng.random_range(0.5..5.0);
            let mut m = Matrix2x3::from_rows(&[r.row(0) * s, r.row(1) * s]);
            for v in m.iter_mut() {
                *v += 1e-3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let dec = angles_from_pose(&m).unwrap();
            let scale = 0.5 * (m.row(0).norm() + m.row(1).norm());
            let r1 = m.row(0) / scale;
            let r2 = m.row(1) / scale;
            let stacked = Matrix3::from_rows(&[r1, r2, r1.cross(&r2)]);
            let oracle = polar_rotation(&stacked);
            assert!(oracle.determinant() > 0.0);
            assert!((dec.rotation - oracle).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn reflected_input_still_yields_proper_rotation() {
        let a = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -0.5));
        let r = nearest_rotation(&a).unwrap();
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn gimbal_lock_is_flagged_and_roll_pinned() {
        let h = PoseAngles::new(0.3, PI / 2.0, 0.2);
        let pose = pose_from_angles(&h, 1.0, Vector2::zeros()).unwrap();
        let dec = angles_from_pose(&pose.m).unwrap();
        assert!(dec.gimbal);
        assert_eq!(dec.angles.roll, 0.0);
        // The rebuilt rotation still matches the input.
        let rebuilt = rotation_from_angles(&dec.angles);
        assert!((rebuilt - dec.rotation).abs().max() < 1e-6);
    }

    #[test]
    fn degenerate_rows_are_rejected() {
        let m = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            angles_from_pose(&m),
            Err(Error::DegeneratePose(_))
        ));
    }

    #[test]
    fn wrap_keeps_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(-7.0), -7.0 + 2.0 * PI, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn projection_is_linear_without_translation(
            seed in any::<u64>(),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_rotation(&mut rng);
            let s = rng.random_range(0.1..4.0);
            let m = Matrix2x3::from_rows(&[r.row(0) * s, r.row(1) * s]);
            let pose = WeakPerspectivePose::from_matrix(m, Vector2::zeros()).unwrap();
            let s1: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let p1 = project_weak_perspective(&pose, &Shape3D::new(s1).unwrap()).unwrap();
            let p2 = project_weak_perspective(&pose, &Shape3D::new(s2).unwrap()).unwrap();
            let pm = project_weak_perspective(&pose, &Shape3D::new(mix).unwrap()).unwrap();
            for i in 0..pm.as_slice().len() {
                let expect = a * p1.as_slice()[i] + b * p2.as_slice()[i];
                prop_assert!((pm.as_slice()[i] - expect).abs() < 1e-10);
            }
        }

        #[test]
        fn canonical_rows_are_orthonormal_up_to_scale(
            pitch in -1.4f64..1.4, yaw in -1.4f64..1.4, roll in -3.1f64..3.1,
            noise_seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let pose = pose_from_angles(&PoseAngles::new(pitch, yaw, roll), 2.0, Vector2::zeros()).unwrap();
            let mut m = pose.m;
            for v in m.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
            let dec = angles_from_pose(&m).unwrap();
            let r1 = dec.m.row(0) / dec.scale;
            let r2 = dec.m.row(1) / dec.scale;
            prop_assert!((r1.norm() - 1.0).abs() < 1e-10);
            prop_assert!((r2.norm() - 1.0).abs() < 1e-10);
            prop_assert!(r1.dot(&r2).abs() < 1e-10);
        }
    }
}
