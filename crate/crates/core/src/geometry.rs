//! Rigid transforms and the rectified stereo camera model.
//!
//! `Transform` follows the `T_ab` convention: it maps coordinates expressed
//! in frame `b` into frame `a`, so `T_ac = T_ab.compose(&T_bc)`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3, SVD};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Angle of a rotation matrix; atan2 keeps full precision near 0 and π.
fn angle_of(r: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    s.atan2((r.trace() - 1.0) / 2.0)
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self::new(Matrix3::identity(), Vector3::from(t))
    }

    /// Rotation by `angle` radians about `axis` followed by translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rot = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
        };
        Self::new(rot, t)
    }

    /// Exponential-map style constructor from a rotation vector.
    pub fn from_rotation_vector(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self::new(*Rotation3::new(omega).matrix(), t)
    }

    /// Rotation about the camera's vertical (y) axis.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self::from_axis_angle(Vector3::y(), yaw, t)
    }

    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Squared Euclidean norm of the translation (metres²).
    pub fn sq_translation_distance(&self) -> f64 {
        self.translation.norm_squared()
    }

    /// Projects the rotation back onto SO(3) (nearest orthogonal matrix).
    pub fn renormalized(&self) -> Transform {
        let svd = SVD::new(self.rotation, true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = (u * vt).determinant().signum();
        Transform {
            rotation: u * fix * vt,
            translation: self.translation,
        }
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        angle_of(&self.rotation)
    }

    /// Rotation angle (rad) and translation distance (m) of `self⁻¹·other`.
    pub fn error_to(&self, other: &Transform) -> (f64, f64) {
        let rot = self.rotation.transpose() * other.rotation;
        (angle_of(&rot), (self.translation - other.translation).norm())
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Transform> {
        if v.len() != 16 {
            return Err(Error::BadGeometry(format!(
                "transform matrix needs 16 entries, got {}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::BadGeometry("non-finite transform entry".into()));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Ok(Transform::new(rotation, translation))
    }
}

#[derive(Serialize, Deserialize)]
struct TransformJson {
    matrix: Vec<f64>,
}

impl Serialize for Transform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TransformJson {
            matrix: self.to_row_major().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Transform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = TransformJson::deserialize(d)?;
        Transform::from_row_major(&raw.matrix).map_err(serde::de::Error::custom)
    }
}

/// Rectified stereo pair intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoCamera {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    /// Baseline in metres.
    pub b: f64,
    pub width: usize,
    pub height: usize,
}

impl StereoCamera {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64, b: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fu,
            fv,
            cu,
            cv,
            b,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fu > 0.0 && self.fv > 0.0 && self.b > 0.0) {
            return Err(Error::InvalidConfig(
                "camera focal lengths and baseline must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera image size must be non-zero".into()));
        }
        let inside = |c: f64, n: usize| c >= 0.0 && c <= n as f64;
        if !inside(self.cu, self.width) || !inside(self.cv, self.height) {
            return Err(Error::InvalidConfig("principal point outside image".into()));
        }
        Ok(())
    }

    /// `[u_l, v_l, d]` for a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        let z = p.z;
        if !(z > 0.0) {
            return Err(Error::NonPositiveDepth(z));
        }
        Ok(Vector3::new(
            self.fu * p.x / z + self.cu,
            self.fv * p.y / z + self.cv,
            self.fu * self.b / z,
        ))
    }

    /// Inverse stereo model: `(b/d)·[u − c_u, (f_u/f_v)(v − c_v), f_u]`.
    pub fn backproject(&self, y: &Vector3<f64>) -> Result<Vector3<f64>> {
        let d = y.z;
        if !(d > 0.0) {
            return Err(Error::NonPositiveDisparity(d));
        }
        let s = self.b / d;
        Ok(Vector3::new(
            s * (y.x - self.cu),
            s * (self.fu / self.fv) * (y.y - self.cv),
            s * self.fu,
        ))
    }

    /// Jacobian of `backproject` with respect to `(u, v, d)`, columns in that order.
    pub fn backproject_jacobian(&self, y: &Vector3<f64>) -> Matrix3<f64> {
        let d = y.z;
        let s = self.b / d;
        let p = Vector3::new(
            s * (y.x - self.cu),
            s * (self.fu / self.fv) * (y.y - self.cv),
            s * self.fu,
        );
        let dp_dd = -p / d;
        Matrix3::new(
            s,
            0.0,
            dp_dd.x,
            0.0,
            s * self.fu / self.fv,
            dp_dd.y,
            0.0,
            0.0,
            dp_dd.z,
        )
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn cam() -> StereoCamera {
        StereoCamera::new(100.0, 100.0, 64.0, 48.0, 0.25, 128, 96).unwrap()
    }

    fn arb_transform() -> impl Strategy<Value = Transform> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-10.0f64..10.0),
        )
            .prop_map(|(w, t)| Transform::from_rotation_vector(Vector3::from(w), Vector3::from(t)))
    }

    #[test]
    fn compose_trivial_cases() {
        let t = Transform::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.7, Vector3::new(1.0, -2.0, 3.0));
        let c = t.compose(&Transform::identity());
        assert!((c.to_matrix() - t.to_matrix()).abs().max() < 1e-15);
        let id = t.compose(&t.inverse());
        assert!((id.to_matrix() - Matrix4::identity()).abs().max() < 1e-9);
        let a = Transform::from_translation([1.0, 0.0, 0.0]);
        let b = Transform::from_translation([0.0, 2.0, 0.0]);
        assert_eq!(a.compose(&b).translation, Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn inverse_trivial_cases() {
        assert_eq!(Transform::identity().inverse(), Transform::identity());
        let t = Transform::from_translation([1.0, 2.0, 3.0]).inverse();
        assert_eq!(t.translation, Vector3::new(-1.0, -2.0, -3.0));
    }

    #[test]
    fn sq_translation_distance_examples() {
        assert_eq!(Transform::identity().sq_translation_distance(), 0.0);
        assert_eq!(Transform::from_translation([3.0, 4.0, 0.0]).sq_translation_distance(), 25.0);
        let d = Transform::from_translation([0.2, 0.0, 0.0]).sq_translation_distance();
        assert!((d - 0.04).abs() < 1e-15);
    }

    #[test]
    fn apply_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Transform::identity().apply(&p), p);
        let rz = Transform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let q = rz.apply(&Vector3::x());
        assert!((q - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn project_examples() {
        let c = cam();
        let y = c.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(y, Vector3::new(64.0, 48.0, 25.0));
        let y = c.project(&Vector3::new(0.5, -0.25, 2.0)).unwrap();
        assert!((y - Vector3::new(89.0, 35.5, 12.5)).norm() < 1e-12);
        assert!(matches!(
            c.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn backproject_examples() {
        let c = cam();
        let p = c.backproject(&Vector3::new(64.0, 48.0, 25.0)).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        assert!(matches!(
            c.backproject(&Vector3::new(10.0, 10.0, 0.0)),
            Err(Error::NonPositiveDisparity(_))
        ));
    }

    #[test]
    fn backproject_jacobian_matches_finite_differences() {
        let c = StereoCamera::new(90.0, 110.0, 60.0, 50.0, 0.3, 128, 96).unwrap();
        let y = Vector3::new(30.5, 70.25, 6.5);
        let j = c.backproject_jacobian(&y);
        let h = 1e-6;
        for k in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[k] += h;
            ym[k] -= h;
            let fd = (c.backproject(&yp).unwrap() - c.backproject(&ym).unwrap()) / (2.0 * h);
            assert!((fd - j.column(k)).norm() < 1e-6, "column {k}");
        }
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        assert!(StereoCamera::new(0.0, 100.0, 64.0, 48.0, 0.25, 128, 96).is_err());
        assert!(StereoCamera::new(100.0, 100.0, 200.0, 48.0, 0.25, 128, 96).is_err());
        assert!(StereoCamera::new(100.0, 100.0, 64.0, 48.0, -1.0, 128, 96).is_err());
    }

    #[test]
    fn transform_json_layout() {
        let t = Transform::from_translation([1.0, 2.0, 3.0]);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"matrix":[1.0,0.0,0.0,1.0,0.0,1.0,0.0,2.0,0.0,0.0,1.0,3.0,0.0,0.0,0.0,1.0]}"#
        );
        let back: Transform = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Transform>(r#"{"matrix":[1.0]}"#).is_err());
    }

    #[test]
    fn renormalize_repairs_drift() {
        let mut t = Transform::identity();
        let step = Transform::from_rotation_vector(Vector3::new(0.01, 0.02, -0.015), Vector3::new(0.1, 0.0, 0.5));
        for _ in 0..5000 {
            t = t.compose(&step);
        }
        let r = t.renormalized();
        assert!(r.orthonormality_error() < 1e-12);
        assert!((r.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_inverse(t in arb_transform()) {
            let id = t.compose(&t.inverse());
            prop_assert!((id.to_matrix() - Matrix4::identity()).abs().max() < 1e-9);
        }

        #[test]
        fn compose_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.to_matrix() - r.to_matrix()).abs().max() < 1e-9);
            prop_assert!(l.orthonormality_error() < 1e-9);
        }

        #[test]
        fn apply_distributes(a in arb_transform(), b in arb_transform(), p in prop::array::uniform3(-5.0f64..5.0)) {
            let p = Vector3::from(p);
            let lhs = a.compose(&b).apply(&p);
            let rhs = a.apply(&b.apply(&p));
            prop_assert!((lhs - rhs).norm() < 1e-9);
            let back = a.inverse().apply(&a.apply(&p));
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn backproject_then_project(u in 0.0f64..127.0, v in 0.0f64..95.0, d in 0.05f64..120.0) {
            let c = cam();
            let y = Vector3::new(u, v, d);
            let back = c.project(&c.backproject(&y).unwrap()).unwrap();
            prop_assert!((back - y).abs().max() < 1e-9);
        }

        #[test]
        fn project_then_backproject(x in -20.0f64..20.0, y in -20.0f64..20.0, z in 0.01f64..50.0) {
            let c = cam();
            let p = Vector3::new(x, y, z);
            let back = c.backproject(&c.project(&p).unwrap()).unwrap();
            prop_assert!((back - p).abs().max() < 1e-9 * p.norm().max(1.0));
        }
    }
}
