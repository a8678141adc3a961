//! Pinhole camera model, rigid poses and the point-cloud round trip
//! between depth maps and pixel coordinates.
//!
//! Conventions:
//! * integer pixel `(u, v)` sits at continuous coordinate `(u, v)`;
//! * poses are camera-to-world;
//! * everything here is `f64`.

mod raster;

pub use raster::{DepthMap, ImageBuffer};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

/// Points at or closer than this many meters in front of the camera are not
/// projectable.
pub const Z_MIN: f64 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::config(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image dimensions must be nonzero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Parses `fx fy cx cy width height`.
    pub fn parse(text: &str) -> Result<Self> {
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::config(format!(
                "intrinsics need 6 fields `fx fy cx cy width height`, found {}",
                fields.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::config(format!("bad intrinsics value {s:?}: {e}")))
        };
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::config(format!("bad image dimension {s:?}: {e}")))
        };
        Self::new(
            num(fields[0])?,
            num(fields[1])?,
            num(fields[2])?,
            num(fields[3])?,
            dim(fields[4])?,
            dim(fields[5])?,
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    /// Tolerance for the orthonormality and determinant checks.
    pub const ROTATION_TOLERANCE: f64 = 1e-9;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about `axis`, followed by translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
        };
        Self { rotation, translation }
    }

    pub fn validate(&self) -> Result<()> {
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::config("pose contains non-finite entries"));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if ortho_err > Self::ROTATION_TOLERANCE || (det - 1.0).abs() > Self::ROTATION_TOLERANCE {
            return Err(Error::config(format!(
                "rotation is not proper orthonormal (|RᵀR - I|max = {ortho_err:e}, det = {det})"
            )));
        }
        Ok(())
    }

    /// `R·p + t`.
    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Parses 12 numbers, row-major `[R | t]`.
    pub fn parse(text: &str) -> Result<Self> {
        let vals = text
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::config(format!("bad pose value {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 12 {
            return Err(Error::config(format!(
                "pose needs 12 values (row-major 3x4), found {}",
                vals.len()
            )));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        Self::new(rotation, translation)
    }

    pub fn to_text(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        let row = |i: usize| format!("{} {} {} {}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
        format!("{} {} {}\n", row(0), row(1), row(2))
    }
}

/// Transform taking coordinates in the `source` camera frame to the `target`
/// camera frame: `R = R_tᵀ R_s`, `t = R_tᵀ (t_s - t_t)`.
pub fn relative_pose(source: &RigidPose, target: &RigidPose) -> RigidPose {
    let rt = target.rotation.transpose();
    RigidPose {
        rotation: rt * source.rotation,
        translation: rt * (source.translation - target.translation),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    /// Row-major index of the pixel this point came from.
    pub pixel: usize,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Continuous pixel position plus camera-frame depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

fn check_dims(what: &str, w: usize, h: usize, k: &CameraIntrinsics) -> Result<()> {
    if w != k.width || h != k.height {
        return Err(Error::config(format!(
            "{what} is {w}x{h} but intrinsics describe {}x{}",
            k.width, k.height
        )));
    }
    Ok(())
}

/// Lifts every valid depth pixel to a camera-frame point.
pub fn unproject(depth: &DepthMap, rgb: &ImageBuffer, k: &CameraIntrinsics) -> Result<PointCloud> {
    check_dims("depth map", depth.width(), depth.height(), k)?;
    check_dims("image", rgb.width(), rgb.height(), k)?;
    let mut points = Vec::with_capacity(depth.valid_count());
    for y in 0..k.height {
        for x in 0..k.width {
            let Some(z) = depth.get(x, y) else { continue };
            points.push(CloudPoint {
                position: unproject_pixel(x as f64, y as f64, z as f64, k),
                pixel: y * k.width + x,
                color: rgb.pixel(x, y),
            });
        }
    }
    Ok(PointCloud { points })
}

/// `((u - cx) z / fx, (v - cy) z / fy, z)`.
#[inline]
pub fn unproject_pixel(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
}

pub fn transform_points(pc: &PointCloud, rel: &RigidPose) -> PointCloud {
    PointCloud {
        points: pc
            .points
            .iter()
            .map(|p| CloudPoint {
                position: rel.apply(&p.position),
                ..*p
            })
            .collect(),
    }
}

/// Projects a camera-frame point; `None` when `z <= Z_MIN`.
#[inline]
pub fn project(point: &Vector3<f64>, k: &CameraIntrinsics) -> Option<Projection> {
    let z = point.z;
    if z.is_nan() || z <= Z_MIN {
        return None;
    }
    Some(Projection {
        u: k.fx * point.x / z + k.cx,
        v: k.fy * point.y / z + k.cy,
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap()
    }

    fn single_pixel_depth(k: &CameraIntrinsics, x: usize, y: usize, z: f32) -> DepthMap {
        let mut values = vec![0.0; k.pixel_count()];
        let mut valid = vec![false; k.pixel_count()];
        values[y * k.width + x] = z;
        valid[y * k.width + x] = true;
        DepthMap::new(k.width, k.height, values, valid).unwrap()
    }

    #[test]
    fn principal_point_lies_on_optical_axis() {
        let k = k100();
        let d = single_pixel_depth(&k, 32, 32, 3.0);
        let pc = unproject(&d, &ImageBuffer::zeros(64, 64), &k).unwrap();
        assert_eq!(pc.points.len(), 1);
        assert_eq!(pc.points[0].position, Vector3::new(0.0, 0.0, 3.0));
        assert_eq!(pc.points[0].pixel, 32 * 64 + 32);
    }

    #[test]
    fn unproject_off_axis_pixel() {
        let k = k100();
        let d = single_pixel_depth(&k, 42, 32, 2.0);
        let pc = unproject(&d, &ImageBuffer::zeros(64, 64), &k).unwrap();
        let p = pc.points[0].position;
        assert!((p - Vector3::new(0.2, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn all_invalid_gives_empty_cloud() {
        let k = k100();
        let pc = unproject(&DepthMap::empty(64, 64), &ImageBuffer::zeros(64, 64), &k).unwrap();
        assert!(pc.is_empty());
    }

    #[test]
    fn unproject_rejects_dimension_mismatch() {
        let k = k100();
        let err = unproject(&DepthMap::empty(32, 64), &ImageBuffer::zeros(64, 64), &k);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn project_examples() {
        let k = k100();
        let p = project(&Vector3::new(0.0, 0.0, 3.0), &k).unwrap();
        assert_eq!((p.u, p.v, p.z), (32.0, 32.0, 3.0));
        let p = project(&Vector3::new(0.2, 0.0, 2.0), &k).unwrap();
        assert!((p.u - 42.0).abs() < 1e-12 && p.v == 32.0 && p.z == 2.0);
        assert!(project(&Vector3::new(0.0, 0.0, 0.0), &k).is_none());
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &k).is_none());
        assert!(project(&Vector3::new(1.0, 0.0, Z_MIN), &k).is_none());
    }

    #[test]
    fn relative_pose_examples() {
        let a = RigidPose::from_axis_angle(Vector3::new(0.3, 1.0, -0.2), 0.4, Vector3::new(1.0, 2.0, 3.0));
        let same = relative_pose(&a, &a);
        assert!((same.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(same.translation.norm() < 1e-9);

        let src = RigidPose::identity();
        let tgt = RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let rel = relative_pose(&src, &tgt);
        assert_eq!(rel.translation, Vector3::new(-1.0, 0.0, 0.0));

        let b = RigidPose::from_axis_angle(Vector3::new(-1.0, 0.2, 0.5), 0.1, Vector3::new(0.0, -1.0, 0.5));
        let round = relative_pose(&b, &a).compose(&relative_pose(&a, &b));
        assert!((round.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(round.translation.norm() < 1e-9);
    }

    #[test]
    fn transform_examples() {
        let pc = PointCloud {
            points: vec![CloudPoint {
                position: Vector3::new(0.0, 0.0, 2.0),
                pixel: 5,
                color: [0.1, 0.2, 0.3],
            }],
        };
        assert_eq!(transform_points(&pc, &RigidPose::identity()), pc);
        let moved = transform_points(&pc, &RigidPose::from_translation(Vector3::new(0.0, 0.0, -1.0)));
        assert_eq!(moved.points[0].position, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(moved.points[0].pixel, 5);
        assert_eq!(moved.points[0].color, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, -0.1, 1.0, 4, 4).is_err());
    }

    #[test]
    fn improper_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(2, 2)] = -1.0;
        assert!(RigidPose::new(r, Vector3::zeros()).is_err());
        assert!(RigidPose::new(Matrix3::identity() * 1.001, Vector3::zeros()).is_err());
    }

    #[test]
    fn text_formats_round_trip_exactly() {
        let k = CameraIntrinsics::new(123.456, 98.7, 31.5, 12.25, 64, 48).unwrap();
        assert_eq!(CameraIntrinsics::parse(&k.to_text()).unwrap(), k);
        let p = RigidPose::from_axis_angle(Vector3::new(0.1, 0.7, 0.3), 0.05, Vector3::new(0.1, -0.2, 1.0 / 3.0));
        assert_eq!(RigidPose::parse(&p.to_text()).unwrap(), p);
        assert!(RigidPose::parse("1 0 0 0 0 1 0 0 0 0 1").is_err());
    }

    fn arb_pose() -> impl Strategy<Value = RigidPose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.0f64..3.0,
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_map(|(axis, angle, t)| RigidPose::from_axis_angle(Vector3::from(axis), angle, Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn rigid_transform_preserves_distances(
            pose in arb_pose(),
            pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 2..12),
        ) {
            let pc = PointCloud {
                points: pts.iter().enumerate().map(|(i, p)| CloudPoint {
                    position: Vector3::from(*p), pixel: i, color: [0.0; 3],
                }).collect(),
            };
            let moved = transform_points(&pc, &pose);
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    let before = (pc.points[i].position - pc.points[j].position).norm();
                    let after = (moved.points[i].position - moved.points[j].position).norm();
                    prop_assert!((before - after).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn self_relative_pose_is_identity(pose in arb_pose()) {
            let rel = relative_pose(&pose, &pose);
            prop_assert!((rel.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(rel.translation.norm() < 1e-9);
        }

        #[test]
        fn identity_round_trip(x in 0usize..64, y in 0usize..48, z in 0.01f64..100.0) {
            let k = CameraIntrinsics::new(57.3, 61.0, 30.5, 22.0, 64, 48).unwrap();
            let p = RigidPose::identity().apply(&unproject_pixel(x as f64, y as f64, z, &k));
            let pr = project(&p, &k).unwrap();
            prop_assert!((pr.u - x as f64).abs() < 1e-9);
            prop_assert!((pr.v - y as f64).abs() < 1e-9);
            prop_assert!((pr.z - z).abs() < 1e-9);
        }
    }
}
