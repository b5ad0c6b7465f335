//! Rigid-body math, the pinhole camera model and point-cloud primitives.
//!
//! Frame convention: the camera frame has +x pointing right in the image,
//! +y pointing down and +z pointing forward into the scene. All lengths are
//! meters; invalid depth is encoded as exactly `0.0`.

use nalgebra::{Matrix3, Point3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Pixel = Vector2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({u}, {v}) rejected: depth {depth} is not a valid positive depth")]
    RejectedPixel { u: f64, v: f64, depth: f64 },
    #[error("pixel ({u}, {v}) lies outside the {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("point with z = {z} lies behind the camera")]
    BehindCamera { z: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("degenerate model prior `{0}`: needs at least 4 non-coplanar vertices")]
    DegenerateModel(String),
}

/// A rigid transform: unit-quaternion rotation followed by a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseDoc", try_from = "PoseDoc")]
pub struct Pose6 {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Pose6 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose from a possibly unnormalized quaternion.
    pub fn new(rotation: Quaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::from_quaternion(rotation),
            translation,
        }
    }

    /// Keeps `rotation` bit for bit when it is already unit length within 1e-12.
    pub fn from_unit_quaternion(rotation: Quaternion<f64>, translation: Vec3) -> Self {
        if (rotation.norm() - 1.0).abs() <= 1e-12 {
            Self {
                rotation: UnitQuaternion::new_unchecked(rotation),
                translation,
            }
        } else {
            Self::new(rotation, translation)
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self::from_parts(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Rotation of `angle_rad` about `axis`, then translation.
    pub fn from_axis_angle(axis: Vec3, angle_rad: f64, translation: Vec3) -> Self {
        let rotation = match Unit::try_new(axis, 1e-15) {
            Some(axis) => UnitQuaternion::from_axis_angle(&axis, angle_rad),
            None => UnitQuaternion::identity(),
        };
        Self::from_parts(rotation, translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn with_translation(&self, translation: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose6) -> Pose6 {
        Pose6::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose6 {
        let inv = self.rotation.inverse();
        Pose6::from_parts(inv, -(inv * self.translation))
    }

    /// Quaternion as `[w, x, y, z]`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

#[derive(Serialize, Deserialize)]
struct PoseDoc {
    /// `[w, x, y, z]`
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl From<Pose6> for PoseDoc {
    fn from(p: Pose6) -> Self {
        PoseDoc {
            rotation: p.quaternion_wxyz(),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseDoc> for Pose6 {
    type Error = String;

    fn try_from(doc: PoseDoc) -> Result<Self, Self::Error> {
        let [w, x, y, z] = doc.rotation;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-12) || !q.norm().is_finite() {
            return Err("pose rotation quaternion must be nonzero and finite".into());
        }
        Ok(Pose6::new(q, Vec3::from(doc.translation)))
    }
}

pub fn compose_pose(a: &Pose6, b: &Pose6) -> Pose6 {
    a.compose(b)
}

pub fn invert_pose(a: &Pose6) -> Pose6 {
    a.inverse()
}

/// Translation error (meters) and geodesic rotation error (degrees) between two poses.
pub fn pose_error(a: &Pose6, b: &Pose6) -> (f64, f64) {
    let dt = (a.translation - b.translation).norm();
    let dot = a.rotation.coords.dot(&b.rotation.coords).abs().min(1.0);
    let angle = 2.0 * dot.acos();
    (dt, angle.to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
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

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, pixel: &Pixel) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    /// Unnormalized ray direction through a pixel, scaled so that `z == 1`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Lifts a pixel with metric depth into the camera frame.
pub fn back_project(pixel: &Pixel, depth: f64, k: &CameraIntrinsics) -> Result<Vec3, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::RejectedPixel {
            u: pixel.x,
            v: pixel.y,
            depth,
        });
    }
    if !k.contains(pixel) {
        return Err(GeometryError::PixelOutOfBounds {
            u: pixel.x,
            v: pixel.y,
            width: k.width,
            height: k.height,
        });
    }
    Ok(Vec3::new(
        (pixel.x - k.cx) * depth / k.fx,
        (pixel.y - k.cy) * depth / k.fy,
        depth,
    ))
}

pub fn project(point: &Vec3, k: &CameraIntrinsics) -> Result<Pixel, GeometryError> {
    if !(point.z > 0.0) {
        return Err(GeometryError::BehindCamera { z: point.z });
    }
    Ok(Pixel::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    pub fn as_nalgebra_points(&self) -> Vec<Point3<f64>> {
        self.points.iter().map(|p| Point3::from(*p)).collect()
    }
}

pub fn transform_points(pose: &Pose6, cloud: &PointCloud) -> PointCloud {
    let r = pose.rotation_matrix();
    let t = pose.translation;
    PointCloud::new(cloud.points.iter().map(|p| r * p + t).collect())
}

/// A 3D model of a perceivable object, expressed in its own model frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrior {
    pub model_id: String,
    pub vertices: Vec<Vec3>,
    pub grasp_point: Vec3,
    pub place_point: Option<Vec3>,
}

impl ModelPrior {
    pub fn new(
        model_id: impl Into<String>,
        vertices: Vec<Vec3>,
        grasp_point: Vec3,
        place_point: Option<Vec3>,
    ) -> Result<Self, GeometryError> {
        let prior = Self {
            model_id: model_id.into(),
            vertices,
            grasp_point,
            place_point,
        };
        if !prior.is_pose_estimable() {
            return Err(GeometryError::DegenerateModel(prior.model_id));
        }
        Ok(prior)
    }

    /// At least four vertices with a full-rank covariance.
    pub fn is_pose_estimable(&self) -> bool {
        if self.vertices.len() < 4 {
            return false;
        }
        let n = self.vertices.len() as f64;
        let mean = self.vertices.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
        let mut cov = Matrix3::zeros();
        for p in &self.vertices {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = cov.symmetric_eigenvalues();
        let max = eig.max();
        max > 0.0 && eig.min() > max * 1e-10
    }

    pub fn centroid(&self) -> Vec3 {
        self.vertices.iter().fold(Vec3::zeros(), |a, p| a + p) / self.vertices.len().max(1) as f64
    }
}
