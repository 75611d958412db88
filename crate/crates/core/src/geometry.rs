//! Pinhole cameras, rays and stratified sampling along rays.
//!
//! Pixel coordinates are continuous: the integer pixel `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)` and its center is `(col + 0.5, row + 0.5)`.
//! The camera frame follows the usual vision convention (x right, y down,
//! z forward).

use nalgebra::{Matrix3, Matrix2x3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;
const MIN_PROJECTION_DEPTH: f64 = 1e-9;

/// Rigid world-to-camera transform `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if off > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::input(format!(
                "rotation is not a proper orthonormal matrix (|RᵀR - I| = {off:e}, det = {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::input("pose translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Pose of a camera centered at `center` with the given camera-to-world
    /// orientation expressed as a world-to-camera rotation.
    pub fn from_center(rotation: Matrix3<f64>, center: Vec3) -> Result<Self> {
        Self::new(rotation, -(rotation * center))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Pinhole camera with square pixels and no distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    focal: f64,
    principal: Vec2,
    width: usize,
    height: usize,
    pose: Pose,
}

impl CameraModel {
    pub fn new(focal: f64, principal: Vec2, width: usize, height: usize, pose: Pose) -> Result<Self> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::input(format!("focal length must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::input("image size must be non-zero"));
        }
        if !(0.0..=width as f64).contains(&principal.x) || !(0.0..=height as f64).contains(&principal.y) {
            return Err(Error::input(format!(
                "principal point ({}, {}) outside the {width}x{height} image",
                principal.x, principal.y
            )));
        }
        Ok(Self {
            focal,
            principal,
            width,
            height,
            pose,
        })
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn principal(&self) -> Vec2 {
        self.principal
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn with_pose(&self, pose: Pose) -> Self {
        Self { pose, ..*self }
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        (0.0..=self.width as f64).contains(&pixel.x) && (0.0..=self.height as f64).contains(&pixel.y)
    }

    /// Continuous coordinate of the center of integer pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> Vec2 {
        Vec2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Pinhole projection of a world point (the operator Π of the flow loss).
    pub fn project(&self, point: &Vec3) -> Result<Vec2> {
        let pc = self.pose.world_to_camera(point);
        if !(pc.z > MIN_PROJECTION_DEPTH) {
            return Err(Error::DegenerateProjection { depth: pc.z });
        }
        Ok(Vec2::new(
            self.focal * pc.x / pc.z + self.principal.x,
            self.focal * pc.y / pc.z + self.principal.y,
        ))
    }

    /// Projection together with its 2x3 Jacobian with respect to the world point.
    pub fn project_with_jacobian(&self, point: &Vec3) -> Result<(Vec2, Matrix2x3<f64>)> {
        let pc = self.pose.world_to_camera(point);
        if !(pc.z > MIN_PROJECTION_DEPTH) {
            return Err(Error::DegenerateProjection { depth: pc.z });
        }
        let inv_z = 1.0 / pc.z;
        let f = self.focal;
        let uv = Vec2::new(f * pc.x * inv_z + self.principal.x, f * pc.y * inv_z + self.principal.y);
        let d_cam = Matrix2x3::new(
            f * inv_z,
            0.0,
            -f * pc.x * inv_z * inv_z,
            0.0,
            f * inv_z,
            -f * pc.y * inv_z * inv_z,
        );
        Ok((uv, d_cam * self.pose.rotation))
    }

    /// Ray through a continuous pixel coordinate.
    pub fn generate_ray(&self, pixel: &Vec2, z_near: f64, z_far: f64) -> Result<Ray> {
        if !self.contains(pixel) {
            return Err(Error::input(format!(
                "pixel ({}, {}) outside the {}x{} image",
                pixel.x, pixel.y, self.width, self.height
            )));
        }
        let dir_cam = Vec3::new(
            (pixel.x - self.principal.x) / self.focal,
            (pixel.y - self.principal.y) / self.focal,
            1.0,
        );
        let direction = (self.pose.rotation.transpose() * dir_cam).normalize();
        Ray::new(self.pose.center(), direction, z_near, z_far)
    }

    pub fn generate_rays(&self, pixels: &[Vec2], z_near: f64, z_far: f64) -> Result<Vec<Ray>> {
        pixels.iter().map(|p| self.generate_ray(p, z_near, z_far)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    focal: f64,
    principal: [f64; 2],
    width: usize,
    height: usize,
    /// Row-major world-to-camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        let pose = Pose::new(rot, Vec3::from(r.translation))?;
        CameraModel::new(r.focal, Vec2::from(r.principal), r.width, r.height, pose)
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        let r = c.pose.rotation;
        CameraRecord {
            focal: c.focal,
            principal: [c.principal.x, c.principal.y],
            width: c.width,
            height: c.height,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: c.pose.translation.into(),
        }
    }
}

/// Half-line `origin + z * direction` restricted to `[z_near, z_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub z_near: f64,
    pub z_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, z_near: f64, z_far: f64) -> Result<Self> {
        if ((direction.norm() - 1.0).abs()) > 1e-9 {
            return Err(Error::input("ray direction must be unit length"));
        }
        if !(z_near > 0.0 && z_near < z_far) {
            return Err(Error::input(format!("need 0 < z_near < z_far, got [{z_near}, {z_far}]")));
        }
        Ok(Self {
            origin,
            direction,
            z_near,
            z_far,
        })
    }

    pub fn at(&self, z: f64) -> Vec3 {
        self.origin + self.direction * z
    }
}

/// How sample depths are placed inside their bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratification {
    /// Bin midpoints; used for evaluation.
    Midpoint,
    /// One uniformly jittered sample per bin, reproducible from the seed.
    Jittered { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub z: f64,
    pub position: Vec3,
}

/// Place `count` samples in equal bins over `[z_near, z_far]`.
pub fn sample_along_ray(ray: &Ray, count: usize, strat: Stratification) -> Result<Vec<RaySample>> {
    let zs = sample_depths(ray.z_near, ray.z_far, count, strat)?;
    Ok(zs
        .into_iter()
        .map(|z| RaySample {
            z,
            position: ray.at(z),
        })
        .collect())
}

/// Sample depths only; shared by the batched training path.
pub fn sample_depths(z_near: f64, z_far: f64, count: usize, strat: Stratification) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::input(format!("need at least 2 samples per ray, got {count}")));
    }
    let width = (z_far - z_near) / count as f64;
    let zs = match strat {
        Stratification::Midpoint => (0..count).map(|k| z_near + (k as f64 + 0.5) * width).collect(),
        Stratification::Jittered { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|k| {
                    // keep strictly inside the bin so depths stay strictly increasing
                    let u: f64 = rng.random_range(1e-6..1.0 - 1e-6);
                    z_near + (k as f64 + u) * width
                })
                .collect()
        }
    };
    Ok(zs)
}

/// Exposure level of a frame in the alternating schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureTag {
    Low,
    Mid,
    High,
}

impl ExposureTag {
    pub const ALL: [ExposureTag; 3] = [ExposureTag::Low, ExposureTag::Mid, ExposureTag::High];

    pub fn as_str(self) -> &'static str {
        match self {
            ExposureTag::Low => "low",
            ExposureTag::Mid => "mid",
            ExposureTag::High => "high",
        }
    }
}

impl std::fmt::Display for ExposureTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExposureTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(ExposureTag::Low),
            "mid" => Ok(ExposureTag::Mid),
            "high" => Ok(ExposureTag::High),
            other => Err(Error::input(format!("unknown exposure tag `{other}`"))),
        }
    }
}

/// One captured frame.
///
/// `frame_index` is the position in the original sequence and `time` the
/// normalized time `frame_index / (N - 1)`; both survive frame subsetting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_index: usize,
    pub time: f64,
    pub camera: CameraModel,
    pub exposure_tag: ExposureTag,
    /// Relative linear exposure of the capture.
    pub exposure_scale: f64,
}

/// Rotation about an arbitrary axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(a), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cam100() -> CameraModel {
        CameraModel::new(100.0, Vec2::new(50.0, 50.0), 100, 100, Pose::identity()).unwrap()
    }

    #[test]
    fn on_axis_ray() {
        let r = cam100().generate_ray(&Vec2::new(50.0, 50.0), 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(r.direction, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn off_axis_ray_matches_pinhole() {
        let r = cam100().generate_ray(&Vec2::new(75.0, 50.0), 1.0, 2.0).unwrap();
        let expect = Vec3::new(0.25, 0.0, 1.0) / (1.0f64 + 0.0625).sqrt();
        assert_abs_diff_eq!(r.direction, expect, epsilon = 1e-15);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        assert!(matches!(
            cam100().generate_ray(&Vec2::new(-1.0, 0.0), 1.0, 2.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn projection_examples() {
        let c = cam100();
        assert_abs_diff_eq!(c.project(&Vec3::new(0.0, 0.0, 2.0)).unwrap(), Vec2::new(50.0, 50.0));
        assert_abs_diff_eq!(c.project(&Vec3::new(0.5, 0.0, 2.0)).unwrap(), Vec2::new(75.0, 50.0));
        assert!(matches!(
            c.project(&Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::DegenerateProjection { .. })
        ));
    }

    #[test]
    fn midpoint_samples() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 1.0, 2.0).unwrap();
        let s = sample_along_ray(&ray, 2, Stratification::Midpoint).unwrap();
        assert_abs_diff_eq!(s[0].z, 1.25);
        assert_abs_diff_eq!(s[1].z, 1.75);
        assert_abs_diff_eq!(s[1].position, Vec3::new(0.0, 0.0, 1.75));
        assert!(sample_along_ray(&ray, 1, Stratification::Midpoint).is_err());
    }

    #[test]
    fn jittered_samples_replay_and_stay_in_bins() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 1.0, 3.0).unwrap();
        let a = sample_along_ray(&ray, 8, Stratification::Jittered { seed: 7 }).unwrap();
        let b = sample_along_ray(&ray, 8, Stratification::Jittered { seed: 7 }).unwrap();
        assert_eq!(a, b);
        for (k, s) in a.iter().enumerate() {
            let lo = 1.0 + k as f64 * 0.25;
            assert!(s.z > lo && s.z < lo + 0.25);
        }
    }

    #[test]
    fn rejects_improper_rotation() {
        let flip = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(flip, Vec3::zeros()).is_err());
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let pose = Pose::from_center(axis_angle(&Vec3::new(0.3, 1.0, 0.2), 0.2), Vec3::new(0.1, -0.2, 0.0)).unwrap();
        let cam = CameraModel::new(80.0, Vec2::new(32.0, 30.0), 64, 64, pose).unwrap();
        let p = Vec3::new(0.2, 0.1, 3.0);
        let (_, jac) = cam.project_with_jacobian(&p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut dp = Vec3::zeros();
            dp[k] = h;
            let fd = (cam.project(&(p + dp)).unwrap() - cam.project(&(p - dp)).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(fd, jac.column(k).into_owned(), epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn reprojection_of_ray_points(u in 0.5f64..63.5, v in 0.5f64..63.5, z in 1.0f64..5.0,
                                      ax in -1.0f64..1.0, ang in -0.3f64..0.3, cx in -0.5f64..0.5) {
            let axis = Vec3::new(ax, 1.0, 0.5);
            let pose = Pose::from_center(axis_angle(&axis, ang), Vec3::new(cx, 0.1, -0.2)).unwrap();
            let cam = CameraModel::new(70.0, Vec2::new(32.0, 32.0), 64, 64, pose).unwrap();
            let ray = cam.generate_ray(&Vec2::new(u, v), 1.0, 6.0).unwrap();
            let p = cam.project(&ray.at(z)).unwrap();
            prop_assert!((p - Vec2::new(u, v)).norm() < 1e-6);
        }

        #[test]
        fn world_camera_round_trip(x in -5.0f64..5.0, y in -5.0f64..5.0, zz in -5.0f64..5.0, ang in -3.0f64..3.0) {
            let pose = Pose::from_center(axis_angle(&Vec3::new(1.0, 2.0, 3.0), ang), Vec3::new(0.3, -1.0, 2.0)).unwrap();
            let p = Vec3::new(x, y, zz);
            let back = pose.camera_to_world(&pose.world_to_camera(&p));
            prop_assert!((back - p).norm() < 1e-9);
        }
    }
}
