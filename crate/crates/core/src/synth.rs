//! Analytic dynamic HDR scenes with exact ground truth.
//!
//! Scenes are built from hard emissive primitives, so every pixel is the
//! radiance of the closest hit. Depth, optical flow and occlusion follow
//! from closed-form ray intersections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, ExposureTag, FrameMeta, Pose, Ray, Vec2, Vec3};
use crate::image::Image;
use crate::parallel::map_indices;

/// Relative tolerance of the re-trace visibility test.
const VISIBILITY_TOL: f64 = 1e-7;
/// Smallest accepted hit distance.
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub radiance: [f64; 3],
}

/// Rectangle perpendicular to a coordinate axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    /// 0, 1 or 2 for x, y, z.
    pub axis: usize,
    pub offset: f64,
    /// Bounds on the two remaining axes, in increasing axis order.
    pub min: [f64; 2],
    pub max: [f64; 2],
    /// Radiance at the in-plane coordinates (0, 0).
    pub radiance: [f64; 3],
    /// Slope of log radiance along the two in-plane axes.
    #[serde(default)]
    pub log_slope: [f64; 2],
}

impl Plane {
    /// The two in-plane axes in increasing order.
    pub fn in_plane_axes(&self) -> [usize; 2] {
        let o = [(self.axis + 1) % 3, (self.axis + 2) % 3];
        if o[0] < o[1] {
            o
        } else {
            [o[1], o[0]]
        }
    }

    fn gain_at(&self, u: [f64; 2]) -> f64 {
        (self.log_slope[0] * u[0] + self.log_slope[1] * u[1]).exp()
    }

    pub fn radiance_at(&self, point: &Vec3) -> [f64; 3] {
        let [a, b] = self.in_plane_axes();
        let g = self.gain_at([point[a], point[b]]);
        self.radiance.map(|r| r * g)
    }

    /// Radiance at the dimmest and the brightest corner.
    fn radiance_extremes(&self) -> [[f64; 3]; 2] {
        let corners = [
            [self.min[0], self.min[1]],
            [self.min[0], self.max[1]],
            [self.max[0], self.min[1]],
            [self.max[0], self.max[1]],
        ];
        let gains = corners.map(|c| self.gain_at(c));
        let lo = gains.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = gains.iter().cloned().fold(0.0, f64::max);
        [self.radiance.map(|r| r * lo), self.radiance.map(|r| r * hi)]
    }
}

/// Sphere translating at constant velocity (world units per frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingSphere {
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    pub radius: f64,
    pub radiance: [f64; 3],
}

impl MovingSphere {
    /// Center at a continuous frame coordinate.
    pub fn center_at(&self, frame: f64) -> Vec3 {
        Vec3::from(self.start) + Vec3::from(self.velocity) * frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureStep {
    pub tag: ExposureTag,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub cameras: Vec<CameraModel>,
    pub spheres: Vec<Sphere>,
    pub planes: Vec<Plane>,
    pub dynamic: MovingSphere,
    /// Radiance returned by rays that hit nothing before `z_far`.
    pub background: [f64; 3],
    pub z_near: f64,
    pub z_far: f64,
    /// Cycled over frames.
    pub exposure_cycle: Vec<ExposureStep>,
    /// Ground-truth response `x^(1/gamma)`.
    pub gamma: f64,
}

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vec3,
    pub radiance: [f64; 3],
    pub dynamic: bool,
}

/// Camera whose optical axis points from `center` to `target`; `up` is
/// roughly the negative image y axis.
pub fn look_at(center: Vec3, target: Vec3, up: Vec3) -> Result<Pose> {
    let z = (target - center).normalize();
    let x = z.cross(&up);
    if !(x.norm() > 1e-12) {
        return Err(Error::input("look-at direction is parallel to the up vector"));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let rot = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::from_center(rot, center)
}

fn intersect_sphere(ray_o: &Vec3, ray_d: &Vec3, center: &Vec3, radius: f64) -> Option<f64> {
    let oc = ray_o - center;
    let b = ray_d.dot(&oc);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|t| *t > HIT_EPS)
}

fn intersect_plane(ray_o: &Vec3, ray_d: &Vec3, p: &Plane) -> Option<f64> {
    let a = p.axis;
    if ray_d[a].abs() < 1e-15 {
        return None;
    }
    let t = (p.offset - ray_o[a]) / ray_d[a];
    if t <= HIT_EPS {
        return None;
    }
    let hit = ray_o + ray_d * t;
    p.in_plane_axes()
        .iter()
        .enumerate()
        .all(|(k, &ax)| (p.min[k]..=p.max[k]).contains(&hit[ax]))
        .then_some(t)
}

impl SceneSpec {
    /// The bundled reference scene: a bright and a dark emitter in front
    /// of a backdrop whose radiance rises smoothly from left to right, one
    /// translating sphere, and a slowly panning camera.
    pub fn blinker() -> Self {
        Self::blinker_sized(64, 64, 30)
    }

    /// The reference scene at another resolution or length; the field of
    /// view and the trajectories over the whole sequence are unchanged.
    pub fn blinker_sized(width: usize, height: usize, frames: usize) -> Self {
        let focal = 70.0 * width as f64 / 64.0;
        let cameras = (0..frames)
            .map(|i| {
                let s = i as f64 / (frames.max(2) - 1) as f64;
                let center = Vec3::new(-0.12 + 0.24 * s, 0.03 * (std::f64::consts::PI * s).sin(), 0.0);
                let pose = look_at(center, Vec3::new(0.0, 0.0, 4.0), Vec3::new(0.0, -1.0, 0.0)).unwrap();
                CameraModel::new(focal, Vec2::new(width as f64 / 2.0, height as f64 / 2.0), width, height, pose).unwrap()
            })
            .collect();
        Self {
            width,
            height,
            frames,
            cameras,
            spheres: vec![
                Sphere {
                    center: [-0.7, -0.55, 3.4],
                    radius: 0.38,
                    radiance: [3.0, 2.6, 2.2],
                },
                Sphere {
                    center: [0.7, -0.55, 3.4],
                    radius: 0.38,
                    radiance: [0.006, 0.005, 0.004],
                },
            ],
            planes: vec![Plane {
                axis: 2,
                offset: 4.0,
                min: [-2.2, -2.2],
                max: [2.2, 2.2],
                radiance: [0.22, 0.3, 0.38],
                log_slope: [1.0, 0.0],
            }],
            dynamic: MovingSphere {
                start: [-0.8, 0.55, 3.0],
                velocity: [1.6 / (frames.max(2) - 1) as f64, 0.0, 0.0],
                radius: 0.3,
                radiance: [0.9, 0.35, 0.12],
            },
            background: [0.1, 0.1, 0.1],
            z_near: 1.0,
            z_far: 6.0,
            exposure_cycle: vec![
                ExposureStep {
                    tag: ExposureTag::Low,
                    scale: 0.25,
                },
                ExposureStep {
                    tag: ExposureTag::Mid,
                    scale: 1.0,
                },
                ExposureStep {
                    tag: ExposureTag::High,
                    scale: 4.0,
                },
            ],
            gamma: 2.2,
        }
    }

    fn radiances(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.spheres
            .iter()
            .map(|s| s.radiance)
            .chain(self.planes.iter().flat_map(|p| p.radiance_extremes()))
            .chain([self.dynamic.radiance, self.background])
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.cameras.len() != self.frames {
            return Err(Error::input(format!("{} cameras for {} frames", self.cameras.len(), self.frames)));
        }
        if self.cameras.iter().any(|c| c.width() != self.width || c.height() != self.height) {
            return Err(Error::input("camera image size differs from the scene size"));
        }
        if !(self.z_near > 0.0 && self.z_near < self.z_far) {
            return Err(Error::input("need 0 < z_near < z_far"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::input("gamma must be positive"));
        }
        if self.exposure_cycle.is_empty() || self.exposure_cycle.iter().any(|e| !(e.scale > 0.0 && e.scale.is_finite())) {
            return Err(Error::input("exposure cycle needs positive scales"));
        }
        if self.planes.iter().any(|p| p.axis > 2) || self.spheres.iter().any(|s| !(s.radius > 0.0)) || !(self.dynamic.radius > 0.0) {
            return Err(Error::input("malformed primitive"));
        }
        let rad: Vec<[f64; 3]> = self.radiances().collect();
        if rad.iter().flatten().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::input("radiance must be positive and finite"));
        }
        let hi = rad.iter().flatten().cloned().fold(0.0, f64::max);
        let lo = rad.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        if hi / lo < 100.0 {
            return Err(Error::input(format!("radiance spans only {:.2} decades", (hi / lo).log10())));
        }
        let min_scale = self.exposure_cycle.iter().map(|e| e.scale).fold(f64::INFINITY, f64::min);
        if hi * min_scale >= 1.0 {
            return Err(Error::input(format!("radiance {hi} saturates every exposure")));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            let c = self.dynamic.center_at(i as f64);
            let r = self.dynamic.radius;
            for off in [Vec3::zeros(), Vec3::x() * r, -Vec3::x() * r, Vec3::y() * r, -Vec3::y() * r] {
                let inside = cam.project(&(c + off)).map(|p| cam.contains(&p)).unwrap_or(false);
                if !inside {
                    return Err(Error::input(format!("moving sphere leaves the view at frame {i}")));
                }
            }
        }
        Ok(())
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        if self.frames <= 1 {
            0.0
        } else {
            frame as f64 / (self.frames - 1) as f64
        }
    }

    /// Continuous frame coordinate of a normalized time.
    pub fn frame_at_time(&self, t: f64) -> f64 {
        t * (self.frames.max(2) - 1) as f64
    }

    pub fn exposure(&self, frame: usize) -> ExposureStep {
        self.exposure_cycle[frame % self.exposure_cycle.len()]
    }

    pub fn frame_meta(&self, frame: usize) -> FrameMeta {
        let e = self.exposure(frame);
        FrameMeta {
            frame_index: frame,
            time: self.frame_time(frame),
            camera: self.cameras[frame],
            exposure_tag: e.tag,
            exposure_scale: e.scale,
        }
    }

    /// Closest hit along a ray with the moving sphere at frame coordinate `frame`.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3, frame: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: Option<f64>, radiance: [f64; 3], dynamic: bool| {
            if let Some(t) = t {
                if t < self.z_far && best.is_none_or(|b| t < b.distance) {
                    best = Some(Hit {
                        distance: t,
                        point: origin + dir * t,
                        radiance,
                        dynamic,
                    });
                }
            }
        };
        for s in &self.spheres {
            consider(intersect_sphere(origin, dir, &Vec3::from(s.center), s.radius), s.radiance, false);
        }
        for p in &self.planes {
            if let Some(t) = intersect_plane(origin, dir, p) {
                consider(Some(t), p.radiance_at(&(origin + dir * t)), false);
            }
        }
        let d = &self.dynamic;
        consider(intersect_sphere(origin, dir, &d.center_at(frame), d.radius), d.radiance, true);
        best
    }

    fn pixel_ray(&self, cam: &CameraModel, pixel: &Vec2) -> Result<Ray> {
        cam.generate_ray(pixel, self.z_near, self.z_far)
    }
}

/// HDR radiance, depth and moving-object mask of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub hdr: Image,
    pub depth: Image,
    pub dynamic_mask: Vec<bool>,
}

/// Exact render of an arbitrary camera at a continuous frame coordinate.
pub fn render_view(spec: &SceneSpec, cam: &CameraModel, frame: f64) -> Result<OracleView> {
    let (w, h) = (cam.width(), cam.height());
    let px = map_indices(w * h, |k| -> Result<([f64; 3], f64, bool)> {
        let ray = spec.pixel_ray(cam, &CameraModel::pixel_center(k % w, k / w))?;
        Ok(match spec.trace(&ray.origin, &ray.direction, frame) {
            Some(hit) => (hit.radiance, hit.distance, hit.dynamic),
            None => (spec.background, spec.z_far, false),
        })
    });
    let px: Vec<_> = px.into_iter().collect::<Result<_>>()?;
    Ok(OracleView {
        hdr: Image::from_fn(w, h, 3, |x, y, c| px[y * w + x].0[c]),
        depth: Image::from_fn(w, h, 1, |x, y, _| px[y * w + x].1),
        dynamic_mask: px.iter().map(|p| p.2).collect(),
    })
}

/// Exact HDR image and depth map of a scene frame.
pub fn oracle_render(spec: &SceneSpec, frame: usize) -> Result<(Image, Image)> {
    if frame >= spec.frames {
        return Err(Error::input(format!("frame {frame} out of range")));
    }
    let v = render_view(spec, &spec.cameras[frame], frame as f64)?;
    Ok((v.hdr, v.depth))
}

/// Pixel displacement of the surface seen at `pixel` in frame `i` when
/// observed in frame `j`, or `None` when it is occluded or leaves the view.
pub fn flow_at(spec: &SceneSpec, i: usize, j: usize, pixel: &Vec2) -> Result<Option<Vec2>> {
    let (ci, cj) = (&spec.cameras[i], &spec.cameras[j]);
    let ray = spec.pixel_ray(ci, pixel)?;
    let hit = spec.trace(&ray.origin, &ray.direction, i as f64);
    let point = match hit {
        Some(h) if h.dynamic => h.point + Vec3::from(spec.dynamic.velocity) * (j as f64 - i as f64),
        Some(h) => h.point,
        None => ray.at(spec.z_far),
    };
    let Ok(q) = cj.project(&point) else {
        return Ok(None);
    };
    if !cj.contains(&q) {
        return Ok(None);
    }
    let origin = cj.pose().center();
    let to = point - origin;
    let dist = to.norm();
    let back = spec.trace(&origin, &(to / dist), j as f64);
    let visible = match (hit, back) {
        (Some(_), Some(b)) => (b.distance - dist).abs() <= VISIBILITY_TOL * dist,
        (None, None) => true,
        _ => false,
    };
    Ok(visible.then(|| q - pixel))
}

/// Dense flow with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    /// Two channels: horizontal and vertical displacement in pixels.
    pub flow: Image,
    pub valid: Vec<bool>,
}

impl FlowMap {
    pub fn at(&self, x: usize, y: usize) -> Option<Vec2> {
        let w = self.flow.width();
        self.valid[y * w + x].then(|| Vec2::new(self.flow.get(x, y, 0), self.flow.get(x, y, 1)))
    }
}

pub fn oracle_flow(spec: &SceneSpec, i: usize, j: usize) -> Result<FlowMap> {
    if i >= spec.frames || j >= spec.frames {
        return Err(Error::input(format!("frames ({i}, {j}) out of range")));
    }
    let (w, h) = (spec.width, spec.height);
    let px: Vec<Option<Vec2>> = map_indices(w * h, |k| flow_at(spec, i, j, &CameraModel::pixel_center(k % w, k / w)))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(FlowMap {
        flow: Image::from_fn(w, h, 2, |x, y, c| px[y * w + x].map_or(0.0, |u| u[c])),
        valid: px.iter().map(Option::is_some).collect(),
    })
}

/// Ground-truth camera response applied to exposed radiance.
pub fn gt_response(x: f64, gamma: f64) -> f64 {
    x.max(0.0).powf(1.0 / gamma).clamp(0.0, 1.0)
}

/// Perturbations of the supervision signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub seed: u64,
    /// Standard deviation of additive flow noise in pixels.
    pub flow_sigma: f64,
    /// Ranges of the per-frame depth scale and shift.
    pub depth_scale: [f64; 2],
    pub depth_shift: [f64; 2],
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            seed: 0,
            flow_sigma: 1.0,
            depth_scale: [0.5, 2.0],
            depth_shift: [-1.0, 1.0],
        }
    }
}

/// Everything generated from a scene.
///
/// Per-frame arrays cover all frames. Observed flow and depth cover the
/// training frames only, with flow linking consecutive training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub spec: SceneSpec,
    pub frames: Vec<FrameMeta>,
    pub training: Vec<usize>,
    pub ldr: Vec<Image>,
    pub hdr: Vec<Image>,
    pub depth: Vec<Image>,
    pub dynamic_mask: Vec<Vec<bool>>,
    pub observed_depth: Vec<Image>,
    pub flow_forward: Vec<Option<FlowMap>>,
    pub flow_backward: Vec<Option<FlowMap>>,
}

impl DatasetBundle {
    pub fn training_frames(&self) -> Vec<FrameMeta> {
        self.training.iter().map(|&i| self.frames[i].clone()).collect()
    }

    /// Frames not used for training.
    pub fn held_out(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|i| !self.training.contains(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        let t = self.training.len();
        if t == 0 || self.training.iter().any(|&i| i >= n) || self.training.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("training frames must be increasing indices into the sequence"));
        }
        if [self.ldr.len(), self.hdr.len(), self.depth.len(), self.dynamic_mask.len()].iter().any(|&l| l != n) {
            return Err(Error::input("dataset is missing frames"));
        }
        if [self.observed_depth.len(), self.flow_forward.len(), self.flow_backward.len()].iter().any(|&l| l != t) {
            return Err(Error::input("dataset is missing supervision for training frames"));
        }
        Ok(())
    }
}

/// Render all frames and supervision. `training` defaults to every frame.
pub fn generate_dataset(spec: &SceneSpec, training: Option<&[usize]>, corruption: Option<&Corruption>) -> Result<DatasetBundle> {
    spec.validate()?;
    let training: Vec<usize> = training.map_or_else(|| (0..spec.frames).collect(), <[usize]>::to_vec);
    let frames: Vec<FrameMeta> = (0..spec.frames).map(|i| spec.frame_meta(i)).collect();
    let views: Vec<OracleView> = (0..spec.frames)
        .map(|i| render_view(spec, &spec.cameras[i], i as f64))
        .collect::<Result<_>>()?;
    let ldr = views
        .iter()
        .zip(&frames)
        .map(|(v, f)| v.hdr.map(|e| gt_response(f.exposure_scale * e, spec.gamma)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(corruption.map_or(0, |c| c.seed));
    let mut flow_forward = Vec::with_capacity(training.len());
    let mut flow_backward = Vec::with_capacity(training.len());
    let mut observed_depth = Vec::with_capacity(training.len());
    for (k, &i) in training.iter().enumerate() {
        let mut pair = |j: Option<&usize>| -> Result<Option<FlowMap>> {
            let Some(&j) = j else { return Ok(None) };
            let mut f = oracle_flow(spec, i, j)?;
            if let Some(c) = corruption.filter(|c| c.flow_sigma > 0.0) {
                let noise = Normal::new(0.0, c.flow_sigma).map_err(|e| Error::input(e.to_string()))?;
                for v in f.flow.data_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            Ok(Some(f))
        };
        flow_forward.push(pair(training.get(k + 1))?);
        flow_backward.push(pair(k.checked_sub(1).map(|p| &training[p]))?);
        let mut d = views[i].depth.clone();
        if let Some(c) = corruption {
            let a = Uniform::new_inclusive(c.depth_scale[0], c.depth_scale[1]).map_err(|e| Error::input(e.to_string()))?;
            let b = Uniform::new_inclusive(c.depth_shift[0], c.depth_shift[1]).map_err(|e| Error::input(e.to_string()))?;
            let (a, b) = (a.sample(&mut rng), b.sample(&mut rng));
            d = d.map(|z| a * z + b);
        }
        observed_depth.push(d);
    }
    let bundle = DatasetBundle {
        spec: spec.clone(),
        frames,
        training,
        ldr,
        hdr: views.iter().map(|v| v.hdr.clone()).collect(),
        depth: views.iter().map(|v| v.depth.clone()).collect(),
        dynamic_mask: views.into_iter().map(|v| v.dynamic_mask).collect(),
        observed_depth,
        flow_forward,
        flow_backward,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn flat_scene(radiance: f64) -> SceneSpec {
        let mut s = SceneSpec::blinker();
        s.spheres.clear();
        s.planes[0].radiance = [radiance; 3];
        s.planes[0].log_slope = [0.0; 2];
        s.dynamic.start = [0.0, 0.0, -50.0];
        s.dynamic.velocity = [0.0; 3];
        s
    }

    #[test]
    fn plane_radiance_follows_its_log_slope() {
        let mut s = flat_scene(0.2);
        s.planes[0].log_slope = [0.5, -0.25];
        let hit = s.trace(&Vec3::new(1.0, 2.0, 0.0), &Vec3::z(), 0.0).unwrap();
        assert_relative_eq!(hit.radiance[0], 0.2 * (0.5f64 - 0.5).exp(), epsilon = 1e-12);
        let hit = s.trace(&Vec3::new(-1.2, 0.0, 0.0), &Vec3::z(), 0.0).unwrap();
        assert_relative_eq!(hit.radiance[2], 0.2 * (-0.6f64).exp(), epsilon = 1e-12);
        // the brightest corner, not the radiance at the origin, must stay unclipped at low exposure
        s.planes[0].log_slope = [2.0, 0.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn blinker_is_valid() {
        SceneSpec::blinker().validate().unwrap();
    }

    #[test]
    fn staring_at_a_plane_gives_its_radiance() {
        let mut s = flat_scene(5.0);
        let cam = CameraModel::new(20.0, Vec2::new(8.0, 8.0), 16, 16, Pose::identity()).unwrap();
        s.width = 16;
        s.height = 16;
        let v = render_view(&s, &cam, 0.0).unwrap();
        assert!(v.hdr.data().iter().all(|e| *e == 5.0));
        let (w, h) = (16, 16);
        for y in 0..h {
            for x in 0..w {
                let p = CameraModel::pixel_center(x, y);
                let d = Vec3::new((p.x - 8.0) / 20.0, (p.y - 8.0) / 20.0, 1.0);
                assert_relative_eq!(v.depth.get(x, y, 0), 4.0 * d.norm(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn centered_sphere_depth_is_symmetric_with_minimum_at_center() {
        let mut s = flat_scene(0.5);
        s.spheres.push(Sphere {
            center: [0.0, 0.0, 2.0],
            radius: 0.5,
            radiance: [1.0; 3],
        });
        let cam = CameraModel::new(20.0, Vec2::new(8.0, 8.0), 16, 16, Pose::identity()).unwrap();
        let d = render_view(&s, &cam, 0.0).unwrap().depth;
        let min = d.data().iter().cloned().fold(f64::INFINITY, f64::min);
        for (x, y) in [(7, 7), (8, 7), (7, 8), (8, 8)] {
            assert_eq!(d.get(x, y, 0), min);
        }
        for y in 0..16 {
            for x in 0..16 {
                assert_relative_eq!(d.get(x, y, 0), d.get(15 - x, y, 0), epsilon = 1e-12);
                assert_relative_eq!(d.get(x, y, 0), d.get(x, 15 - y, 0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sphere_intersection_matches_hand_solution() {
        // ray along +z offset by b from a unit sphere at distance 5: t = 5 - sqrt(1 - b^2)
        let c = Vec3::new(0.0, 0.0, 5.0);
        for b in [0.0, 0.3, 0.9, 0.999_999] {
            let t = intersect_sphere(&Vec3::new(b, 0.0, 0.0), &Vec3::z(), &c, 1.0).unwrap();
            assert!((t - (5.0 - (1.0f64 - b * b).sqrt())).abs() < 1e-9);
        }
        // exactly tangent
        let t = intersect_sphere(&Vec3::new(1.0, 0.0, 0.0), &Vec3::z(), &c, 1.0).unwrap();
        assert!((t - 5.0).abs() < 1e-9);
        assert!(intersect_sphere(&Vec3::new(1.01, 0.0, 0.0), &Vec3::z(), &c, 1.0).is_none());
    }

    #[test]
    fn static_scene_and_camera_have_zero_flow() {
        let mut s = flat_scene(0.5);
        s.cameras = vec![s.cameras[0]; s.frames];
        let f = oracle_flow(&s, 3, 4).unwrap();
        assert!(f.valid.iter().all(|v| *v));
        assert!(f.flow.data().iter().all(|u| u.abs() < 1e-9));
    }

    #[test]
    fn fronto_parallel_motion_gives_focal_times_velocity_over_depth() {
        let mut s = flat_scene(0.5);
        let cam = s.cameras[0].with_pose(Pose::identity());
        s.cameras = vec![cam; s.frames];
        let delta = 0.05;
        s.dynamic = MovingSphere {
            start: [0.0, 0.0, 2.0],
            velocity: [delta, 0.0, 0.0],
            radius: 0.4,
            radiance: [1.0; 3],
        };
        // the sphere front at the image center is fronto-parallel at depth z = 1.6
        let c = Vec2::new(32.0, 32.0);
        let u = flow_at(&s, 0, 1, &c).unwrap().unwrap();
        let z = 1.6;
        let hit = s.trace(&Vec3::zeros(), &Vec3::z(), 0.0).unwrap();
        assert_relative_eq!(hit.distance, z, epsilon = 1e-12);
        assert_relative_eq!(u.x, cam.focal() * delta / z, epsilon = 1e-9);
        assert!(u.y.abs() < 1e-12);
    }

    #[test]
    fn occluded_points_are_invalid() {
        let mut s = flat_scene(0.5);
        let cam = s.cameras[0].with_pose(Pose::identity());
        s.cameras = vec![cam; s.frames];
        s.dynamic = MovingSphere {
            start: [-0.6, 0.0, 2.0],
            velocity: [0.6, 0.0, 0.0],
            radius: 0.3,
            radiance: [1.0; 3],
        };
        // backdrop point at the image center is covered by the sphere at frame 1
        assert!(flow_at(&s, 0, 1, &Vec2::new(32.0, 32.0)).unwrap().is_none());
        assert!(flow_at(&s, 0, 1, &Vec2::new(32.0, 4.0)).unwrap().is_some());
    }

    #[test]
    fn ldr_follows_the_exposed_response() {
        assert_eq!(gt_response(0.5, 1.0), 0.5);
        assert_eq!(gt_response(4.0 * 0.5, 2.2), 1.0);
        assert_relative_eq!(gt_response(0.25 * 0.5, 2.2), 0.125f64.powf(1.0 / 2.2), epsilon = 1e-15);
        assert!((gt_response(0.125, 2.2) - 0.3887).abs() < 1e-4);
    }

    #[test]
    fn dataset_round_trip_recovers_hdr_where_unsaturated() {
        let mut s = SceneSpec::blinker();
        s.frames = 4;
        s.cameras.truncate(4);
        let d = generate_dataset(&s, None, None).unwrap();
        for (i, f) in d.frames.iter().enumerate() {
            for (l, e) in d.ldr[i].data().iter().zip(d.hdr[i].data()) {
                assert_eq!(*l, gt_response(f.exposure_scale * e, s.gamma));
                if *l < 1.0 && *l > 0.0 {
                    assert!((l.powf(s.gamma) / f.exposure_scale - e).abs() <= 1e-9 * e.max(1.0));
                }
            }
        }
    }

    #[test]
    fn every_radiance_is_unsaturated_in_some_exposure() {
        let s = SceneSpec::blinker();
        for r in s.radiances().flatten() {
            assert!(s.exposure_cycle.iter().any(|e| gt_response(e.scale * r, s.gamma) < 1.0));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SceneSpec::blinker();
        s.spheres[0].radiance = [8.0; 3];
        assert!(s.validate().is_err());
        let mut s = SceneSpec::blinker();
        s.dynamic.velocity = [0.5, 0.0, 0.0];
        assert!(s.validate().is_err());
        let mut s = SceneSpec::blinker();
        s.cameras.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn corruption_is_seeded_and_shifts_depth_affinely() {
        let mut s = SceneSpec::blinker();
        s.frames = 3;
        s.cameras.truncate(3);
        let c = Corruption {
            seed: 5,
            ..Corruption::default()
        };
        let a = generate_dataset(&s, None, Some(&c)).unwrap();
        let b = generate_dataset(&s, None, Some(&c)).unwrap();
        assert_eq!(a, b);
        let clean = generate_dataset(&s, None, None).unwrap();
        let (z, zc) = (clean.observed_depth[1].data(), a.observed_depth[1].data());
        let scale = (zc[1] - zc[0]) / (z[1] - z[0]);
        let shift = zc[0] - scale * z[0];
        for (p, q) in z.iter().zip(zc) {
            assert_relative_eq!(scale * p + shift, *q, epsilon = 1e-9);
        }
        assert!(a.flow_forward[0] != clean.flow_forward[0]);
    }

    #[test]
    fn subset_flow_links_consecutive_training_frames() {
        let mut s = SceneSpec::blinker();
        s.frames = 5;
        s.cameras.truncate(5);
        let d = generate_dataset(&s, Some(&[0, 2, 4]), None).unwrap();
        assert_eq!(d.flow_forward[0].as_ref().unwrap(), &oracle_flow(&s, 0, 2).unwrap());
        assert!(d.flow_forward[2].is_none() && d.flow_backward[0].is_none());
        assert_eq!(d.held_out(), vec![1, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn flow_cycle_returns_to_start(x in 1.0f64..63.0, y in 1.0f64..63.0, i in 0usize..29) {
            let s = SceneSpec::blinker();
            let p = Vec2::new(x, y);
            if let Some(u) = flow_at(&s, i, i + 1, &p).unwrap() {
                let q = p + u;
                if let Some(v) = flow_at(&s, i + 1, i, &q).unwrap() {
                    prop_assert!((q + v - p).norm() < 1e-6);
                }
            }
        }
    }
}
