//! Forward-only full-image rendering of a trained model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, ExposureTag, FrameMeta, Stratification, Vec2};
use crate::image::Image;
use crate::model::Model;
use crate::parallel::map_chunks;
use crate::renderer::{render_combined, render_expected_flow};
use crate::tonemap::{mulaw3, ToneMapper};

/// Compression strength of the mu-law preview.
pub const MU: f64 = 500.0;

const CHUNK: usize = 256;

/// HDR radiance and expected depth of one view.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub hdr: Image,
    pub depth: Image,
}

/// Render the combined fields through `cam` at normalized time `t`.
pub fn render_view(model: &Model, cam: &CameraModel, t: f64, z_near: f64, z_far: f64, samples: usize) -> Result<ViewRender> {
    let (w, h) = (cam.width(), cam.height());
    let chunks = map_chunks(w * h, CHUNK, |r| -> Result<Vec<([f64; 3], f64)>> {
        r.map(|k| {
            let ray = cam.generate_ray(&CameraModel::pixel_center(k % w, k / w), z_near, z_far)?;
            let c = render_combined(&model.fields, &ray, t, samples, Stratification::Midpoint)?;
            Ok((c.hdr, c.depth))
        })
        .collect()
    });
    let mut hdr = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut k = 0;
    for chunk in chunks {
        for (e, d) in chunk? {
            hdr.pixel_mut(k % w, k / w).copy_from_slice(&e);
            depth.set(k % w, k / w, 0, d);
            k += 1;
        }
    }
    Ok(ViewRender { hdr, depth })
}

/// Mean white-balance gain over the training frames captured with `tag`.
pub fn tag_gain(model: &Model, training: &[FrameMeta], tag: ExposureTag) -> Result<[f64; 3]> {
    let frames: Vec<usize> = (0..training.len()).filter(|&i| training[i].exposure_tag == tag).collect();
    if frames.is_empty() {
        return Err(Error::input(format!("no training frame has exposure `{}`", tag.as_str())));
    }
    model.wb.mean_gain(&frames)
}

/// Tone-map radiance with a fixed gain using the evaluation-mode curve.
pub fn tonemap_image(model: &Model, hdr: &Image, gain: [f64; 3]) -> Result<Image> {
    let prepared = model.curve.prepare();
    let mapper = ToneMapper::new(&prepared, &model.wb);
    let (w, h, _) = hdr.shape();
    let mut out = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let c = mapper.forward_with_gain(gain, hdr.rgb(x, y), false);
            out.pixel_mut(x, y).copy_from_slice(&c);
        }
    }
    Ok(out)
}

/// Mu-law preview of radiance normalized by its maximum.
pub fn mulaw_image(hdr: &Image) -> Result<Image> {
    let peak = hdr.data().iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let (w, h, _) = hdr.shape();
    let mut out = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let e = hdr.rgb(x, y).map(|v| v * scale);
            out.pixel_mut(x, y).copy_from_slice(&mulaw3(e, MU)?);
        }
    }
    Ok(out)
}

/// Depth mapped to [0, 1] over `[z_near, z_far]`.
pub fn depth_image(depth: &Image, z_near: f64, z_far: f64) -> Image {
    depth.map(|d| ((d - z_near) / (z_far - z_near)).clamp(0.0, 1.0))
}

/// Predicted pixel displacement from training frame `i` to its neighbor `j`.
///
/// Pixels whose dynamic weight is too small for a defined flow are `None`.
pub fn render_flow(model: &Model, training: &[FrameMeta], i: usize, j: usize, z_near: f64, z_far: f64, samples: usize) -> Result<Vec<Option<Vec2>>> {
    if i >= training.len() || j >= training.len() {
        return Err(Error::input(format!("training frame {} out of range", i.max(j))));
    }
    let times: Vec<f64> = training.iter().map(|f| f.time).collect();
    let (cam_i, cam_j) = (&training[i].camera, &training[j].camera);
    let (w, h) = (cam_i.width(), cam_i.height());
    let chunks = map_chunks(w * h, CHUNK, |r| -> Result<Vec<Option<Vec2>>> {
        r.map(|k| {
            let p = CameraModel::pixel_center(k % w, k / w);
            let ray = cam_i.generate_ray(&p, z_near, z_far)?;
            Ok(render_expected_flow(&model.fields, &ray, &times, i, j, cam_j, samples, Stratification::Midpoint)?.map(|f| f.pixel - p))
        })
        .collect()
    });
    let mut out = Vec::with_capacity(w * h);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Flow as an RGB image: hue from direction, value from magnitude over `max_px`.
pub fn flow_image(flow: &[Option<Vec2>], width: usize, height: usize, max_px: f64) -> Result<Image> {
    if flow.len() != width * height {
        return Err(Error::input("flow size does not match the image"));
    }
    Ok(Image::from_fn(width, height, 3, |x, y, c| {
        let Some(f) = flow[y * width + x] else { return 0.0 };
        let v = (f.norm() / max_px).min(1.0);
        let hue = (f.y.atan2(f.x) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
        let k = (c as f64 * 2.0 + 4.0 + hue).rem_euclid(6.0);
        let sat = (k.min(4.0 - k)).clamp(0.0, 1.0);
        v * (1.0 - sat)
    }))
}

/// What to write for a rendered view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    /// Linear radiance as PFM.
    Hdr,
    /// LDR at one exposure.
    Ldr(ExposureTag),
    /// Mu-law compressed radiance.
    Mulaw,
    Depth,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hdr" => Ok(Self::Hdr),
            "mulaw" => Ok(Self::Mulaw),
            "depth" => Ok(Self::Depth),
            "ldr-low" | "low" => Ok(Self::Ldr(ExposureTag::Low)),
            "ldr-mid" | "mid" | "ldr" => Ok(Self::Ldr(ExposureTag::Mid)),
            "ldr-high" | "high" => Ok(Self::Ldr(ExposureTag::High)),
            other => Err(Error::input(format!("unknown render mode `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SceneSpec};
    use crate::trainer::{init_model, TrainConfig};

    fn small() -> (crate::synth::DatasetBundle, Model) {
        let mut s = SceneSpec::blinker();
        s.frames = 3;
        s.cameras.truncate(3);
        s.width = 12;
        s.height = 10;
        for c in &mut s.cameras {
            *c = CameraModel::new(14.0, Vec2::new(6.0, 5.0), 12, 10, *c.pose()).unwrap();
        }
        let data = generate_dataset(&s, None, None).unwrap();
        let mut cfg = TrainConfig::new(1, 3);
        cfg.fields.static_layers = 1;
        cfg.fields.static_width = 8;
        cfg.fields.dynamic_layers = 1;
        cfg.fields.dynamic_width = 8;
        let m = init_model(&cfg, &data).unwrap();
        (data, m)
    }

    #[test]
    fn view_render_matches_per_ray_render() {
        let (data, m) = small();
        let cam = &data.frames[1].camera;
        let v = render_view(&m, cam, 0.5, 1.0, 6.0, 8).unwrap();
        assert_eq!(v.hdr.shape(), (12, 10, 3));
        let ray = cam.generate_ray(&CameraModel::pixel_center(7, 3), 1.0, 6.0).unwrap();
        let r = render_combined(&m.fields, &ray, 0.5, 8, Stratification::Midpoint).unwrap();
        assert_eq!(v.hdr.rgb(7, 3), r.hdr);
        assert_eq!(v.depth.get(7, 3, 0), r.depth);
        assert!(render_view(&m, cam, 1.5, 1.0, 6.0, 8).is_err());
    }

    #[test]
    fn flow_render_covers_every_pixel_and_rejects_bad_frames() {
        let (data, m) = small();
        let tr = data.training_frames();
        let f = render_flow(&m, &tr, 0, 1, 1.0, 6.0, 8).unwrap();
        assert_eq!(f.len(), 120);
        assert!(render_flow(&m, &tr, 0, 2, 1.0, 6.0, 8).is_err());
        assert!(render_flow(&m, &tr, 0, 7, 1.0, 6.0, 8).is_err());
        let img = flow_image(&f, 12, 10, 2.0).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn previews_stay_in_unit_range() {
        let hdr = Image::from_fn(4, 4, 3, |x, y, c| (x * 7 + y + c) as f64);
        let m = mulaw_image(&hdr).unwrap();
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.data().iter().copied().fold(0.0, f64::max), 1.0);
        let d = depth_image(&Image::from_fn(2, 1, 1, |x, _, _| [0.0, 9.0][x]), 1.0, 6.0);
        assert_eq!(d.data(), &[0.0, 1.0]);
        assert_eq!("ldr-high".parse::<RenderMode>().unwrap(), RenderMode::Ldr(ExposureTag::High));
        assert!("bogus".parse::<RenderMode>().is_err());
    }
}
