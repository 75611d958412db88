//! Pseudo-label generators for rendered novel views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::image::Image;
use crate::synth::{gt_response, SceneSpec};

/// One rendered patch of a novel view and its context.
#[derive(Debug, Clone)]
pub struct EnhanceRequest<'a> {
    /// Rendered LDR patch, clamped to [0, 1].
    pub rendered: &'a Image,
    /// The same window of the training frame the view was perturbed from.
    pub reference: &'a Image,
    pub camera: &'a CameraModel,
    /// Top-left pixel of the patch in the novel view.
    pub origin: (usize, usize),
    /// Sequence index and exposure of the reference frame.
    pub frame: usize,
    pub exposure_scale: f64,
}

/// `C_gen = G(C_rendered, C_ref)`: same shape as the rendered patch, values in [0, 1].
pub trait Enhancer: Send + Sync {
    fn enhance(&self, req: &EnhanceRequest<'_>) -> Result<Image>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnhancerKind {
    /// The generative term is disabled.
    #[default]
    None,
    Identity,
    Oracle,
    BlurSharpen,
}

impl std::str::FromStr for EnhancerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "id" | "identity" => Ok(Self::Identity),
            "oracle" => Ok(Self::Oracle),
            "blur" | "blur-sharpen" => Ok(Self::BlurSharpen),
            other => Err(Error::input(format!("unknown enhancer `{other}`"))),
        }
    }
}

impl std::fmt::Display for EnhancerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Identity => "identity",
            Self::Oracle => "oracle",
            Self::BlurSharpen => "blur-sharpen",
        })
    }
}

/// Returns the render unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEnhancer;

impl Enhancer for IdentityEnhancer {
    fn enhance(&self, req: &EnhanceRequest<'_>) -> Result<Image> {
        Ok(req.rendered.clone())
    }
}

/// Exact render of the synthetic scene from the novel camera.
#[derive(Debug, Clone)]
pub struct OracleEnhancer {
    pub spec: SceneSpec,
}

impl Enhancer for OracleEnhancer {
    fn enhance(&self, req: &EnhanceRequest<'_>) -> Result<Image> {
        let (w, h) = (req.rendered.width(), req.rendered.height());
        let (x0, y0) = req.origin;
        let mut out = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let p = CameraModel::pixel_center(x0 + x, y0 + y);
                let ray = req.camera.generate_ray(&p, self.spec.z_near, self.spec.z_far)?;
                let e = self
                    .spec
                    .trace(&ray.origin, &ray.direction, req.frame as f64)
                    .map_or(self.spec.background, |h| h.radiance);
                for c in 0..3 {
                    out.set(x, y, c, gt_response(req.exposure_scale * e[c], self.spec.gamma));
                }
            }
        }
        Ok(out)
    }
}

/// 3x3 box blur followed by an unsharp mask, with clamped borders.
#[derive(Debug, Clone, Copy)]
pub struct BlurSharpenEnhancer {
    pub amount: f64,
}

impl Default for BlurSharpenEnhancer {
    fn default() -> Self {
        Self { amount: 0.5 }
    }
}

fn box_blur(img: &Image) -> Image {
    let (w, h, ch) = img.shape();
    Image::from_fn(w, h, ch, |x, y, c| {
        let mut s = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                s += img.get(xx, yy, c);
            }
        }
        s / 9.0
    })
}

impl Enhancer for BlurSharpenEnhancer {
    fn enhance(&self, req: &EnhanceRequest<'_>) -> Result<Image> {
        let b = box_blur(req.rendered);
        let bb = box_blur(&b);
        let mut out = b.clone();
        for ((o, b), bb) in out.data_mut().iter_mut().zip(b.data()).zip(bb.data()) {
            *o = (b + self.amount * (b - bb)).clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// The bundled enhancer of a kind; the oracle needs the scene.
pub fn build(kind: EnhancerKind, spec: &SceneSpec) -> Option<Box<dyn Enhancer>> {
    match kind {
        EnhancerKind::None => None,
        EnhancerKind::Identity => Some(Box::new(IdentityEnhancer)),
        EnhancerKind::Oracle => Some(Box::new(OracleEnhancer { spec: spec.clone() })),
        EnhancerKind::BlurSharpen => Some(Box::new(BlurSharpenEnhancer::default())),
    }
}
