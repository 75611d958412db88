//! Scoring a trained model against the synthetic ground truth.

pub mod metrics;
pub mod plot;
pub mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, ExposureTag, Pose, Vec3};
use crate::image::Image;
use crate::model::Model;
use crate::synth::{gt_response, oracle_flow, render_view as oracle_view, DatasetBundle};
use crate::tonemap::ToneCurve;

pub use metrics::{
    crf_recovery_error, crf_rmse_unaligned, fit_scale, flow_epe, hdr_relative_error, psnr, psnr_masked, relative_error_with_scale, ssim,
    ssim_masked,
};
pub use render::{render_flow, render_view, tag_gain, tonemap_image, RenderMode, ViewRender};

/// Which kind of view a metric row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewSet {
    /// Training frame through its own camera.
    Training,
    /// Frame left out of training, rendered at its own time and camera.
    HeldOut,
    /// Training time through a displaced camera.
    Novel,
}

impl ViewSet {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Training => "training",
            Self::HeldOut => "held-out",
            Self::Novel => "novel",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub samples: usize,
    /// Sequence indices to score; all frames when `None`.
    pub frames: Option<Vec<usize>>,
    /// Camera-center offset of the novel views; none are scored when `None`.
    pub novel_offset: Option<[f64; 3]>,
    pub flow: bool,
    pub hdr: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 32,
            frames: None,
            novel_offset: Some([0.04, 0.06, 0.0]),
            flow: true,
            hdr: true,
        }
    }
}

/// Metrics of one rendered view. Non-finite PSNR (identical images) is
/// serialized as `null`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub set: ViewSet,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_dynamic: Option<f64>,
    pub ssim_dynamic: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetSummary {
    pub set: ViewSet,
    pub views: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_dynamic: Option<f64>,
    pub ssim_dynamic: Option<f64>,
    /// Always `None`: no perceptual network is bundled.
    pub lpips: Option<f64>,
}

/// Scale-aligned HDR errors in percent per channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HdrErrors {
    /// Per-channel scale fitted over every recoverable pixel.
    pub scale: [f64; 3],
    pub recoverable: [f64; 3],
    pub recoverable_pixels: usize,
    /// Clipped at the mid exposure but not at the low one.
    pub saturated_mid: Option<[f64; 3]>,
    pub saturated_mid_pixels: usize,
    /// Below 0.1 at the mid exposure and unclipped at the high one.
    pub underexposed_mid: Option<[f64; 3]>,
    pub underexposed_mid_pixels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowErrors {
    pub pairs: usize,
    pub epe_all: f64,
    pub epe_dynamic: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub summaries: Vec<SetSummary>,
    pub hdr: Option<HdrErrors>,
    pub crf_rmse: Option<[f64; 3]>,
    pub crf_rmse_unaligned: Option<[f64; 3]>,
    pub flow: Option<FlowErrors>,
    pub checks: Vec<Check>,
}

impl EvalReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self, set: ViewSet) -> Option<&SetSummary> {
        self.summaries.iter().find(|s| s.set == set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable table of the summaries, followed by the scalar metrics.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.p$}"));
        let mut s = format!(
            "{:<10} {:>5} {:>8} {:>7} {:>9} {:>8} {:>6}\n",
            "views", "n", "PSNR", "SSIM", "PSNR-dyn", "SSIM-dyn", "LPIPS"
        );
        for m in &self.summaries {
            s.push_str(&format!(
                "{:<10} {:>5} {:>8.2} {:>7.4} {:>9} {:>8} {:>6}\n",
                m.set.as_str(),
                m.views,
                m.psnr,
                m.ssim,
                opt(m.psnr_dynamic, 2),
                opt(m.ssim_dynamic, 4),
                "n/a"
            ));
        }
        let rgb = |v: &[f64; 3], p: usize| format!("{:.p$} / {:.p$} / {:.p$}", v[0], v[1], v[2]);
        if let Some(c) = &self.crf_rmse {
            s.push_str(&format!("tone-curve RMSE (aligned, R/G/B): {}\n", rgb(c, 4)));
        }
        if let Some(h) = &self.hdr {
            s.push_str(&format!("HDR median rel. error %, recoverable ({} px): {}\n", h.recoverable_pixels, rgb(&h.recoverable, 2)));
            if let Some(e) = &h.saturated_mid {
                s.push_str(&format!("HDR median rel. error %, clipped at mid ({} px): {}\n", h.saturated_mid_pixels, rgb(e, 2)));
            }
            if let Some(e) = &h.underexposed_mid {
                s.push_str(&format!("HDR median rel. error %, dark at mid ({} px): {}\n", h.underexposed_mid_pixels, rgb(e, 2)));
            }
        }
        if let Some(f) = &self.flow {
            s.push_str(&format!("flow EPE px ({} pairs): all {:.3}, dynamic {}\n", f.pairs, f.epe_all, opt(f.epe_dynamic, 3)));
        }
        for c in &self.checks {
            s.push_str(&format!("[{}] {}: {}\n", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail));
        }
        s
    }
}

/// The camera of `cam` with its center moved by `offset`, same orientation.
pub fn displaced_camera(cam: &CameraModel, offset: [f64; 3]) -> Result<CameraModel> {
    let pose = Pose::from_center(*cam.pose().rotation(), cam.pose().center() + Vec3::from(offset))?;
    Ok(cam.with_pose(pose))
}

fn stack(images: &[Image]) -> Result<Image> {
    let (w, h, ch) = images.first().ok_or_else(|| Error::input("no images"))?.shape();
    let data: Vec<f64> = images.iter().flat_map(|i| i.data().iter().copied()).collect();
    Image::from_data(w, h * images.len(), ch, data)
}

fn exposure_of(data: &DatasetBundle, tag: ExposureTag) -> Option<f64> {
    data.spec.exposure_cycle.iter().find(|e| e.tag == tag).map(|e| e.scale)
}

/// Median relative HDR error over the recoverable pixels and the two
/// exposure-limited categories of the ground truth.
pub fn hdr_errors(pred: &[Image], gt: &[Image], data: &DatasetBundle) -> Result<HdrErrors> {
    let (p, g) = (stack(pred)?, stack(gt)?);
    let low = exposure_of(data, ExposureTag::Low).unwrap_or(1.0);
    let high = exposure_of(data, ExposureTag::High).unwrap_or(1.0);
    let gamma = data.spec.gamma;
    let n = g.width() * g.height();
    let (mut rec, mut sat, mut dark) = (vec![false; n], vec![false; n], vec![false; n]);
    for k in 0..n {
        let e = g.rgb(k % g.width(), k / g.width());
        if e.iter().any(|v| *v <= 0.0) || !e.iter().all(|v| low * v < 1.0) {
            continue;
        }
        rec[k] = true;
        sat[k] = e.iter().any(|v| *v >= 1.0);
        dark[k] = e.iter().all(|v| gt_response(*v, gamma) < 0.1 && high * v < 1.0);
    }
    let scale = fit_scale(&p, &g, &rec)?;
    let count = |m: &[bool]| m.iter().filter(|v| **v).count();
    let category = |m: &[bool]| -> Result<Option<[f64; 3]>> {
        if count(m) == 0 {
            return Ok(None);
        }
        relative_error_with_scale(&p, &g, scale, m).map(Some)
    };
    Ok(HdrErrors {
        scale,
        recoverable: relative_error_with_scale(&p, &g, scale, &rec)?,
        recoverable_pixels: count(&rec),
        saturated_mid: category(&sat)?,
        saturated_mid_pixels: count(&sat),
        underexposed_mid: category(&dark)?,
        underexposed_mid_pixels: count(&dark),
    })
}

fn score(set: ViewSet, frame: usize, pred: &Image, gt: &Image, dynamic: &[bool]) -> Result<ViewMetrics> {
    let any = dynamic.iter().any(|v| *v);
    Ok(ViewMetrics {
        set,
        frame,
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        psnr_dynamic: if any { Some(psnr_masked(pred, gt, Some(dynamic))?) } else { None },
        ssim_dynamic: if any { ssim_masked(pred, gt, dynamic).ok() } else { None },
    })
}

fn summarize(views: &[ViewMetrics]) -> Vec<SetSummary> {
    let mean = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    [ViewSet::Training, ViewSet::HeldOut, ViewSet::Novel]
        .into_iter()
        .filter_map(|set| {
            let vs: Vec<&ViewMetrics> = views.iter().filter(|v| v.set == set).collect();
            Some(SetSummary {
                set,
                views: vs.len(),
                psnr: mean(vs.iter().map(|v| v.psnr).collect())?,
                ssim: mean(vs.iter().map(|v| v.ssim).collect())?,
                psnr_dynamic: mean(vs.iter().filter_map(|v| v.psnr_dynamic).collect()),
                ssim_dynamic: mean(vs.iter().filter_map(|v| v.ssim_dynamic).collect()),
                lpips: None,
            })
        })
        .collect()
}

/// Render every requested view, compare it to the ground truth and run the
/// invariant checks.
pub fn evaluate(model: &Model, data: &DatasetBundle, opts: &EvalOptions) -> Result<EvalReport> {
    data.validate()?;
    let spec = &data.spec;
    let training = data.training_frames();
    let frames: Vec<usize> = opts.frames.clone().unwrap_or_else(|| (0..data.frames.len()).collect());
    if let Some(f) = frames.iter().find(|f| **f >= data.frames.len()) {
        return Err(Error::input(format!("frame {f} out of range")));
    }
    let mut views = Vec::new();
    let (mut pred_hdr, mut gt_hdr) = (Vec::new(), Vec::new());
    let mut finite = true;
    for &f in &frames {
        let meta = &data.frames[f];
        let position = data.training.iter().position(|t| *t == f);
        let gain = match position {
            Some(k) => model.wb.gain(k)?,
            None => tag_gain(model, &training, meta.exposure_tag)?,
        };
        let set = if position.is_some() { ViewSet::Training } else { ViewSet::HeldOut };
        let v = render_view(model, &meta.camera, meta.time, spec.z_near, spec.z_far, opts.samples)?;
        finite &= v.hdr.data().iter().all(|e| e.is_finite() && *e >= 0.0);
        let ldr = tonemap_image(model, &v.hdr, gain)?;
        views.push(score(set, f, &ldr, &data.ldr[f], &data.dynamic_mask[f])?);
        if position.is_some() {
            pred_hdr.push(v.hdr);
            gt_hdr.push(data.hdr[f].clone());
        }
        if let (Some(k), Some(off)) = (position, opts.novel_offset) {
            let cam = displaced_camera(&meta.camera, off)?;
            let truth = oracle_view(spec, &cam, f as f64)?;
            let gt = truth.hdr.map(|e| gt_response(meta.exposure_scale * e, spec.gamma));
            let nv = render_view(model, &cam, meta.time, spec.z_near, spec.z_far, opts.samples)?;
            finite &= nv.hdr.data().iter().all(|e| e.is_finite() && *e >= 0.0);
            views.push(score(ViewSet::Novel, f, &tonemap_image(model, &nv.hdr, model.wb.gain(k)?)?, &gt, &truth.dynamic_mask)?);
        }
    }
    let mut checks = vec![Check {
        name: "finite-radiance".into(),
        passed: finite,
        detail: "rendered HDR is finite and non-negative".into(),
    }];
    let bad_metric = views.iter().find(|v| !(v.psnr >= 0.0) || !(-1.0..=1.0).contains(&v.ssim));
    checks.push(Check {
        name: "metric-range".into(),
        passed: bad_metric.is_none(),
        detail: bad_metric.map_or("PSNR >= 0 or infinite, SSIM in [-1, 1]".into(), |v| format!("{} frame {}: PSNR {}, SSIM {}", v.set.as_str(), v.frame, v.psnr, v.ssim)),
    });

    let (mut crf_rmse, mut crf_rmse_unaligned_v) = (None, None);
    if !matches!(model.curve, ToneCurve::Disabled) {
        let pts = model.curve.sampled();
        match crf_recovery_error(&pts, spec.gamma) {
            Ok(e) => {
                crf_rmse = Some(e);
                crf_rmse_unaligned_v = Some(crf_rmse_unaligned(&pts, spec.gamma));
                checks.push(Check { name: "curve-monotone".into(), passed: true, detail: "tone curve is non-decreasing".into() });
            }
            Err(Error::Invariant(msg)) => checks.push(Check { name: "curve-monotone".into(), passed: false, detail: msg }),
            Err(e) => return Err(e),
        }
    }

    let hdr = if opts.hdr && !pred_hdr.is_empty() { Some(hdr_errors(&pred_hdr, &gt_hdr, data)?) } else { None };

    let mut flow = None;
    if opts.flow {
        let (mut sum_all, mut n_all, mut dyn_vals) = (0.0, 0usize, Vec::new());
        for k in 0..training.len().saturating_sub(1) {
            let (fi, fj) = (data.training[k], data.training[k + 1]);
            if !frames.contains(&fi) {
                continue;
            }
            let pred = render_flow(model, &training, k, k + 1, spec.z_near, spec.z_far, opts.samples)?;
            let gt = oracle_flow(spec, fi, fj)?;
            if let Ok(e) = flow_epe(&pred, &gt, None) {
                sum_all += e;
                n_all += 1;
            }
            if let Ok(e) = flow_epe(&pred, &gt, Some(&data.dynamic_mask[fi])) {
                dyn_vals.push(e);
            }
        }
        if n_all > 0 {
            flow = Some(FlowErrors {
                pairs: n_all,
                epe_all: sum_all / n_all as f64,
                epe_dynamic: (!dyn_vals.is_empty()).then(|| dyn_vals.iter().sum::<f64>() / dyn_vals.len() as f64),
            });
        }
    }

    Ok(EvalReport {
        summaries: summarize(&views),
        views,
        hdr,
        crf_rmse,
        crf_rmse_unaligned: crf_rmse_unaligned_v,
        flow,
        checks,
    })
}
