//! Image, radiance, response-curve and flow metrics.

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::image::Image;
use crate::synth::FlowMap;
use crate::tonemap::{CONTROL_POINTS, SEGMENTS};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_mask(img: &Image, mask: &[bool]) -> Result<()> {
    if mask.len() != img.width() * img.height() {
        return Err(Error::input("mask size does not match the image"));
    }
    Ok(())
}

/// Mean squared error over the pixels selected by `mask` (all when `None`).
pub fn mse(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let ch = a.channels();
    if let Some(m) = mask {
        check_mask(a, m)?;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (k, (pa, pb)) in a.data().chunks(ch).zip(b.data().chunks(ch)).enumerate() {
        if mask.is_none_or(|m| m[k]) {
            sum += pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            n += ch;
        }
    }
    if n == 0 {
        return Err(Error::input("empty mask"));
    }
    Ok(sum / n as f64)
}

/// `10 log10(1 / MSE)` for images in [0, 1]; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_masked(a, b, None)
}

pub fn psnr_masked(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    let m = mse(a, b, mask)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filter of one channel (`w x h` plane).
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window SSIM values, `(width, height, channel)`-major over valid window positions.
pub fn ssim_map(a: &Image, b: &Image) -> Result<(usize, usize, Vec<f64>)> {
    a.ensure_same_shape(b)?;
    let (w, h, ch) = a.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::input(format!("images of {w}x{h} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_kernel();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut out = Vec::with_capacity(ow * oh * ch);
    for c in 0..ch {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(ch).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(ch).copied().collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let (ma, mb) = (filter_valid(&pa, w, h, &k), filter_valid(&pb, w, h, &k));
        let (saa, sbb, sab) = (
            filter_valid(&sq(&pa, &pa), w, h, &k),
            filter_valid(&sq(&pb, &pb), w, h, &k),
            filter_valid(&sq(&pa, &pb), w, h, &k),
        );
        for i in 0..ow * oh {
            let (va, vb, cov) = (saa[i] - ma[i] * ma[i], sbb[i] - mb[i] * mb[i], sab[i] - ma[i] * mb[i]);
            out.push(
                ((2.0 * ma[i] * mb[i] + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma[i] * ma[i] + mb[i] * mb[i] + SSIM_C1) * (va + vb + SSIM_C2)),
            );
        }
    }
    Ok((ow, oh, out))
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (_, _, m) = ssim_map(a, b)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// SSIM averaged over windows whose center pixel is in `mask`.
pub fn ssim_masked(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    check_mask(a, mask)?;
    let (ow, oh, m) = ssim_map(a, b)?;
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for c in 0..a.channels() {
        for y in 0..oh {
            for x in 0..ow {
                if mask[(y + r) * a.width() + x + r] {
                    sum += m[c * ow * oh + y * ow + x];
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::input("mask selects no SSIM window"));
    }
    Ok(sum / n as f64)
}

/// Per-channel least-squares scale `s` minimizing `sum (s pred - gt)^2` over `mask`.
pub fn fit_scale(pred: &Image, gt: &Image, mask: &[bool]) -> Result<[f64; 3]> {
    pred.ensure_same_shape(gt)?;
    check_mask(pred, mask)?;
    if !mask.iter().any(|m| *m) {
        return Err(Error::input("empty mask"));
    }
    let ch = pred.channels();
    Ok(std::array::from_fn(|c| {
        let (mut pg, mut pp) = (0.0, 0.0);
        for (k, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let (p, g) = (pred.data()[k * ch + c], gt.data()[k * ch + c]);
            pg += p * g;
            pp += p * p;
        }
        if pp > 0.0 { pg / pp } else { 0.0 }
    }))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Median `|s pred - gt| / gt` in percent per channel, for given scales.
pub fn relative_error_with_scale(pred: &Image, gt: &Image, scale: [f64; 3], mask: &[bool]) -> Result<[f64; 3]> {
    pred.ensure_same_shape(gt)?;
    check_mask(pred, mask)?;
    if !mask.iter().any(|m| *m) {
        return Err(Error::input("empty mask"));
    }
    let ch = pred.channels();
    Ok(std::array::from_fn(|c| {
        let errs = mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(k, _)| {
                let (p, g) = (pred.data()[k * ch + c], gt.data()[k * ch + c]);
                (scale[c] * p - g).abs() / g
            })
            .collect();
        100.0 * median(errs)
    }))
}

/// Scale-aligned HDR error: the scale is fitted over `mask`, then the median
/// relative error is reported there.
pub fn hdr_relative_error(pred: &Image, gt: &Image, mask: &[bool]) -> Result<[f64; 3]> {
    let s = fit_scale(pred, gt, mask)?;
    relative_error_with_scale(pred, gt, s, mask)
}

/// Whether every channel of a sampled curve is non-decreasing.
pub fn check_monotone(points: &[[f64; CONTROL_POINTS]; 3]) -> Result<()> {
    for (c, ch) in points.iter().enumerate() {
        if let Some(k) = ch.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Invariant(format!("response channel {c} decreases at control point {k}")));
        }
    }
    Ok(())
}

/// Linear interpolation of a 256-point curve.
fn sample_curve(ch: &[f64; CONTROL_POINTS], x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0) * SEGMENTS as f64;
    let k = (t.floor() as usize).min(SEGMENTS - 1);
    let lam = t - k as f64;
    ch[k] * (1.0 - lam) + ch[k + 1] * lam
}

/// Per-channel RMSE between a learned curve and `x^(1/gamma)` on the grid.
///
/// The learned curve is only defined up to the scale of the radiance it was
/// trained with: a scene brighter by `1/a` yields `g(x) = g_gt(x / a)`. The
/// curve is therefore compared as `g(a x)` with `a` in (0, 1] chosen per
/// channel to minimize the error; `a = 1` is the unaligned comparison.
pub fn crf_recovery_error(points: &[[f64; CONTROL_POINTS]; 3], gamma: f64) -> Result<[f64; 3]> {
    check_monotone(points)?;
    if !(gamma > 0.0) {
        return Err(Error::input("gamma must be positive"));
    }
    let rmse = |ch: &[f64; CONTROL_POINTS], a: f64| {
        let s: f64 = (0..CONTROL_POINTS)
            .map(|k| {
                let x = k as f64 / SEGMENTS as f64;
                (sample_curve(ch, a * x) - x.powf(1.0 / gamma)).powi(2)
            })
            .sum();
        (s / CONTROL_POINTS as f64).sqrt()
    };
    Ok(std::array::from_fn(|c| {
        let ch = &points[c];
        // coarse grid then golden-section refinement around the best cell
        let grid = 200;
        let best = (1..=grid).map(|i| i as f64 / grid as f64).min_by(|a, b| rmse(ch, *a).total_cmp(&rmse(ch, *b))).unwrap();
        let (mut lo, mut hi) = ((best - 1.0 / grid as f64).max(1e-6), (best + 1.0 / grid as f64).min(1.0));
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let (m1, m2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
            if rmse(ch, m1) < rmse(ch, m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        rmse(ch, 0.5 * (lo + hi)).min(rmse(ch, best))
    }))
}

/// Unaligned RMSE against `x^(1/gamma)`.
pub fn crf_rmse_unaligned(points: &[[f64; CONTROL_POINTS]; 3], gamma: f64) -> [f64; 3] {
    std::array::from_fn(|c| {
        let s: f64 = (0..CONTROL_POINTS)
            .map(|k| {
                let x = k as f64 / SEGMENTS as f64;
                (points[c][k] - x.powf(1.0 / gamma)).powi(2)
            })
            .sum();
        (s / CONTROL_POINTS as f64).sqrt()
    })
}

/// Mean end-point error over pixels valid in both maps and selected by `mask`.
pub fn flow_epe(pred: &[Option<Vec2>], gt: &FlowMap, mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != gt.valid.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::input("flow sizes differ"));
    }
    let w = gt.flow.width();
    let (mut sum, mut n) = (0.0, 0usize);
    for (k, p) in pred.iter().enumerate() {
        if !mask.is_none_or(|m| m[k]) {
            continue;
        }
        if let (Some(p), Some(g)) = (p, gt.at(k % w, k / w)) {
            sum += (p - g).norm();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::input("no pixel has both predicted and ground-truth flow"));
    }
    Ok(sum / n as f64)
}
