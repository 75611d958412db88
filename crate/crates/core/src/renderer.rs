//! Differentiable volume rendering.
//!
//! The per-ray kernels here take field outputs for the samples of one ray
//! and produce composited quantities; each has a matching backward that
//! turns gradients on those quantities into gradients on the field outputs.
//! The point-level `render_*` functions wrap the kernels for a single ray.

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::fields::{dy, st, FieldParams};
use crate::geometry::{sample_along_ray, CameraModel, Ray, Stratification, Vec2, Vec3};

/// Regularizer of weight-normalized expectations (depth, expected point and flow).
pub const WEIGHT_EPS: f64 = 1e-8;
/// Rays whose dynamic weight sums below this are excluded from flow losses.
pub const FLOW_MIN_WEIGHT: f64 = 1e-4;
/// Guards the blended radiance where both branches are empty.
const DENSITY_EPS: f64 = 1e-12;

/// Alpha compositing quantities of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeWeights {
    pub alpha: Vec<f64>,
    /// Transmittance before each sample; the first entry is 1.
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance left after the last sample.
    pub t_bg: f64,
}

impl CompositeWeights {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Sample spacings: `z[k+1] - z[k]`, with the last bin closed at `z_far`.
pub fn deltas(z: &[f64], z_far: f64) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::input("no samples to composite"));
    }
    if z.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::input("sample depths must be strictly increasing"));
    }
    let last = *z.last().unwrap();
    if !(z_far >= last) {
        return Err(Error::input("z_far lies before the last sample"));
    }
    Ok(z.windows(2).map(|w| w[1] - w[0]).chain([z_far - last]).collect())
}

/// Weights from densities and spacings.
pub fn weights_from_density(sigma: &[f64], delta: &[f64]) -> CompositeWeights {
    let n = sigma.len();
    let mut alpha = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut optical = 0.0f64;
    for k in 0..n {
        let tau = sigma[k] * delta[k];
        let t = (-optical).exp();
        let a = -(-tau).exp_m1();
        trans.push(t);
        alpha.push(a);
        weights.push(t * a);
        optical += tau;
    }
    CompositeWeights {
        alpha,
        transmittance: trans,
        weights,
        t_bg: (-optical).exp(),
    }
}

/// Chain `dL/dw` to `dL/dσ`: `dL/dσ_k = Δ_k (T_{k+1} g_k − Σ_{m>k} w_m g_m)`.
pub fn weights_backward(delta: &[f64], cw: &CompositeWeights, g_w: &[f64], g_sigma: &mut [f64]) {
    let n = g_w.len();
    let mut tail = 0.0;
    for k in (0..n).rev() {
        let t_next = if k + 1 < n { cw.transmittance[k + 1] } else { cw.t_bg };
        g_sigma[k] += delta[k] * (t_next * g_w[k] - tail);
        tail += cw.weights[k] * g_w[k];
    }
}

/// Composite `values` along a ray.
pub fn composite(densities: &[f64], z: &[f64], z_far: f64, values: &[[f64; 3]]) -> Result<([f64; 3], CompositeWeights)> {
    if densities.len() != z.len() || values.len() != z.len() {
        return Err(Error::input("densities, depths and values differ in length"));
    }
    if densities.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::input("densities must be non-negative"));
    }
    let delta = deltas(z, z_far)?;
    let cw = weights_from_density(densities, &delta);
    let mut color = [0.0; 3];
    for (w, v) in cw.weights.iter().zip(values) {
        for c in 0..3 {
            color[c] += w * v[c];
        }
    }
    Ok((color, cw))
}

fn weighted_mean(weights: &[f64], total: f64, value: impl Fn(usize) -> f64) -> f64 {
    weights.iter().enumerate().map(|(k, w)| w * value(k)).sum::<f64>() / (total + WEIGHT_EPS)
}

/// Combined static + dynamic composite of one ray.
#[derive(Debug, Clone)]
pub struct CombinedRay {
    pub hdr: [f64; 3],
    pub depth: f64,
    pub delta: Vec<f64>,
    pub cw: CompositeWeights,
    color: Vec<[f64; 3]>,
}

/// Blend the branches per sample (`σ = vσ_st + (1−v)σ_dy`, radiance
/// density-weighted) and composite.
pub fn combined_forward(st_rows: ArrayView2<f64>, dy_rows: ArrayView2<f64>, z: &[f64], z_far: f64) -> Result<CombinedRay> {
    let n = z.len();
    let mut sigma = Vec::with_capacity(n);
    let mut color = Vec::with_capacity(n);
    for k in 0..n {
        let (s, d) = (st_rows.row(k), dy_rows.row(k));
        let v = s[st::BLEND];
        let a = v * s[st::SIGMA];
        let b = (1.0 - v) * d[dy::SIGMA];
        let den = a + b + DENSITY_EPS;
        sigma.push(a + b);
        color.push(std::array::from_fn(|c| (a * s[st::RGB + c] + b * d[dy::RGB + c]) / den));
    }
    let delta = deltas(z, z_far)?;
    let cw = weights_from_density(&sigma, &delta);
    let mut hdr = [0.0; 3];
    for k in 0..n {
        for c in 0..3 {
            hdr[c] += cw.weights[k] * color[k][c];
        }
    }
    let total = cw.total();
    let depth = weighted_mean(&cw.weights, total, |k| z[k]);
    Ok(CombinedRay { hdr, depth, delta, cw, color })
}

/// Backward of [`combined_forward`] given `dL/dE` and `dL/d(depth)`.
pub fn combined_backward(
    st_rows: ArrayView2<f64>,
    dy_rows: ArrayView2<f64>,
    z: &[f64],
    ray: &CombinedRay,
    g_hdr: [f64; 3],
    g_depth: f64,
    mut d_st: ArrayViewMut2<f64>,
    mut d_dy: ArrayViewMut2<f64>,
) {
    let n = z.len();
    let total = ray.cw.total();
    let mut g_w = vec![0.0; n];
    for k in 0..n {
        g_w[k] = (0..3).map(|c| g_hdr[c] * ray.color[k][c]).sum::<f64>() + g_depth * (z[k] - ray.depth) / (total + WEIGHT_EPS);
    }
    let mut g_sigma = vec![0.0; n];
    weights_backward(&ray.delta, &ray.cw, &g_w, &mut g_sigma);
    for k in 0..n {
        let (s, d) = (st_rows.row(k), dy_rows.row(k));
        let v = s[st::BLEND];
        let a = v * s[st::SIGMA];
        let b = (1.0 - v) * d[dy::SIGMA];
        let den = a + b + DENSITY_EPS;
        let w = ray.cw.weights[k];
        let cb = ray.color[k];
        // dL/d(color_k) = w_k g_hdr
        let mut g_a = g_sigma[k];
        let mut g_b = g_sigma[k];
        for c in 0..3 {
            let gc = w * g_hdr[c];
            d_st[[k, st::RGB + c]] += gc * a / den;
            d_dy[[k, dy::RGB + c]] += gc * b / den;
            g_a += gc * (s[st::RGB + c] - cb[c]) / den;
            g_b += gc * (d[dy::RGB + c] - cb[c]) / den;
        }
        d_st[[k, st::SIGMA]] += g_a * v;
        d_dy[[k, dy::SIGMA]] += g_b * (1.0 - v);
        d_st[[k, st::BLEND]] += g_a * s[st::SIGMA] - g_b * d[dy::SIGMA];
    }
}

/// Dynamic-branch-only composite of one ray.
#[derive(Debug, Clone)]
pub struct DynamicRay {
    pub hdr: [f64; 3],
    pub delta: Vec<f64>,
    pub cw: CompositeWeights,
}

pub fn dynamic_forward(dy_rows: ArrayView2<f64>, z: &[f64], z_far: f64) -> Result<DynamicRay> {
    let sigma: Vec<f64> = dy_rows.rows().into_iter().map(|r| r[dy::SIGMA]).collect();
    let delta = deltas(z, z_far)?;
    let cw = weights_from_density(&sigma, &delta);
    let mut hdr = [0.0; 3];
    for (k, r) in dy_rows.rows().into_iter().enumerate() {
        for c in 0..3 {
            hdr[c] += cw.weights[k] * r[dy::RGB + c];
        }
    }
    Ok(DynamicRay { hdr, delta, cw })
}

/// Backward of [`dynamic_forward`] with an extra per-sample `dL/dw` term.
pub fn dynamic_backward(dy_rows: ArrayView2<f64>, ray: &DynamicRay, g_hdr: [f64; 3], extra_g_w: Option<&[f64]>, mut d_dy: ArrayViewMut2<f64>) {
    let n = ray.delta.len();
    let mut g_w = vec![0.0; n];
    for (k, r) in dy_rows.rows().into_iter().enumerate() {
        g_w[k] = (0..3).map(|c| g_hdr[c] * r[dy::RGB + c]).sum::<f64>() + extra_g_w.map_or(0.0, |e| e[k]);
        for c in 0..3 {
            d_dy[[k, dy::RGB + c]] += ray.cw.weights[k] * g_hdr[c];
        }
    }
    let mut g_sigma = vec![0.0; n];
    weights_backward(&ray.delta, &ray.cw, &g_w, &mut g_sigma);
    for k in 0..n {
        d_dy[[k, dy::SIGMA]] += g_sigma[k];
    }
}

/// Expected 3D point and scene flow under dynamic-branch weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedFlow {
    pub point: Vec3,
    pub flow: Vec3,
}

/// Direction of a neighbor frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDir {
    Forward,
    Backward,
}

impl FlowDir {
    /// Column of the flow toward this neighbor in the dynamic head.
    pub fn flow_col(self) -> usize {
        match self {
            FlowDir::Forward => dy::FLOW_FWD,
            FlowDir::Backward => dy::FLOW_BWD,
        }
    }

    /// Column of the flow from the neighbor back to the source frame.
    pub fn return_col(self) -> usize {
        match self {
            FlowDir::Forward => dy::FLOW_BWD,
            FlowDir::Backward => dy::FLOW_FWD,
        }
    }

    pub fn occ_col(self) -> usize {
        match self {
            FlowDir::Forward => dy::OCC_FWD,
            FlowDir::Backward => dy::OCC_BWD,
        }
    }
}

/// `None` when the dynamic weights sum below [`FLOW_MIN_WEIGHT`].
pub fn expected_flow_forward(dy_rows: ArrayView2<f64>, positions: &[Vec3], ray: &DynamicRay, dir: FlowDir) -> Option<ExpectedFlow> {
    let total = ray.cw.total();
    if total < FLOW_MIN_WEIGHT {
        return None;
    }
    let fc = dir.flow_col();
    let w = &ray.cw.weights;
    let point = Vec3::from_fn(|a, _| weighted_mean(w, total, |k| positions[k][a]));
    let flow = Vec3::from_fn(|a, _| weighted_mean(w, total, |k| dy_rows[[k, fc + a]]));
    Some(ExpectedFlow { point, flow })
}

/// `dL/dw` contributions and direct flow gradients of [`expected_flow_forward`].
pub fn expected_flow_backward(
    dy_rows: ArrayView2<f64>,
    positions: &[Vec3],
    ray: &DynamicRay,
    dir: FlowDir,
    out: &ExpectedFlow,
    g_point: Vec3,
    g_flow: Vec3,
    g_w: &mut [f64],
    mut d_dy: ArrayViewMut2<f64>,
) {
    let total = ray.cw.total() + WEIGHT_EPS;
    let fc = dir.flow_col();
    for k in 0..g_w.len() {
        let mut g = 0.0;
        for a in 0..3 {
            g += g_point[a] * (positions[k][a] - out.point[a]) / total;
            g += g_flow[a] * (dy_rows[[k, fc + a]] - out.flow[a]) / total;
            d_dy[[k, fc + a]] += g_flow[a] * ray.cw.weights[k] / total;
        }
        g_w[k] += g;
    }
}

/// Positions after applying the flow toward `dir`.
pub fn warp_positions(dy_rows: ArrayView2<f64>, positions: &[Vec3], dir: FlowDir) -> Vec<Vec3> {
    let fc = dir.flow_col();
    positions
        .iter()
        .enumerate()
        .map(|(k, x)| x + Vec3::new(dy_rows[[k, fc]], dy_rows[[k, fc + 1]], dy_rows[[k, fc + 2]]))
        .collect()
}

/// Result of [`render_combined`].
#[derive(Debug, Clone)]
pub struct CombinedRender {
    pub hdr: [f64; 3],
    pub depth: f64,
    pub weights: CompositeWeights,
}

fn samples(ray: &Ray, count: usize, strat: Stratification) -> Result<(Vec<f64>, Vec<Vec3>)> {
    let s = sample_along_ray(ray, count, strat)?;
    Ok((s.iter().map(|s| s.z).collect(), s.iter().map(|s| s.position).collect()))
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Static + dynamic HDR render of one ray at time `t`.
pub fn render_combined(params: &FieldParams, ray: &Ray, t: f64, count: usize, strat: Stratification) -> Result<CombinedRender> {
    check_time(t)?;
    let (z, xs) = samples(ray, count, strat)?;
    let ds = vec![ray.direction; count];
    let sb = params.static_batch(&xs, &ds);
    let db = params.dynamic_batch(&xs, &ds, &vec![t; count]);
    let r = combined_forward(sb.out.view(), db.out.view(), &z, ray.z_far)?;
    Ok(CombinedRender {
        hdr: r.hdr,
        depth: r.depth,
        weights: r.cw,
    })
}

/// Dynamic-only HDR render of one ray at time `t`.
pub fn render_dynamic(params: &FieldParams, ray: &Ray, t: f64, count: usize, strat: Stratification) -> Result<[f64; 3]> {
    check_time(t)?;
    let (z, xs) = samples(ray, count, strat)?;
    let db = params.dynamic_batch(&xs, &vec![ray.direction; count], &vec![t; count]);
    Ok(dynamic_forward(db.out.view(), &z, ray.z_far)?.hdr)
}

fn neighbor(times: &[f64], i: usize, j: usize) -> Result<FlowDir> {
    if i >= times.len() || j >= times.len() {
        return Err(Error::input(format!("frame {} out of range for {} frames", i.max(j), times.len())));
    }
    match j as isize - i as isize {
        1 => Ok(FlowDir::Forward),
        -1 => Ok(FlowDir::Backward),
        _ => Err(Error::input(format!("frames {i} and {j} are not neighbors"))),
    }
}

/// Render frame `j`'s dynamic radiance warped onto ray `ray_i` of frame `i`.
///
/// `times` lists the normalized time of every frame in sequence order.
pub fn render_warped(params: &FieldParams, ray: &Ray, times: &[f64], i: usize, j: usize, count: usize, strat: Stratification) -> Result<[f64; 3]> {
    let dir = neighbor(times, i, j)?;
    let (z, xs) = samples(ray, count, strat)?;
    let ds = vec![ray.direction; count];
    let di = params.dynamic_batch(&xs, &ds, &vec![times[i]; count]);
    let warped = warp_positions(di.out.view(), &xs, dir);
    let dj = params.dynamic_batch(&warped, &ds, &vec![times[j]; count]);
    Ok(dynamic_forward(dj.out.view(), &z, ray.z_far)?.hdr)
}

/// Expected-flow render and its projection into camera `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRender {
    pub point: Vec3,
    pub flow: Vec3,
    pub pixel: Vec2,
}

/// `Ok(None)` marks a ray with too little dynamic weight for a defined flow.
pub fn render_expected_flow(
    params: &FieldParams,
    ray: &Ray,
    times: &[f64],
    i: usize,
    j: usize,
    camera_j: &CameraModel,
    count: usize,
    strat: Stratification,
) -> Result<Option<FlowRender>> {
    let dir = neighbor(times, i, j)?;
    let (z, xs) = samples(ray, count, strat)?;
    let db = params.dynamic_batch(&xs, &vec![ray.direction; count], &vec![times[i]; count]);
    let dr = dynamic_forward(db.out.view(), &z, ray.z_far)?;
    let Some(ef) = expected_flow_forward(db.out.view(), &xs, &dr, dir) else {
        return Ok(None);
    };
    let pixel = camera_j.project(&(ef.point + ef.flow))?;
    Ok(Some(FlowRender {
        point: ef.point,
        flow: ef.flow,
        pixel,
    }))
}
