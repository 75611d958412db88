//! The weighted training objective over a ray batch, with exact gradients
//! for every parameter group.
//!
//! Evaluation runs in three phases: a forward pass over ray chunks that
//! renders everything the loss needs, a sequential pass that evaluates the
//! loss terms and their gradients on rendered quantities, and a backward pass
//! over the same chunks into the field weights. Chunk results are reduced in
//! order, so the outcome does not depend on the thread count.

use nalgebra::Matrix2x3;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{loss_cyc, loss_depth, loss_flow, loss_reg, photometric, CycleSample, FlowPair, LossBreakdown, LossWeights, Norm};
use crate::error::{Error, Result};
use crate::fields::{dy, st, DynamicBatch, StaticBatch};
use crate::geometry::{sample_depths, FrameMeta, Ray, Stratification, Vec2, Vec3};
use crate::model::{Model, ModelGrad};
use crate::parallel::map_chunks;
use crate::renderer::{
    combined_backward, combined_forward, dynamic_backward, dynamic_forward, expected_flow_backward, expected_flow_forward,
    warp_positions, CombinedRay, DynamicRay, ExpectedFlow, FlowDir,
};
use crate::tonemap::{CurveGrad, PreparedCurve, ToneMapper};

/// Sampling and weighting settings of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub samples: usize,
    pub weights: LossWeights,
    pub norm: Norm,
    /// Rays per parallel work item.
    pub chunk_rays: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            weights: LossWeights::default(),
            norm: Norm::L1,
            chunk_rays: 8,
        }
    }
}

/// How sample depths are drawn for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSampling {
    Midpoint,
    /// Independent jitter per ray derived from one seed.
    Jittered(u64),
}

impl BatchSampling {
    fn for_ray(self, r: usize) -> Stratification {
        match self {
            BatchSampling::Midpoint => Stratification::Midpoint,
            BatchSampling::Jittered(seed) => Stratification::Jittered {
                seed: seed ^ (r as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            },
        }
    }
}

/// Rays of one training frame with their supervision.
#[derive(Debug, Clone)]
pub struct SupervisionBatch {
    /// Index of the frame in the training sequence.
    pub frame: usize,
    pub rays: Vec<Ray>,
    /// Pixel center each ray passes through.
    pub pixels: Vec<Vec2>,
    /// Captured LDR colors.
    pub colors: Vec<[f64; 3]>,
    /// Observed pixel displacement toward the next and previous frame.
    pub flow_forward: Vec<Option<Vec2>>,
    pub flow_backward: Vec<Option<Vec2>>,
    /// Observed depth, known only up to scale and shift.
    pub depth: Vec<Option<f64>>,
    pub sampling: BatchSampling,
}

impl SupervisionBatch {
    fn validate(&self, frames: &[FrameMeta]) -> Result<()> {
        let n = self.rays.len();
        if self.frame >= frames.len() {
            return Err(Error::input(format!("batch frame {} out of range", self.frame)));
        }
        if [self.pixels.len(), self.colors.len(), self.flow_forward.len(), self.flow_backward.len(), self.depth.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::input("supervision arrays differ in length"));
        }
        if self.colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::input("supervision colors must lie in [0, 1]"));
        }
        Ok(())
    }
}

struct Neighbor {
    dir: FlowDir,
    batch: DynamicBatch,
    rays: Vec<DynamicRay>,
    /// Expected flow and the Jacobian of its projection into the neighbor.
    flow: Vec<Option<(ExpectedFlow, Vec2, Matrix2x3<f64>)>>,
}

struct ChunkForward {
    start: usize,
    z: Vec<Vec<f64>>,
    xs: Vec<Vec3>,
    sb: StaticBatch,
    di: DynamicBatch,
    comb: Vec<CombinedRay>,
    dyn_i: Vec<DynamicRay>,
    nb: Vec<Neighbor>,
}

fn sample_rays(rays: &[Ray], start: usize, samples: usize, sampling: BatchSampling) -> Result<(Vec<Vec<f64>>, Vec<Vec3>, Vec<Vec3>)> {
    let mut zs = Vec::with_capacity(rays.len());
    let mut xs = Vec::with_capacity(rays.len() * samples);
    let mut ds = Vec::with_capacity(rays.len() * samples);
    for (q, ray) in rays.iter().enumerate() {
        let z = sample_depths(ray.z_near, ray.z_far, samples, sampling.for_ray(start + q))?;
        xs.extend(z.iter().map(|&z| ray.at(z)));
        ds.extend(std::iter::repeat_n(ray.direction, samples));
        zs.push(z);
    }
    Ok((zs, xs, ds))
}

fn forward_chunk(
    model: &Model,
    frames: &[FrameMeta],
    batch: &SupervisionBatch,
    range: std::ops::Range<usize>,
    dirs: &[(FlowDir, usize)],
    samples: usize,
) -> Result<ChunkForward> {
    let rays = &batch.rays[range.clone()];
    let (z, xs, ds) = sample_rays(rays, range.start, samples, batch.sampling)?;
    let f = &model.fields;
    let n = xs.len();
    let ti = frames[batch.frame].time;
    let sb = f.static_batch(&xs, &ds);
    let di = f.dynamic_batch(&xs, &ds, &vec![ti; n]);
    let mut comb = Vec::with_capacity(rays.len());
    let mut dyn_i = Vec::with_capacity(rays.len());
    for (q, ray) in rays.iter().enumerate() {
        let rows = q * samples..(q + 1) * samples;
        comb.push(combined_forward(sb.out.slice(s![rows.clone(), ..]), di.out.slice(s![rows.clone(), ..]), &z[q], ray.z_far)?);
        dyn_i.push(dynamic_forward(di.out.slice(s![rows, ..]), &z[q], ray.z_far)?);
    }
    let mut nb = Vec::with_capacity(dirs.len());
    for &(dir, j) in dirs {
        let warped = warp_positions(di.out.view(), &xs, dir);
        let dj = f.dynamic_batch(&warped, &ds, &vec![frames[j].time; n]);
        let mut wr = Vec::with_capacity(rays.len());
        let mut flow = Vec::with_capacity(rays.len());
        for (q, ray) in rays.iter().enumerate() {
            let rows = q * samples..(q + 1) * samples;
            wr.push(dynamic_forward(dj.out.slice(s![rows.clone(), ..]), &z[q], ray.z_far)?);
            let ef = expected_flow_forward(di.out.slice(s![rows.clone(), ..]), &xs[rows], &dyn_i[q], dir);
            flow.push(ef.and_then(|ef| {
                frames[j]
                    .camera
                    .project_with_jacobian(&(ef.point + ef.flow))
                    .ok()
                    .map(|(p, jac)| (ef, p, jac))
            }));
        }
        nb.push(Neighbor { dir, batch: dj, rays: wr, flow });
    }
    Ok(ChunkForward { start: range.start, z, xs, sb, di, comb, dyn_i, nb })
}

/// Gradients on rendered quantities, indexed by global ray (and neighbor slot).
struct RenderGrads {
    hdr_cb: Vec<[f64; 3]>,
    depth: Vec<f64>,
    hdr_warp: Vec<Vec<[f64; 3]>>,
    flow_point: Vec<Vec<Vec3>>,
    /// Per sample, flattened over the batch.
    cyc: Vec<Vec<super::CycleGrad>>,
    reg: Vec<FlowPair>,
}

fn backward_chunk(model: &Model, ch: &ChunkForward, g: &RenderGrads, samples: usize) -> Vec<f64> {
    let f = &model.fields;
    let n = ch.xs.len();
    let mut grad = vec![0.0; f.weights().len()];
    let mut d_st = Array2::zeros((n, st::WIDTH));
    let mut d_di = Array2::zeros((n, dy::WIDTH));
    let mut d_dj: Vec<Array2<f64>> = ch.nb.iter().map(|_| Array2::zeros((n, dy::WIDTH))).collect();
    let base = ch.start * samples;
    for (q, comb) in ch.comb.iter().enumerate() {
        let r = ch.start + q;
        let rows = q * samples..(q + 1) * samples;
        combined_backward(
            ch.sb.out.slice(s![rows.clone(), ..]),
            ch.di.out.slice(s![rows.clone(), ..]),
            &ch.z[q],
            comb,
            g.hdr_cb[r],
            g.depth[r],
            d_st.slice_mut(s![rows.clone(), ..]),
            d_di.slice_mut(s![rows.clone(), ..]),
        );
        let mut g_w = vec![0.0; samples];
        for (m, nb) in ch.nb.iter().enumerate() {
            dynamic_backward(nb.batch.out.slice(s![rows.clone(), ..]), &nb.rays[q], g.hdr_warp[m][r], None, d_dj[m].slice_mut(s![rows.clone(), ..]));
            if let Some((ef, _, _)) = &nb.flow[q] {
                let gp = g.flow_point[m][r];
                if gp != Vec3::zeros() {
                    expected_flow_backward(
                        ch.di.out.slice(s![rows.clone(), ..]),
                        &ch.xs[rows.clone()],
                        &ch.dyn_i[q],
                        nb.dir,
                        ef,
                        gp,
                        gp,
                        &mut g_w,
                        d_di.slice_mut(s![rows.clone(), ..]),
                    );
                }
            }
        }
        if g_w.iter().any(|v| *v != 0.0) {
            dynamic_backward(ch.di.out.slice(s![rows.clone(), ..]), &ch.dyn_i[q], [0.0; 3], Some(&g_w), d_di.slice_mut(s![rows, ..]));
        }
    }
    for k in 0..n {
        let gr = g.reg[base + k];
        for a in 0..3 {
            d_di[[k, dy::FLOW_FWD + a]] += gr.forward[a];
            d_di[[k, dy::FLOW_BWD + a]] += gr.backward[a];
        }
        for (m, nb) in ch.nb.iter().enumerate() {
            let gc = g.cyc[m][base + k];
            for a in 0..3 {
                d_di[[k, nb.dir.flow_col() + a]] += gc.flow[a];
                d_dj[m][[k, nb.dir.return_col() + a]] += gc.flow_back[a];
            }
            d_di[[k, nb.dir.occ_col()]] += gc.occlusion;
        }
    }
    for (m, nb) in ch.nb.iter().enumerate() {
        let gx = f.dynamic_backward(&nb.batch, &d_dj[m], &mut grad, true).unwrap();
        let fc = nb.dir.flow_col();
        for (k, gx) in gx.iter().enumerate() {
            for a in 0..3 {
                d_di[[k, fc + a]] += gx[a];
            }
        }
    }
    f.dynamic_backward(&ch.di, &d_di, &mut grad, false);
    f.static_backward(&ch.sb, &d_st, &mut grad);
    grad
}

/// Neighbors of training frame `i` in sequence order.
pub fn neighbors(frames: usize, i: usize) -> Vec<(FlowDir, usize)> {
    let mut out = Vec::with_capacity(2);
    if i + 1 < frames {
        out.push((FlowDir::Forward, i + 1));
    }
    if i > 0 {
        out.push((FlowDir::Backward, i - 1));
    }
    out
}

/// Loss terms except the generative one, and optionally the gradient of
/// their weighted sum with respect to every parameter.
pub fn evaluate(
    model: &Model,
    frames: &[FrameMeta],
    batch: &SupervisionBatch,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ModelGrad>)> {
    batch.validate(frames)?;
    cfg.weights.validate()?;
    let w = &cfg.weights;
    let i = batch.frame;
    let s = cfg.samples;
    let n_rays = batch.rays.len();
    let dirs = neighbors(frames.len(), i);
    let chunks: Vec<ChunkForward> = map_chunks(n_rays, cfg.chunk_rays, |r| forward_chunk(model, frames, batch, r, &dirs, s))
        .into_iter()
        .collect::<Result<_>>()?;

    let prepared = model.curve.prepare();
    let mapper = ToneMapper::new(&prepared, &model.wb);
    let mut cg = prepared.zero_grad();
    let mut wg = vec![0.0; model.wb.log_gains().len()];
    let mut out = LossBreakdown::default();

    let comb: Vec<&CombinedRay> = chunks.iter().flat_map(|c| c.comb.iter()).collect();
    let mut grads = RenderGrads {
        hdr_cb: vec![[0.0; 3]; n_rays],
        depth: vec![0.0; n_rays],
        hdr_warp: vec![vec![[0.0; 3]; n_rays]; dirs.len()],
        flow_point: vec![vec![Vec3::zeros(); n_rays]; dirs.len()],
        cyc: Vec::with_capacity(dirs.len()),
        reg: Vec::new(),
    };

    // L_cb
    let ldr: Vec<[f64; 3]> = comb.iter().map(|c| mapper.forward(i, c.hdr, true)).collect::<Result<_>>()?;
    let (v, g) = photometric(&ldr, &batch.colors, cfg.norm)?;
    out.cb = v;
    if want_grad {
        for r in 0..n_rays {
            grads.hdr_cb[r] = mapper.backward(i, comb[r].hdr, true, g[r], &mut cg, &mut wg)?;
        }
    }

    // L_photo over (neighbor, ray) pairs
    let warp_hdr: Vec<Vec<[f64; 3]>> = (0..dirs.len())
        .map(|m| chunks.iter().flat_map(|c| c.nb[m].rays.iter().map(|r| r.hdr)).collect())
        .collect();
    let warp_ldr: Vec<[f64; 3]> = warp_hdr.iter().flatten().map(|e| mapper.forward(i, *e, true)).collect::<Result<_>>()?;
    let targets: Vec<[f64; 3]> = (0..dirs.len()).flat_map(|_| batch.colors.iter().copied()).collect();
    let (v, g) = photometric(&warp_ldr, &targets, cfg.norm)?;
    out.photo = v;
    if want_grad {
        for m in 0..dirs.len() {
            for r in 0..n_rays {
                grads.hdr_warp[m][r] = mapper.backward(i, warp_hdr[m][r], true, g[m * n_rays + r], &mut cg, &mut wg)?;
            }
        }
    }

    // L_flow
    let mut pred = Vec::with_capacity(dirs.len() * n_rays);
    let mut obs = Vec::with_capacity(dirs.len() * n_rays);
    let mut jacs = Vec::with_capacity(dirs.len() * n_rays);
    for (m, (dir, _)) in dirs.iter().enumerate() {
        let observed = match dir {
            FlowDir::Forward => &batch.flow_forward,
            FlowDir::Backward => &batch.flow_backward,
        };
        for c in &chunks {
            for (q, fl) in c.nb[m].flow.iter().enumerate() {
                let r = c.start + q;
                pred.push(fl.as_ref().map(|f| f.1));
                jacs.push(fl.as_ref().map(|f| f.2));
                obs.push(observed[r].map(|u| batch.pixels[r] + u));
            }
        }
    }
    let (v, g) = loss_flow(&pred, &obs)?;
    out.flow = v;
    if want_grad {
        let scale = w.beta_data;
        for (k, j) in jacs.iter().enumerate() {
            if let Some(j) = j {
                grads.flow_point[k / n_rays][k % n_rays] = j.transpose() * g[k] * scale;
            }
        }
    }

    // L_depth
    let depths: Vec<f64> = comb.iter().map(|c| c.depth).collect();
    let (v, g) = loss_depth(&depths, &batch.depth)?;
    out.depth = v;
    if want_grad {
        let scale = w.beta_data * w.beta_depth;
        for r in 0..n_rays {
            grads.depth[r] = g[r] * scale;
        }
    }

    // L_cyc, meaned over samples of all neighbors
    let mut cyc = Vec::new();
    for (m, (dir, _)) in dirs.iter().enumerate() {
        for c in &chunks {
            let (di, dj) = (&c.di.out, &c.nb[m].batch.out);
            for k in 0..c.xs.len() {
                let v3 = |a: &Array2<f64>, col: usize| Vec3::new(a[[k, col]], a[[k, col + 1]], a[[k, col + 2]]);
                cyc.push(CycleSample {
                    flow: v3(di, dir.flow_col()),
                    flow_back: v3(dj, dir.return_col()),
                    occlusion: di[[k, dir.occ_col()]],
                });
            }
        }
    }
    let (v, g) = loss_cyc(&cyc);
    out.cyc = v;
    let per_dir = n_rays * s;
    grads.cyc = (0..dirs.len())
        .map(|m| g[m * per_dir..(m + 1) * per_dir].iter().map(|g| scale_cyc(g, w.beta_cyc)).collect())
        .collect();

    // L_reg on the time-i flows
    let mut positions = Vec::with_capacity(n_rays);
    let mut flows = Vec::with_capacity(n_rays);
    for c in &chunks {
        for q in 0..c.comb.len() {
            let rows = q * s..(q + 1) * s;
            positions.push(c.xs[rows.clone()].to_vec());
            flows.push(
                rows.map(|k| FlowPair {
                    forward: Vec3::new(c.di.out[[k, dy::FLOW_FWD]], c.di.out[[k, dy::FLOW_FWD + 1]], c.di.out[[k, dy::FLOW_FWD + 2]]),
                    backward: Vec3::new(c.di.out[[k, dy::FLOW_BWD]], c.di.out[[k, dy::FLOW_BWD + 1]], c.di.out[[k, dy::FLOW_BWD + 2]]),
                })
                .collect::<Vec<_>>(),
            );
        }
    }
    let (terms, g) = loss_reg(&positions, &flows)?;
    out.sp = terms.sp;
    out.temp = terms.temp;
    out.min = terms.min;
    grads.reg = g
        .into_iter()
        .flatten()
        .map(|p| FlowPair {
            forward: p.forward * w.beta_reg,
            backward: p.backward * w.beta_reg,
        })
        .collect();

    // L_smooth
    out.smooth = model.curve.smoothness(&prepared, want_grad.then_some((&mut cg, w.beta_smooth)));
    out.combine(w);

    if !want_grad {
        return Ok((out, None));
    }
    let parts = map_chunks(chunks.len(), 1, |r| backward_chunk(model, &chunks[r.start], &grads, s));
    let mut total = model.zero_grad();
    for p in parts {
        for (a, b) in total.fields.iter_mut().zip(&p) {
            *a += b;
        }
    }
    total.curve = finish_curve(model, cg);
    total.wb = wg;
    Ok((out, Some(total)))
}

fn scale_cyc(g: &super::CycleGrad, s: f64) -> super::CycleGrad {
    super::CycleGrad {
        flow: g.flow * s,
        flow_back: g.flow_back * s,
        occlusion: g.occlusion * s,
    }
}

fn finish_curve(model: &Model, cg: CurveGrad) -> Vec<f64> {
    let mut g = model.curve.finish_grad(cg);
    g.resize(model.curve.params().len(), 0.0);
    g
}

/// Combined render of rays through the tone map at a given frame gain,
/// kept for a later backward pass.
pub struct LdrRender {
    chunks: Vec<ChunkForward>,
    gain_frame: usize,
    samples: usize,
    pub hdr: Vec<[f64; 3]>,
    pub ldr: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

/// Render `rays` at time `t` and tone-map with the gain of training frame
/// `gain_frame` (training-mode curve when `training`).
pub fn render_ldr(
    model: &Model,
    rays: &[Ray],
    t: f64,
    gain_frame: usize,
    samples: usize,
    sampling: BatchSampling,
    training: bool,
    chunk_rays: usize,
) -> Result<LdrRender> {
    let frame = FrameMeta {
        frame_index: 0,
        time: t,
        camera: crate::geometry::CameraModel::new(1.0, Vec2::new(0.5, 0.5), 1, 1, crate::geometry::Pose::identity())?,
        exposure_tag: crate::geometry::ExposureTag::Mid,
        exposure_scale: 1.0,
    };
    let batch = SupervisionBatch {
        frame: 0,
        rays: rays.to_vec(),
        pixels: Vec::new(),
        colors: Vec::new(),
        flow_forward: Vec::new(),
        flow_backward: Vec::new(),
        depth: Vec::new(),
        sampling,
    };
    let frames = std::slice::from_ref(&frame);
    let chunks: Vec<ChunkForward> = map_chunks(rays.len(), chunk_rays, |r| forward_chunk(model, frames, &batch, r, &[], samples))
        .into_iter()
        .collect::<Result<_>>()?;
    let prepared = model.curve.prepare();
    let mapper = ToneMapper::new(&prepared, &model.wb);
    let hdr: Vec<[f64; 3]> = chunks.iter().flat_map(|c| c.comb.iter().map(|r| r.hdr)).collect();
    let depth = chunks.iter().flat_map(|c| c.comb.iter().map(|r| r.depth)).collect();
    let ldr = hdr.iter().map(|e| mapper.forward(gain_frame, *e, training)).collect::<Result<_>>()?;
    Ok(LdrRender { chunks, gain_frame, samples, hdr, ldr, depth })
}

impl LdrRender {
    /// Gradient of `Σ g_ldr · ldr` (training-mode tone map) over all parameters.
    pub fn backward(&self, model: &Model, g_ldr: &[[f64; 3]]) -> Result<ModelGrad> {
        let prepared: PreparedCurve<'_> = model.curve.prepare();
        let mapper = ToneMapper::new(&prepared, &model.wb);
        let mut cg = prepared.zero_grad();
        let mut wg = vec![0.0; model.wb.log_gains().len()];
        let n = self.hdr.len();
        let mut grads = RenderGrads {
            hdr_cb: Vec::with_capacity(n),
            depth: vec![0.0; n],
            hdr_warp: Vec::new(),
            flow_point: Vec::new(),
            cyc: Vec::new(),
            reg: vec![FlowPair::default(); n * self.samples],
        };
        for (e, g) in self.hdr.iter().zip(g_ldr) {
            grads.hdr_cb.push(mapper.backward(self.gain_frame, *e, true, *g, &mut cg, &mut wg)?);
        }
        let parts = map_chunks(self.chunks.len(), 1, |r| backward_chunk(model, &self.chunks[r.start], &grads, self.samples));
        let mut total = model.zero_grad();
        for p in parts {
            for (a, b) in total.fields.iter_mut().zip(&p) {
                *a += b;
            }
        }
        total.curve = finish_curve(model, cg);
        total.wb = wg;
        Ok(total)
    }
}
