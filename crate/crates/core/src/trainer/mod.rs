//! End-to-end optimization of the fields and the tone-mapping parameters.

pub mod enhancer;

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{FieldConfig, FieldParams};
use crate::geometry::{axis_angle, CameraModel, ExposureTag, FrameMeta, Pose, Vec2, Vec3};
use crate::image::Image;
use crate::io::{hash_hex, save_checkpoint, write_loss_log, Checkpoint};
use crate::losses::objective::{evaluate, render_ldr, BatchSampling, ObjectiveConfig, SupervisionBatch};
use crate::losses::{loss_gen, IdentityEncoder, LossBreakdown, LossWeights, Norm};
use crate::model::{Model, ModelGrad};
use crate::synth::DatasetBundle;
use crate::tonemap::{ToneCurve, ToneCurveKind, WbSharing, WhiteBalance, DEFAULT_LEAK_ALPHA};
pub use enhancer::{EnhanceRequest, Enhancer, EnhancerKind};

/// Where the relative exposure of each frame comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExposureSource {
    /// Known capture exposure scales the learned gains.
    #[default]
    Metadata,
    /// Gains alone account for exposure.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub patch: usize,
    pub patches: usize,
    /// Uniform bound of the novel-view rotation, in degrees.
    pub rotation_deg: f64,
    /// Uniform bound of the per-axis translation, as a fraction of the depth range.
    pub translation_frac: f64,
}

impl Default for GenerativeConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            patches: 1,
            rotation_deg: 2.0,
            translation_frac: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub samples: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate halves.
    pub half_life: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub norm: Norm,
    pub curve: ToneCurveKind,
    pub leak_alpha: f64,
    pub fields: FieldConfig,
    /// Fit the field input normalization to the camera frusta.
    pub fit_scene_bounds: bool,
    pub wb_sharing: WbSharing,
    pub exposure: ExposureSource,
    pub enhancer: EnhancerKind,
    pub generative: GenerativeConfig,
    pub chunk_rays: usize,
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    /// Defaults with the warm-up and learning-rate half-life scaled to `steps`.
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_rays: 64,
            samples: 32,
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            half_life: (steps as f64 / 3.0).max(1.0),
            seed,
            weights: LossWeights {
                t_warm: (0.4 * steps as f64).round() as usize,
                ..LossWeights::default()
            },
            norm: Norm::L1,
            curve: ToneCurveKind::Piecewise,
            leak_alpha: DEFAULT_LEAK_ALPHA,
            fields: FieldConfig::default(),
            fit_scene_bounds: true,
            wb_sharing: WbSharing::Global,
            exposure: ExposureSource::Metadata,
            enhancer: EnhancerKind::None,
            generative: GenerativeConfig::default(),
            chunk_rays: 8,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::input("learning rate must be non-negative"));
        }
        if self.batch_rays == 0 || self.samples < 2 || self.chunk_rays == 0 {
            return Err(Error::input("batch, sample and chunk sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) || !(self.half_life > 0.0) {
            return Err(Error::input("invalid optimizer settings"));
        }
        if self.checkpoint_every == Some(0) || self.generative.patch == 0 {
            return Err(Error::input("checkpoint interval and patch size must be positive"));
        }
        self.weights.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hash_hex(self.to_json()?.as_bytes()))
    }

    /// Objective settings derived from this configuration.
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            samples: self.samples,
            weights: self.weights,
            norm: self.norm,
            chunk_rays: self.chunk_rays,
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam_m: [Vec<f64>; 3],
    pub adam_v: [Vec<f64>; 3],
    pub step: usize,
    pub gen_fired: usize,
    pub gen_failures: usize,
}

/// Deterministic stream for one step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Whether the generative term fires at `step`: never before the warm-up,
/// then with probability `p_gen` from the dedicated per-step stream.
pub fn generative_fires(seed: u64, step: usize, w: &LossWeights) -> bool {
    let p = crate::losses::alpha_gen(step, w.t_warm, w.p_gen);
    if p <= 0.0 {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c909);
    rng.set_stream(step as u64 + 1);
    rng.random::<f64>() < p
}

/// Input normalization that maps the viewing frusta into roughly [-1, 1].
pub fn scene_bounds(frames: &[FrameMeta], z_near: f64, z_far: f64) -> ([f64; 3], f64) {
    let mid = 0.5 * (z_near + z_far);
    let mut center = Vec3::zeros();
    let mut lateral: f64 = 0.0;
    for f in frames {
        let cam = &f.camera;
        let axis = cam.pose().rotation().row(2).transpose();
        center += cam.pose().center() + axis * mid;
        let half = (cam.width().max(cam.height()) as f64 / 2.0) / cam.focal();
        lateral = lateral.max(half * z_far);
    }
    center /= frames.len() as f64;
    (center.into(), lateral.max(0.5 * (z_far - z_near)))
}

fn reference_frame(frames: &[FrameMeta]) -> usize {
    frames.iter().position(|f| f.exposure_tag == ExposureTag::Mid).unwrap_or(0)
}

/// Fresh model for a training set.
pub fn init_model(cfg: &TrainConfig, data: &DatasetBundle) -> Result<Model> {
    let frames = data.training_frames();
    let mut fc = cfg.fields.clone();
    if cfg.fit_scene_bounds {
        let (c, s) = scene_bounds(&frames, data.spec.z_near, data.spec.z_far);
        fc.scene_center = c;
        fc.scene_scale = s;
    }
    let tags: Vec<ExposureTag> = frames.iter().map(|f| f.exposure_tag).collect();
    let scales: Vec<f64> = frames.iter().map(|f| f.exposure_scale).collect();
    let exposure = (cfg.exposure == ExposureSource::Metadata).then_some(scales.as_slice());
    Ok(Model {
        fields: FieldParams::init(fc, cfg.seed)?,
        curve: ToneCurve::new(cfg.curve, cfg.leak_alpha, cfg.seed.wrapping_add(1)),
        wb: WhiteBalance::new(&tags, exposure, cfg.wb_sharing, reference_frame(&frames))?,
    })
}

/// Random rays of one training frame with their supervision.
pub fn sample_batch(data: &DatasetBundle, k: usize, rays: usize, rng: &mut impl Rng) -> Result<SupervisionBatch> {
    let frame = data.training[k];
    let cam = &data.frames[frame].camera;
    let (w, h) = (cam.width(), cam.height());
    let mut b = SupervisionBatch {
        frame: k,
        rays: Vec::with_capacity(rays),
        pixels: Vec::with_capacity(rays),
        colors: Vec::with_capacity(rays),
        flow_forward: Vec::with_capacity(rays),
        flow_backward: Vec::with_capacity(rays),
        depth: Vec::with_capacity(rays),
        sampling: BatchSampling::Jittered(rng.random()),
    };
    for _ in 0..rays {
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        let p = CameraModel::pixel_center(x, y);
        b.rays.push(cam.generate_ray(&p, data.spec.z_near, data.spec.z_far)?);
        b.pixels.push(p);
        b.colors.push(data.ldr[frame].rgb(x, y));
        b.flow_forward.push(data.flow_forward[k].as_ref().and_then(|f| f.at(x, y)));
        b.flow_backward.push(data.flow_backward[k].as_ref().and_then(|f| f.at(x, y)));
        b.depth.push(Some(data.observed_depth[k].get(x, y, 0)));
    }
    Ok(b)
}

/// Training camera perturbed by a small random rotation and translation.
pub fn perturb_camera(cam: &CameraModel, g: &GenerativeConfig, depth_range: f64, rng: &mut impl Rng) -> Result<CameraModel> {
    let axis = loop {
        let a = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if a.norm() > 1e-3 && a.norm() <= 1.0 {
            break a.normalize();
        }
    };
    let angle = rng.random_range(-1.0..=1.0) * g.rotation_deg.to_radians();
    let t = g.translation_frac * depth_range;
    let shift = Vec3::new(rng.random_range(-t..=t), rng.random_range(-t..=t), rng.random_range(-t..=t));
    let rot = axis_angle(&axis, angle) * cam.pose().rotation();
    Ok(cam.with_pose(Pose::from_center(rot, cam.pose().center() + shift)?))
}

/// What one generative evaluation produced.
#[derive(Debug, Clone)]
pub struct GenerativeSample {
    pub value: f64,
    pub grad: ModelGrad,
}

/// Render grid patches of a perturbed view, ask the enhancer for pseudo
/// labels and return `beta_gen * L_gen` with its gradient.
pub fn generative_term(
    cfg: &TrainConfig,
    data: &DatasetBundle,
    model: &Model,
    enhancer: &dyn Enhancer,
    rng: &mut impl Rng,
) -> Result<GenerativeSample> {
    let frames = data.training_frames();
    let k = rng.random_range(0..frames.len());
    let meta = &frames[k];
    let cam = perturb_camera(&meta.camera, &cfg.generative, data.spec.z_far - data.spec.z_near, rng)?;
    let ps = cfg.generative.patch;
    let (gx, gy) = (cam.width() / ps, cam.height() / ps);
    if gx == 0 || gy == 0 {
        return Err(Error::input("patch larger than the image"));
    }
    let mut cells: Vec<usize> = (0..gx * gy).collect();
    let mut rendered = Vec::new();
    let mut enhanced = Vec::new();
    let mut renders = Vec::new();
    for _ in 0..cfg.generative.patches.min(cells.len()) {
        let cell = cells.swap_remove(rng.random_range(0..cells.len()));
        let (x0, y0) = ((cell % gx) * ps, (cell / gx) * ps);
        let pixels: Vec<Vec2> = (0..ps * ps).map(|q| CameraModel::pixel_center(x0 + q % ps, y0 + q / ps)).collect();
        let rays = cam.generate_rays(&pixels, data.spec.z_near, data.spec.z_far)?;
        let r = render_ldr(model, &rays, meta.time, k, cfg.samples, BatchSampling::Jittered(rng.random()), true, cfg.chunk_rays)?;
        let shown = Image::from_fn(ps, ps, 3, |x, y, c| r.ldr[y * ps + x][c].clamp(0.0, 1.0));
        let ldr = &data.ldr[meta.frame_index];
        let reference = Image::from_fn(ps, ps, 3, |x, y, c| ldr.get(x0 + x, y0 + y, c));
        let out = enhancer.enhance(&EnhanceRequest {
            rendered: &shown,
            reference: &reference,
            camera: &cam,
            origin: (x0, y0),
            frame: meta.frame_index,
            exposure_scale: meta.exposure_scale,
        })?;
        if out.shape() != shown.shape() || out.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant("enhancer output has the wrong shape or range".into()));
        }
        rendered.push(r.ldr.iter().flatten().copied().collect::<Vec<f64>>());
        enhanced.push(out.data().to_vec());
        renders.push(r);
    }
    let (value, grads) = loss_gen(&rendered, &enhanced, &IdentityEncoder)?;
    let beta = cfg.weights.beta_gen;
    let mut grad = model.zero_grad();
    for (r, g) in renders.iter().zip(&grads) {
        let g_ldr: Vec<[f64; 3]> = g.chunks_exact(3).map(|c| [c[0] * beta, c[1] * beta, c[2] * beta]).collect();
        grad.add_assign(&r.backward(model, &g_ldr)?);
    }
    Ok(GenerativeSample { value: beta * value, grad })
}

/// Owns the parameters and advances them one step at a time.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    config_json: String,
    config_hash: String,
    data: &'a DatasetBundle,
    frames: Vec<FrameMeta>,
    enhancer: Option<Box<dyn Enhancer + 'a>>,
    state: TrainState,
    log: Vec<(usize, LossBreakdown)>,
    /// Steps at which the enhancer was called.
    enhancer_calls: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a DatasetBundle) -> Result<Self> {
        let model = init_model(&cfg, data)?;
        let zeros = |m: &Model| m.groups().map(|g| vec![0.0; g.len()]);
        let state = TrainState {
            adam_m: zeros(&model),
            adam_v: zeros(&model),
            model,
            step: 0,
            gen_fired: 0,
            gen_failures: 0,
        };
        Self::with_state(cfg, data, state)
    }

    /// Continue from a checkpoint written with the same configuration.
    pub fn resume(cfg: TrainConfig, data: &'a DatasetBundle, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash()? {
            return Err(Error::input("checkpoint was written with a different configuration"));
        }
        let state = TrainState {
            model: ckpt.model,
            adam_m: ckpt.adam_m,
            adam_v: ckpt.adam_v,
            step: ckpt.step,
            gen_fired: ckpt.gen_fired,
            gen_failures: ckpt.gen_failures,
        };
        Self::with_state(cfg, data, state)
    }

    fn with_state(cfg: TrainConfig, data: &'a DatasetBundle, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let frames = data.training_frames();
        if state.model.wb.frame_count() != frames.len() {
            return Err(Error::input("model white balance does not match the training frames"));
        }
        for (g, (m, v)) in state.model.groups().iter().zip(state.adam_m.iter().zip(&state.adam_v)) {
            if m.len() != g.len() || v.len() != g.len() {
                return Err(Error::input("optimizer state does not match the model"));
            }
        }
        Ok(Self {
            config_json: cfg.to_json()?,
            config_hash: cfg.hash()?,
            enhancer: enhancer::build(cfg.enhancer, &data.spec),
            cfg,
            data,
            frames,
            state,
            log: Vec::new(),
            enhancer_calls: Vec::new(),
        })
    }

    /// Replace the enhancer (for custom priors and instrumentation).
    pub fn set_enhancer(&mut self, e: Option<Box<dyn Enhancer + 'a>>) {
        self.enhancer = e;
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[(usize, LossBreakdown)] {
        &self.log
    }

    pub fn enhancer_calls(&self) -> &[usize] {
        &self.enhancer_calls
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    /// Loss and gradient of the supervised terms on a batch, without updating.
    pub fn evaluate_batch(&self, batch: &SupervisionBatch) -> Result<(LossBreakdown, ModelGrad)> {
        let (l, g) = evaluate(&self.state.model, &self.frames, batch, &self.cfg.objective(), true)?;
        Ok((l, g.expect("gradient requested")))
    }

    /// One optimizer step on the batch drawn for the current step.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let step = self.state.step;
        let mut rng = step_rng(self.cfg.seed, step);
        let k = rng.random_range(0..self.frames.len());
        let batch = sample_batch(self.data, k, self.cfg.batch_rays, &mut rng)?;
        self.step_on(&batch, &mut rng)
    }

    /// One optimizer step on a given batch.
    pub fn step_on(&mut self, batch: &SupervisionBatch, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let step = self.state.step;
        let (mut loss, mut grad) = self.evaluate_batch(batch)?;
        if let Some(e) = &self.enhancer {
            if generative_fires(self.cfg.seed, step, &self.cfg.weights) {
                self.state.gen_fired += 1;
                self.enhancer_calls.push(step);
                match generative_term(&self.cfg, self.data, &self.state.model, e.as_ref(), rng) {
                    Ok(s) => {
                        loss.gen = s.value;
                        grad.add_assign(&s.grad);
                    }
                    Err(err) => {
                        self.state.gen_failures += 1;
                        warn!("step {step}: generative term skipped: {err}");
                    }
                }
            }
        }
        loss.combine(&self.cfg.weights);
        if let Some((term, value)) = loss.terms().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: term.to_string(),
                step,
                value,
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                term: "gradient".into(),
                step,
                value: f64::NAN,
            });
        }
        self.apply(&grad);
        self.state.step += 1;
        self.log.push((step, loss));
        Ok(loss)
    }

    fn apply(&mut self, grad: &ModelGrad) {
        let c = &self.cfg;
        if c.lr == 0.0 {
            return;
        }
        let t = self.state.step as i32 + 1;
        let lr = c.lr * 0.5f64.powf(self.state.step as f64 / c.half_life);
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let masks = self.state.model.trainable_masks();
        let groups = self.state.model.groups_mut();
        for (gi, params) in groups.into_iter().enumerate() {
            let (m, v) = (&mut self.state.adam_m[gi], &mut self.state.adam_v[gi]);
            for (k, p) in params.iter_mut().enumerate() {
                if !masks[gi][k] {
                    continue;
                }
                let g = grad.groups()[gi][k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                *p -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.state.step,
            config_hash: self.config_hash.clone(),
            config: self.config_json.clone(),
            model: self.state.model.clone(),
            adam_m: self.state.adam_m.clone(),
            adam_v: self.state.adam_v.clone(),
            gen_fired: self.state.gen_fired,
            gen_failures: self.state.gen_failures,
        }
    }

    /// Step until `stop_at` (or the configured end), writing periodic and
    /// final checkpoints plus the loss log when `out` is given.
    pub fn run(&mut self, out: Option<&Path>, stop_at: Option<usize>) -> Result<Checkpoint> {
        let end = stop_at.unwrap_or(self.cfg.steps).min(self.cfg.steps);
        let start = self.state.step;
        while self.state.step < end {
            let l = self.step()?;
            let s = self.state.step;
            if s % 500 == 0 || s == end {
                info!("step {s}/{}: total {:.5} cb {:.5} photo {:.5}", self.cfg.steps, l.total, l.cb, l.photo);
            }
            if let (Some(dir), Some(every)) = (out, self.cfg.checkpoint_every) {
                if s % every == 0 && s < end {
                    save_checkpoint(&checkpoint_path(dir, Some(s)), &self.checkpoint())?;
                }
            }
        }
        let ckpt = self.checkpoint();
        if let Some(dir) = out {
            save_checkpoint(&checkpoint_path(dir, None), &ckpt)?;
            write_loss_log(&dir.join("loss_log.txt"), start, &self.log)?;
        }
        Ok(ckpt)
    }
}

/// `checkpoint_<step>.bin`, or `final.bin` for the last one.
pub fn checkpoint_path(dir: &Path, step: Option<usize>) -> PathBuf {
    match step {
        Some(s) => dir.join(format!("checkpoint_{s:07}.bin")),
        None => dir.join("final.bin"),
    }
}

#[cfg(test)]
mod tests;
