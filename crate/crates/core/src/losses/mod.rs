//! Loss terms of the training objective.
//!
//! Each term is a pure function returning its value together with the
//! gradient with respect to its inputs. [`objective`] composes them with the
//! renderer into the full weighted loss over all model parameters.

pub mod objective;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};
use crate::math::sign;

/// Coefficients of the weighted objective and the generative schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_data: f64,
    pub beta_depth: f64,
    pub beta_reg: f64,
    pub beta_cyc: f64,
    pub beta_smooth: f64,
    pub beta_gen: f64,
    /// First step at which the generative term may fire.
    pub t_warm: usize,
    pub p_gen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_data: 0.04,
            beta_depth: 0.5,
            beta_reg: 0.1,
            beta_cyc: 0.1,
            beta_smooth: 1e-9,
            beta_gen: 0.05,
            t_warm: 200_000,
            p_gen: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let betas = [self.beta_data, self.beta_depth, self.beta_reg, self.beta_cyc, self.beta_smooth, self.beta_gen];
        if betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::input("loss coefficients must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_gen) {
            return Err(Error::input("p_gen must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Norm used by the photometric terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

/// Every term of the objective for one step. Zeros are explicit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cb: f64,
    pub photo: f64,
    pub flow: f64,
    pub depth: f64,
    pub data: f64,
    pub sp: f64,
    pub temp: f64,
    pub min: f64,
    pub reg: f64,
    pub cyc: f64,
    pub smooth: f64,
    pub gen: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 13] = [
        "cb", "photo", "flow", "depth", "data", "sp", "temp", "min", "reg", "cyc", "smooth", "gen", "total",
    ];

    pub fn values(&self) -> [f64; 13] {
        [
            self.cb, self.photo, self.flow, self.depth, self.data, self.sp, self.temp, self.min, self.reg, self.cyc,
            self.smooth, self.gen, self.total,
        ]
    }

    pub fn terms(&self) -> impl Iterator<Item = (&'static str, f64)> {
        Self::TERMS.into_iter().zip(self.values())
    }

    /// Recompute the composite entries from the individual terms.
    ///
    /// `gen` is expected to already carry its weight.
    pub fn combine(&mut self, w: &LossWeights) {
        self.data = self.flow + w.beta_depth * self.depth;
        self.reg = self.sp + self.temp + self.min;
        self.total = self.cb
            + self.photo
            + w.beta_data * self.data
            + w.beta_reg * self.reg
            + w.beta_cyc * self.cyc
            + w.beta_smooth * self.smooth
            + self.gen;
    }
}

/// Mean per-channel error between predicted and target colors.
///
/// Returns the value and `dL/d(pred)`.
pub fn photometric(pred: &[[f64; 3]], target: &[[f64; 3]], norm: Norm) -> Result<(f64, Vec<[f64; 3]>)> {
    if pred.len() != target.len() {
        return Err(Error::input("prediction and target counts differ"));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let m = 3.0 * pred.len() as f64;
    let mut total = 0.0;
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            std::array::from_fn(|c| {
                let r = p[c] - t[c];
                match norm {
                    Norm::L1 => {
                        total += r.abs();
                        sign(r) / m
                    }
                    Norm::L2 => {
                        total += r * r;
                        2.0 * r / m
                    }
                }
            })
        })
        .collect();
    Ok((total / m, grads))
}

/// Mean L1 pixel distance over rays with a defined prediction and a valid
/// observation; other rays get zero gradient.
pub fn loss_flow(pred: &[Option<Vec2>], observed: &[Option<Vec2>]) -> Result<(f64, Vec<Vec2>)> {
    if pred.len() != observed.len() {
        return Err(Error::input("flow prediction and observation counts differ"));
    }
    let valid: Vec<bool> = pred.iter().zip(observed).map(|(p, o)| p.is_some() && o.is_some()).collect();
    let count = valid.iter().filter(|v| **v).count();
    let mut grads = vec![Vec2::zeros(); pred.len()];
    if count == 0 {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for k in 0..pred.len() {
        if let (Some(p), Some(o)) = (pred[k], observed[k]) {
            let d = p - o;
            total += d[0].abs() + d[1].abs();
            grads[k] = Vec2::new(sign(d[0]), sign(d[1])) / count as f64;
        }
    }
    Ok((total / count as f64, grads))
}

/// Median of the values (mean of the two middle ones for even counts),
/// together with the weight of each value in it.
fn median_with_weights(v: &[f64]) -> (f64, Vec<f64>) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let n = v.len();
    let mut w = vec![0.0; n];
    if n % 2 == 1 {
        w[idx[n / 2]] = 1.0;
    } else {
        w[idx[n / 2 - 1]] = 0.5;
        w[idx[n / 2]] = 0.5;
    }
    (v.iter().zip(&w).map(|(a, b)| a * b).sum(), w)
}

const SCALE_EPS: f64 = 1e-12;

/// `(Z - median) / mean|Z - median|`.
pub fn normalize_depth(z: &[f64]) -> Vec<f64> {
    let (m, _) = median_with_weights(z);
    let s = z.iter().map(|v| (v - m).abs()).sum::<f64>() / z.len() as f64;
    z.iter().map(|v| (v - m) / (s + SCALE_EPS)).collect()
}

/// Scale-and-shift invariant depth loss over the rays with a valid observation.
///
/// Fewer than two valid rays yield zero with zero gradient.
pub fn loss_depth(rendered: &[f64], observed: &[Option<f64>]) -> Result<(f64, Vec<f64>)> {
    if rendered.len() != observed.len() {
        return Err(Error::input("rendered and observed depth counts differ"));
    }
    let idx: Vec<usize> = (0..rendered.len()).filter(|&k| observed[k].is_some()).collect();
    let mut grads = vec![0.0; rendered.len()];
    let n = idx.len();
    if n < 2 {
        return Ok((0.0, grads));
    }
    let z: Vec<f64> = idx.iter().map(|&k| rendered[k]).collect();
    let o: Vec<f64> = idx.iter().map(|&k| observed[k].unwrap()).collect();
    let on = normalize_depth(&o);
    let (m, mw) = median_with_weights(&z);
    let s = z.iter().map(|v| (v - m).abs()).sum::<f64>() / n as f64;
    let se = s + SCALE_EPS;
    let zn: Vec<f64> = z.iter().map(|v| (v - m) / se).collect();
    let value = zn.iter().zip(&on).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    // back through Z* = (Z - m) / (s + ε)
    let g: Vec<f64> = zn.iter().zip(&on).map(|(a, b)| sign(a - b) / n as f64).collect();
    let sum_g: f64 = g.iter().sum();
    let sum_gz: f64 = g.iter().zip(&z).map(|(g, v)| g * (v - m)).sum::<f64>() / (se * se);
    let sum_sign: f64 = z.iter().map(|v| sign(v - m)).sum();
    for l in 0..n {
        let ds = (sign(z[l] - m) - sum_sign * mw[l]) / n as f64;
        grads[idx[l]] = g[l] / se - sum_g / se * mw[l] - sum_gz * ds;
    }
    Ok((value, grads))
}

/// One scene-flow cycle sample: flow toward a neighbor, the neighbor's flow
/// back at the warped point, and the occlusion weight of the forward flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSample {
    pub flow: Vec3,
    pub flow_back: Vec3,
    pub occlusion: f64,
}

/// Gradients of [`loss_cyc`] for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CycleGrad {
    pub flow: Vec3,
    pub flow_back: Vec3,
    pub occlusion: f64,
}

/// Occlusion-weighted L1 cycle error `w |f_ij(x) + f_ji(x + f_ij(x))|`, meaned.
pub fn loss_cyc(samples: &[CycleSample]) -> (f64, Vec<CycleGrad>) {
    if samples.is_empty() {
        return (0.0, Vec::new());
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    let grads = samples
        .iter()
        .map(|s| {
            let r = s.flow + s.flow_back;
            let l1 = r.abs().sum();
            total += s.occlusion * l1;
            let sg = r.map(sign) * (s.occlusion / n);
            CycleGrad {
                flow: sg,
                flow_back: sg,
                occlusion: l1 / n,
            }
        })
        .collect();
    (total / n, grads)
}

/// Distance weight `exp(-2 |x - y|)` of the spatial smoothness term.
pub fn w_dist(x: &Vec3, y: &Vec3) -> f64 {
    (-2.0 * (x - y).norm()).exp()
}

/// Values of the three scene-flow regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegTerms {
    pub sp: f64,
    pub temp: f64,
    pub min: f64,
}

impl RegTerms {
    pub fn total(&self) -> f64 {
        self.sp + self.temp + self.min
    }
}

/// Forward and backward scene flow of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowPair {
    pub forward: Vec3,
    pub backward: Vec3,
}

/// Scene-flow regularizers over rays of samples ordered along each ray.
///
/// `positions[r][k]` and `flows[r][k]` belong to sample `k` of ray `r`. The
/// spatial term is meaned over adjacent pairs, the others over samples.
/// Returns the terms and `dL_reg/d(flow)` (the three terms summed).
pub fn loss_reg(positions: &[Vec<Vec3>], flows: &[Vec<FlowPair>]) -> Result<(RegTerms, Vec<Vec<FlowPair>>)> {
    if positions.len() != flows.len() || positions.iter().zip(flows).any(|(p, f)| p.len() != f.len()) {
        return Err(Error::input("positions and flows differ in shape"));
    }
    let samples: usize = flows.iter().map(Vec::len).sum();
    let pairs: usize = flows.iter().map(|f| f.len().saturating_sub(1)).sum();
    let mut grads: Vec<Vec<FlowPair>> = flows.iter().map(|f| vec![FlowPair::default(); f.len()]).collect();
    let mut terms = RegTerms::default();
    if samples == 0 {
        return Ok((terms, grads));
    }
    let ns = samples as f64;
    for (r, ray) in flows.iter().enumerate() {
        for (k, f) in ray.iter().enumerate() {
            let s = f.forward + f.backward;
            terms.temp += 0.5 * s.norm_squared() / ns;
            terms.min += (f.forward.abs().sum() + f.backward.abs().sum()) / ns;
            let g = &mut grads[r][k];
            g.forward += s / ns + f.forward.map(sign) / ns;
            g.backward += s / ns + f.backward.map(sign) / ns;
        }
        if pairs == 0 {
            continue;
        }
        let np = pairs as f64;
        for k in 0..ray.len().saturating_sub(1) {
            let w = w_dist(&positions[r][k], &positions[r][k + 1]);
            let df = ray[k].forward - ray[k + 1].forward;
            let db = ray[k].backward - ray[k + 1].backward;
            terms.sp += w * (df.abs().sum() + db.abs().sum()) / np;
            let gf = df.map(sign) * (w / np);
            let gb = db.map(sign) * (w / np);
            grads[r][k].forward += gf;
            grads[r][k + 1].forward -= gf;
            grads[r][k].backward += gb;
            grads[r][k + 1].backward -= gb;
        }
    }
    Ok((terms, grads))
}

/// Linear feature map applied to image patches before the generative loss.
pub trait PatchEncoder: Send + Sync {
    fn encode(&self, patch: &[f64]) -> Vec<f64>;
    /// Transpose of the map, for back-propagation.
    fn encode_transpose(&self, grad: &[f64]) -> Vec<f64>;
}

/// `φ(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl PatchEncoder for IdentityEncoder {
    fn encode(&self, patch: &[f64]) -> Vec<f64> {
        patch.to_vec()
    }

    fn encode_transpose(&self, grad: &[f64]) -> Vec<f64> {
        grad.to_vec()
    }
}

/// Fixed Gaussian random projection `φ(x) = M x`, reproducible from a seed.
#[derive(Debug, Clone)]
pub struct RandomLinearEncoder {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
}

impl RandomLinearEncoder {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input as f64).sqrt();
        let matrix = (0..input * output)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        Self { rows: output, cols: input, matrix }
    }
}

impl PatchEncoder for RandomLinearEncoder {
    fn encode(&self, patch: &[f64]) -> Vec<f64> {
        assert_eq!(patch.len(), self.cols, "patch size does not match the encoder");
        self.matrix.chunks(self.cols).map(|row| row.iter().zip(patch).map(|(a, b)| a * b).sum()).collect()
    }

    fn encode_transpose(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, g) in self.matrix.chunks(self.cols).zip(grad) {
            for (o, m) in out.iter_mut().zip(row) {
                *o += g * m;
            }
        }
        debug_assert_eq!(grad.len(), self.rows);
        out
    }
}

/// Mean L1 distance in feature space between rendered and enhanced patches.
///
/// Returns the value and `dL/d(rendered)` per patch.
pub fn loss_gen(rendered: &[Vec<f64>], enhanced: &[Vec<f64>], encoder: &dyn PatchEncoder) -> Result<(f64, Vec<Vec<f64>>)> {
    if rendered.len() != enhanced.len() {
        return Err(Error::input(format!("{} rendered patches but {} enhanced", rendered.len(), enhanced.len())));
    }
    if rendered.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut diffs = Vec::with_capacity(rendered.len());
    for (r, e) in rendered.iter().zip(enhanced) {
        if r.len() != e.len() {
            return Err(Error::input("patch sizes differ"));
        }
        let fr = encoder.encode(r);
        let fe = encoder.encode(e);
        count += fr.len();
        let d: Vec<f64> = fr.iter().zip(&fe).map(|(a, b)| a - b).collect();
        total += d.iter().map(|v| v.abs()).sum::<f64>();
        diffs.push(d);
    }
    let grads = diffs
        .iter()
        .map(|d| {
            let g: Vec<f64> = d.iter().map(|v| sign(*v) / count as f64).collect();
            encoder.encode_transpose(&g)
        })
        .collect();
    Ok((total / count as f64, grads))
}

/// Probability that the generative term fires at `step`.
pub fn alpha_gen(step: usize, t_warm: usize, p_gen: f64) -> f64 {
    if step < t_warm {
        0.0
    } else {
        p_gen
    }
}
