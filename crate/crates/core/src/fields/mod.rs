//! Static and dynamic radiance fields.
//!
//! `F_st(x, d) -> (c, σ, v)` and `F_dy(x, d, t) -> (c, σ, f_fwd, f_bwd, w_fwd, w_bwd)`
//! are small ReLU MLPs over sinusoidally encoded inputs. Radiance and density
//! use softplus (radiance is unbounded HDR), the blend and occlusion weights
//! use a sigmoid, and flows are linear.

mod encoding;
mod mlp;

pub use encoding::{encode, encoded_len, EncodingConfig};
pub use mlp::{Mlp, MlpTrace};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::math::{sigmoid, softplus, softplus_inv};

/// Output columns of the static head.
pub mod st {
    pub const RGB: usize = 0;
    pub const SIGMA: usize = 3;
    pub const BLEND: usize = 4;
    pub const WIDTH: usize = 5;
}

/// Output columns of the dynamic head.
pub mod dy {
    pub const RGB: usize = 0;
    pub const SIGMA: usize = 3;
    pub const FLOW_FWD: usize = 4;
    pub const FLOW_BWD: usize = 7;
    pub const OCC_FWD: usize = 10;
    pub const OCC_BWD: usize = 11;
    pub const WIDTH: usize = 12;
}

/// Initial radiance and density level produced by the output biases.
pub const INIT_LEVEL: f64 = 0.1;

/// Network shape and input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub static_layers: usize,
    pub static_width: usize,
    pub dynamic_layers: usize,
    pub dynamic_width: usize,
    /// Positions are mapped to `(x - center) / scale` before encoding.
    pub scene_center: [f64; 3],
    pub scene_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            static_layers: 4,
            static_width: 64,
            dynamic_layers: 4,
            dynamic_width: 64,
            scene_center: [0.0; 3],
            scene_scale: 1.0,
        }
    }
}

impl FieldConfig {
    fn pos_len(&self) -> usize {
        encoded_len(3, self.encoding.num_frequencies_position, self.encoding.include_identity)
    }

    fn dir_len(&self) -> usize {
        encoded_len(3, self.encoding.num_frequencies_direction, self.encoding.include_identity)
    }

    fn time_len(&self) -> usize {
        encoded_len(1, self.encoding.num_frequencies_time, self.encoding.include_identity)
    }

    pub fn static_mlp(&self) -> Mlp {
        Mlp::new(self.pos_len() + self.dir_len(), self.static_layers, self.static_width, st::WIDTH)
    }

    pub fn dynamic_mlp(&self) -> Mlp {
        Mlp::new(self.pos_len() + self.dir_len() + self.time_len(), self.dynamic_layers, self.dynamic_width, dy::WIDTH)
    }

    fn validate(&self) -> Result<()> {
        if self.static_width == 0 || self.dynamic_width == 0 {
            return Err(Error::input("field width must be positive"));
        }
        if !(self.scene_scale > 0.0) || self.scene_center.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("scene normalization must be finite with positive scale"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutputStatic {
    pub radiance: [f64; 3],
    pub density: f64,
    pub blend: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutputDynamic {
    pub radiance: [f64; 3],
    pub density: f64,
    pub flow_forward: [f64; 3],
    pub flow_backward: [f64; 3],
    pub occ_forward: f64,
    pub occ_backward: f64,
}

/// Weights of both fields in one flat vector (static first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    config: FieldConfig,
    weights: Vec<f64>,
}

/// Batched static evaluation with activated outputs in [`st`] column order.
pub struct StaticBatch {
    trace: MlpTrace,
    pub out: Array2<f64>,
}

/// Batched dynamic evaluation with activated outputs in [`dy`] column order.
pub struct DynamicBatch {
    trace: MlpTrace,
    pub out: Array2<f64>,
}

impl FieldParams {
    /// Deterministic initialization from `seed`.
    ///
    /// Hidden layers use fan-in scaled uniform weights. Output weights are
    /// small, radiance and density biases sit at `softplus⁻¹(0.1)`, the blend
    /// and occlusion biases at 0 and the flow columns are exactly zero.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let sm = config.static_mlp();
        let dm = config.dynamic_mlp();
        let mut weights = vec![0.0; sm.param_count() + dm.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ws, wd) = weights.split_at_mut(sm.param_count());
        sm.init(ws, &mut rng, 0.05);
        dm.init(wd, &mut rng, 0.05);
        let level = softplus_inv(INIT_LEVEL);
        let (_, b, _, _) = sm.layer(sm.layers() - 1);
        for col in st::RGB..=st::SIGMA {
            ws[b + col] = level;
        }
        let (w, b, i, o) = dm.layer(dm.layers() - 1);
        for col in dy::RGB..=dy::SIGMA {
            wd[b + col] = level;
        }
        for col in dy::FLOW_FWD..dy::OCC_FWD {
            for r in 0..i {
                wd[w + r * o + col] = 0.0;
            }
            wd[b + col] = 0.0;
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Number of weights belonging to the static field.
    pub fn static_len(&self) -> usize {
        self.config.static_mlp().param_count()
    }

    /// Rebuild from a stored weight vector.
    pub fn from_weights(config: FieldConfig, weights: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let want = config.static_mlp().param_count() + config.dynamic_mlp().param_count();
        if weights.len() != want {
            return Err(Error::input(format!("expected {want} field weights, got {}", weights.len())));
        }
        Ok(Self { config, weights })
    }

    fn normalize(&self, x: &Vec3) -> [f64; 3] {
        let c = &self.config.scene_center;
        let s = self.config.scene_scale;
        [(x[0] - c[0]) / s, (x[1] - c[1]) / s, (x[2] - c[2]) / s]
    }

    fn input_rows(&self, xs: &[Vec3], ds: &[Vec3], ts: Option<&[f64]>) -> Array2<f64> {
        let e = &self.config.encoding;
        let width = self.config.pos_len() + self.config.dir_len() + if ts.is_some() { self.config.time_len() } else { 0 };
        let mut data = Vec::with_capacity(xs.len() * width);
        for (k, (x, d)) in xs.iter().zip(ds).enumerate() {
            encoding::encode_into(&self.normalize(x), e.num_frequencies_position, e.include_identity, &mut data);
            encoding::encode_into(d.as_slice(), e.num_frequencies_direction, e.include_identity, &mut data);
            if let Some(ts) = ts {
                encoding::encode_into(&[2.0 * ts[k] - 1.0], e.num_frequencies_time, e.include_identity, &mut data);
            }
        }
        Array2::from_shape_vec((xs.len(), width), data).unwrap()
    }

    pub fn static_batch(&self, xs: &[Vec3], ds: &[Vec3]) -> StaticBatch {
        let mlp = self.config.static_mlp();
        let trace = mlp.forward(&self.weights[..mlp.param_count()], self.input_rows(xs, ds, None));
        let mut out = trace.output.clone();
        for mut row in out.rows_mut() {
            for c in 0..=st::SIGMA {
                row[c] = softplus(row[c]);
            }
            row[st::BLEND] = sigmoid(row[st::BLEND]);
        }
        StaticBatch { trace, out }
    }

    /// Accumulate weight gradients given `dL/d(activated output)`.
    pub fn static_backward(&self, batch: &StaticBatch, d_out: &Array2<f64>, grad: &mut [f64]) {
        let mlp = self.config.static_mlp();
        let mut g = d_out.clone();
        ndarray::Zip::from(g.rows_mut())
            .and(batch.trace.output.rows())
            .and(batch.out.rows())
            .for_each(|mut g, raw, out| {
                for c in 0..=st::SIGMA {
                    g[c] *= sigmoid(raw[c]);
                }
                g[st::BLEND] *= out[st::BLEND] * (1.0 - out[st::BLEND]);
            });
        let n = mlp.param_count();
        mlp.backward(&self.weights[..n], &batch.trace, g, &mut grad[..n], false);
    }

    pub fn dynamic_batch(&self, xs: &[Vec3], ds: &[Vec3], ts: &[f64]) -> DynamicBatch {
        let mlp = self.config.dynamic_mlp();
        let off = self.static_len();
        let trace = mlp.forward(&self.weights[off..], self.input_rows(xs, ds, Some(ts)));
        let mut out = trace.output.clone();
        for mut row in out.rows_mut() {
            for c in 0..=dy::SIGMA {
                row[c] = softplus(row[c]);
            }
            row[dy::OCC_FWD] = sigmoid(row[dy::OCC_FWD]);
            row[dy::OCC_BWD] = sigmoid(row[dy::OCC_BWD]);
        }
        DynamicBatch { trace, out }
    }

    /// Accumulate weight gradients given `dL/d(activated output)`; optionally
    /// return `dL/dx` for every row (needed when positions depend on flow).
    pub fn dynamic_backward(&self, batch: &DynamicBatch, d_out: &Array2<f64>, grad: &mut [f64], need_x: bool) -> Option<Vec<Vec3>> {
        let mlp = self.config.dynamic_mlp();
        let off = self.static_len();
        let mut g = d_out.clone();
        ndarray::Zip::from(g.rows_mut())
            .and(batch.trace.output.rows())
            .and(batch.out.rows())
            .for_each(|mut g, raw, out| {
                for c in 0..=dy::SIGMA {
                    g[c] *= sigmoid(raw[c]);
                }
                for c in [dy::OCC_FWD, dy::OCC_BWD] {
                    g[c] *= out[c] * (1.0 - out[c]);
                }
            });
        let gin = mlp.backward(&self.weights[off..], &batch.trace, g, &mut grad[off..], need_x)?;
        let e = &self.config.encoding;
        let pos_len = self.config.pos_len();
        let input = &batch.trace.inputs[0];
        let s = self.config.scene_scale;
        Some(
            (0..gin.nrows())
                .map(|r| {
                    let mut gp = [0.0; 3];
                    let feats = input.row(r);
                    let gr = gin.row(r);
                    encoding::encode_backward(
                        &feats.as_slice().unwrap()[..pos_len],
                        &gr.as_slice().unwrap()[..pos_len],
                        3,
                        e.num_frequencies_position,
                        e.include_identity,
                        &mut gp,
                    );
                    Vec3::new(gp[0] / s, gp[1] / s, gp[2] / s)
                })
                .collect(),
        )
    }

    pub fn eval_static(&self, x: &Vec3, d: &Vec3) -> Result<FieldOutputStatic> {
        check_finite(x.iter().chain(d.iter()).copied())?;
        let b = self.static_batch(&[*x], &[*d]);
        let r = b.out.row(0);
        Ok(FieldOutputStatic {
            radiance: [r[0], r[1], r[2]],
            density: r[st::SIGMA],
            blend: r[st::BLEND],
        })
    }

    pub fn eval_dynamic(&self, x: &Vec3, d: &Vec3, t: f64) -> Result<FieldOutputDynamic> {
        check_finite(x.iter().chain(d.iter()).copied().chain([t]))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::input(format!("time {t} outside [0, 1]")));
        }
        let b = self.dynamic_batch(&[*x], &[*d], &[t]);
        let r = b.out.row(0);
        let v3 = |o: usize| [r[o], r[o + 1], r[o + 2]];
        Ok(FieldOutputDynamic {
            radiance: v3(dy::RGB),
            density: r[dy::SIGMA],
            flow_forward: v3(dy::FLOW_FWD),
            flow_backward: v3(dy::FLOW_BWD),
            occ_forward: r[dy::OCC_FWD],
            occ_backward: r[dy::OCC_BWD],
        })
    }
}

fn check_finite(values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::input("field input is not finite"));
        }
    }
    Ok(())
}
