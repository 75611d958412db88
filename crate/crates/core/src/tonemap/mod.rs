//! Learnable tone mapping `C = g(w ⊙ E)`.
//!
//! `w` is a per-frame channel gain (white balance times the frame's relative
//! exposure) and `g` a monotone camera response curve. During training the
//! curve is extended outside `[0, 1]` with leaky thresholding so saturated
//! pixels still pass gradient back to the radiance field.

mod curve;
mod mlp_curve;
mod white_balance;

pub use curve::{
    crf_smoothness_loss, eval_points, smoothness_with_grad, CrfParams, CurveGrad, PreparedCurve, ToneCurve,
    ToneCurveKind, CONTROL_POINTS, DEFAULT_LEAK_ALPHA, SEGMENTS,
};
pub use mlp_curve::MlpCurve;
pub use white_balance::{WbSharing, WhiteBalance};

use crate::error::{Error, Result};

/// Leaky extension of a response curve that is anchored at `g(0) = 0`, `g(1) = 1`.
///
/// Returns `None` inside `[0, 1]`, where the curve itself applies.
#[inline]
pub fn leaky_tail(x: f64, alpha: f64) -> Option<(f64, f64)> {
    if x < 0.0 {
        Some((alpha * x, alpha))
    } else if x > 1.0 {
        let s = x.sqrt();
        Some((-alpha / s + alpha + 1.0, 0.5 * alpha / (x * s)))
    } else {
        None
    }
}

/// Apply the response curve of one channel to a white-balanced value.
pub fn apply_crf(crf: &CrfParams, channel: usize, x: f64, training: bool) -> f64 {
    let points = crf.control_points();
    eval_points(&points[channel], crf.leak_alpha(), x, training).0
}

/// Per-channel product of the frame gain with the radiance.
pub fn apply_white_balance(wb: &WhiteBalance, frame: usize, e: [f64; 3]) -> Result<[f64; 3]> {
    let g = wb.gain(frame)?;
    Ok([g[0] * e[0], g[1] * e[1], g[2] * e[2]])
}

/// Full tone mapping of one HDR color for a given frame.
pub fn tonemap(curve: &ToneCurve, wb: &WhiteBalance, frame: usize, e: [f64; 3], training: bool) -> Result<[f64; 3]> {
    let prepared = curve.prepare();
    ToneMapper::new(&prepared, wb).forward(frame, e, training)
}

/// μ-law range compressor `log(1 + μE) / log(1 + μ)`.
pub fn mulaw(e: f64, mu: f64) -> Result<f64> {
    if e < 0.0 || !e.is_finite() {
        return Err(Error::input(format!("μ-law expects finite non-negative radiance, got {e}")));
    }
    if !(mu > 0.0) {
        return Err(Error::input("μ must be positive"));
    }
    Ok((mu * e).ln_1p() / mu.ln_1p())
}

pub fn mulaw3(e: [f64; 3], mu: f64) -> Result<[f64; 3]> {
    Ok([mulaw(e[0], mu)?, mulaw(e[1], mu)?, mulaw(e[2], mu)?])
}

/// Couples a prepared curve with the white balance table for the hot loops.
pub struct ToneMapper<'a> {
    curve: &'a PreparedCurve<'a>,
    wb: &'a WhiteBalance,
}

impl<'a> ToneMapper<'a> {
    pub fn new(curve: &'a PreparedCurve<'a>, wb: &'a WhiteBalance) -> Self {
        Self { curve, wb }
    }

    pub fn curve(&self) -> &PreparedCurve<'a> {
        self.curve
    }

    pub fn forward(&self, frame: usize, e: [f64; 3], training: bool) -> Result<[f64; 3]> {
        if self.curve.is_disabled() {
            return Ok(disabled(e, training));
        }
        let g = self.wb.gain(frame)?;
        Ok(std::array::from_fn(|c| self.curve.eval(c, g[c] * e[c], training).0))
    }

    /// Forward with a caller-supplied gain, used for exposure-tag renders.
    pub fn forward_with_gain(&self, gain: [f64; 3], e: [f64; 3], training: bool) -> [f64; 3] {
        if self.curve.is_disabled() {
            return disabled(e, training);
        }
        std::array::from_fn(|c| self.curve.eval(c, gain[c] * e[c], training).0)
    }

    /// Back-propagate `dL/dC` into the radiance, the curve and the white balance.
    ///
    /// Returns `dL/dE`.
    pub fn backward(
        &self,
        frame: usize,
        e: [f64; 3],
        training: bool,
        grad_out: [f64; 3],
        curve_grad: &mut CurveGrad,
        wb_grad: &mut [f64],
    ) -> Result<[f64; 3]> {
        if self.curve.is_disabled() {
            return Ok(std::array::from_fn(|c| {
                if training || (0.0..=1.0).contains(&e[c]) {
                    grad_out[c]
                } else {
                    0.0
                }
            }));
        }
        let g = self.wb.gain(frame)?;
        let mut de = [0.0; 3];
        for c in 0..3 {
            let x = g[c] * e[c];
            let (_, dydx) = self.curve.eval(c, x, training);
            self.curve.backward(c, x, training, grad_out[c], curve_grad);
            let dx = grad_out[c] * dydx;
            de[c] = dx * g[c];
            self.wb.accumulate_grad(frame, c, dx * x, wb_grad);
        }
        Ok(de)
    }
}

fn disabled(e: [f64; 3], training: bool) -> [f64; 3] {
    if training {
        e
    } else {
        e.map(|v| v.clamp(0.0, 1.0))
    }
}
