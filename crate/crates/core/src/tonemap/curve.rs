use serde::{Deserialize, Serialize};

use super::leaky_tail;
use super::mlp_curve::{MlpCurve, MlpCurveGrad};
use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, softplus_inv};

pub const CONTROL_POINTS: usize = 256;
pub const SEGMENTS: usize = CONTROL_POINTS - 1;
pub const DEFAULT_LEAK_ALPHA: f64 = 0.01;

type Points = [[f64; CONTROL_POINTS]; 3];

/// Piecewise-linear response on 256 uniform control points per channel.
///
/// The curve is stored as 255 unconstrained values per channel; each maps to
/// a positive increment through softplus, and the cumulative sum is divided
/// by its total. Monotonicity, `g(0) = 0` and `g(1) = 1` therefore hold for
/// any parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    raw: Vec<f64>,
    leak_alpha: f64,
}

impl CrfParams {
    pub fn identity(leak_alpha: f64) -> Self {
        Self {
            raw: vec![softplus_inv(1.0 / SEGMENTS as f64); 3 * SEGMENTS],
            leak_alpha,
        }
    }

    /// Curve sampled from `x^(1/gamma)`.
    pub fn gamma(gamma: f64, leak_alpha: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::input("gamma must be positive"));
        }
        let ch: [f64; CONTROL_POINTS] = std::array::from_fn(|k| (k as f64 / SEGMENTS as f64).powf(1.0 / gamma));
        Self::from_control_points(&[ch; 3], leak_alpha)
    }

    /// Fit the parameterization to explicit control points.
    ///
    /// Zero-width increments are bumped to a tiny positive value since the
    /// parameterization cannot represent them exactly.
    pub fn from_control_points(points: &Points, leak_alpha: f64) -> Result<Self> {
        let mut raw = Vec::with_capacity(3 * SEGMENTS);
        for ch in points {
            if ch[0] != 0.0 || (ch[SEGMENTS] - 1.0).abs() > 1e-9 {
                return Err(Error::input("control points must start at 0 and end at 1"));
            }
            for w in ch.windows(2) {
                let d = w[1] - w[0];
                if d < 0.0 {
                    return Err(Error::input("control points must be non-decreasing"));
                }
                raw.push(softplus_inv(d.max(1e-12)));
            }
        }
        Ok(Self { raw, leak_alpha })
    }

    pub fn leak_alpha(&self) -> f64 {
        self.leak_alpha
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    /// Derived control points, one row of 256 values per channel.
    pub fn control_points(&self) -> Box<Points> {
        let mut out = Box::new([[0.0; CONTROL_POINTS]; 3]);
        for (c, ch) in out.iter_mut().enumerate() {
            let raw = &self.raw[c * SEGMENTS..(c + 1) * SEGMENTS];
            let mut acc = 0.0;
            for (k, &u) in raw.iter().enumerate() {
                acc += softplus(u);
                ch[k + 1] = acc;
            }
            let total = acc;
            for v in ch.iter_mut() {
                *v /= total;
            }
            ch[SEGMENTS] = 1.0;
        }
        out
    }

    /// Chain `dL/d(control points)` back to the raw parameters.
    pub fn raw_grad_from_points(&self, point_grad: &Points) -> Vec<f64> {
        let points = self.control_points();
        let mut out = vec![0.0; 3 * SEGMENTS];
        for c in 0..3 {
            let raw = &self.raw[c * SEGMENTS..(c + 1) * SEGMENTS];
            let total: f64 = raw.iter().map(|&u| softplus(u)).sum();
            let g = &point_grad[c];
            let weighted: f64 = g.iter().zip(points[c].iter()).map(|(a, b)| a * b).sum();
            // suffix[m] = sum of G_k for k > m
            let mut suffix = 0.0;
            for m in (0..SEGMENTS).rev() {
                suffix += g[m + 1];
                out[c * SEGMENTS + m] = sigmoid(raw[m]) / total * (suffix - weighted);
            }
        }
        out
    }
}

/// Evaluate a control-point curve; returns the value and `dy/dx`.
#[inline]
pub fn eval_points(points: &[f64; CONTROL_POINTS], alpha: f64, x: f64, training: bool) -> (f64, f64) {
    if training {
        if let Some(t) = leaky_tail(x, alpha) {
            return t;
        }
    }
    let inside = (0.0..=1.0).contains(&x);
    let (k, lam) = locate(x);
    let dy = points[k + 1] - points[k];
    let slope = if inside { dy * SEGMENTS as f64 } else { 0.0 };
    (points[k] + lam * dy, slope)
}

#[inline]
fn locate(x: f64) -> (usize, f64) {
    let pos = x.clamp(0.0, 1.0) * SEGMENTS as f64;
    let k = (pos.floor() as usize).min(SEGMENTS - 1);
    (k, pos - k as f64)
}

/// Sum of squared second differences scaled by `1/h³`, so the value
/// approximates `∫ g''(x)² dx` independently of the grid resolution.
pub fn smoothness_with_grad(points: &[f64]) -> (f64, Vec<f64>) {
    let n = points.len();
    let h = 1.0 / (n - 1) as f64;
    let scale = 1.0 / (h * h * h);
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    for k in 1..n - 1 {
        let d = points[k + 1] - 2.0 * points[k] + points[k - 1];
        total += scale * d * d;
        let g = 2.0 * scale * d;
        grad[k + 1] += g;
        grad[k] -= 2.0 * g;
        grad[k - 1] += g;
    }
    (total, grad)
}

/// Curvature penalty summed over the three channels.
pub fn crf_smoothness_loss(crf: &CrfParams) -> f64 {
    crf.control_points().iter().map(|ch| smoothness_with_grad(ch).0).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToneCurveKind {
    /// Learnable 256-point curve.
    Piecewise,
    /// Fixed identity response.
    Fixed,
    /// Small learnable MLP response.
    Mlp,
    /// No tone mapping: rendered radiance is compared to LDR directly.
    None,
}

impl std::str::FromStr for ToneCurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piecewise" => Ok(Self::Piecewise),
            "fixed" => Ok(Self::Fixed),
            "mlp" => Ok(Self::Mlp),
            "none" => Ok(Self::None),
            other => Err(Error::input(format!("unknown tone curve `{other}`"))),
        }
    }
}

impl std::fmt::Display for ToneCurveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Piecewise => "piecewise",
            Self::Fixed => "fixed",
            Self::Mlp => "mlp",
            Self::None => "none",
        })
    }
}

/// The response curve `g`, with the ablation variants behind one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ToneCurve {
    Piecewise(CrfParams),
    Fixed { gamma: f64, leak_alpha: f64 },
    Mlp(MlpCurve),
    Disabled,
}

impl ToneCurve {
    pub fn new(kind: ToneCurveKind, leak_alpha: f64, seed: u64) -> Self {
        match kind {
            ToneCurveKind::Piecewise => Self::Piecewise(CrfParams::identity(leak_alpha)),
            ToneCurveKind::Fixed => Self::Fixed { gamma: 1.0, leak_alpha },
            ToneCurveKind::Mlp => Self::Mlp(MlpCurve::new(16, leak_alpha, seed)),
            ToneCurveKind::None => Self::Disabled,
        }
    }

    pub fn kind(&self) -> ToneCurveKind {
        match self {
            Self::Piecewise(_) => ToneCurveKind::Piecewise,
            Self::Fixed { .. } => ToneCurveKind::Fixed,
            Self::Mlp(_) => ToneCurveKind::Mlp,
            Self::Disabled => ToneCurveKind::None,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Piecewise(c) => c.raw(),
            Self::Mlp(m) => m.params(),
            _ => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Piecewise(c) => c.raw_mut(),
            Self::Mlp(m) => m.params_mut(),
            _ => &mut [],
        }
    }

    pub fn prepare(&self) -> PreparedCurve<'_> {
        match self {
            Self::Piecewise(c) => PreparedCurve::Points {
                points: c.control_points(),
                alpha: c.leak_alpha(),
                crf: c,
            },
            Self::Fixed { gamma, leak_alpha } => PreparedCurve::Fixed {
                inv_gamma: 1.0 / gamma,
                alpha: *leak_alpha,
            },
            Self::Mlp(m) => PreparedCurve::Mlp {
                norm: std::array::from_fn(|c| (m.eval_raw(c, 0.0).0, m.eval_raw(c, 1.0).0)),
                curve: m,
            },
            Self::Disabled => PreparedCurve::Disabled,
        }
    }

    /// Convert accumulated curve gradients into a gradient over [`Self::params`].
    pub fn finish_grad(&self, grad: CurveGrad) -> Vec<f64> {
        match (self, grad) {
            (Self::Piecewise(c), CurveGrad::Points(g)) => c.raw_grad_from_points(&g),
            (Self::Mlp(m), CurveGrad::Mlp(g)) => m.finish_grad(g),
            _ => Vec::new(),
        }
    }

    /// Curvature penalty of the curve (zero for variants without control points).
    ///
    /// With `grad`, `weight * dL_smooth/d(points)` is added to the accumulator.
    pub fn smoothness(&self, prepared: &PreparedCurve<'_>, grad: Option<(&mut CurveGrad, f64)>) -> f64 {
        let PreparedCurve::Points { points, .. } = prepared else {
            return 0.0;
        };
        let mut total = 0.0;
        let mut target = match grad {
            Some((CurveGrad::Points(g), w)) => Some((g, w)),
            _ => None,
        };
        for (c, ch) in points.iter().enumerate() {
            let (v, g) = smoothness_with_grad(ch);
            total += v;
            if let Some((gp, w)) = target.as_mut() {
                for (a, b) in gp[c].iter_mut().zip(g) {
                    *a += *w * b;
                }
            }
        }
        total
    }

    /// Curve values on the uniform 256-point grid, for export and scoring.
    pub fn sampled(&self) -> Box<Points> {
        let prepared = self.prepare();
        let mut out = Box::new([[0.0; CONTROL_POINTS]; 3]);
        for (c, ch) in out.iter_mut().enumerate() {
            for (k, v) in ch.iter_mut().enumerate() {
                *v = prepared.eval(c, k as f64 / SEGMENTS as f64, false).0;
            }
        }
        out
    }
}

/// A curve with its derived quantities computed once per step.
pub enum PreparedCurve<'a> {
    Points {
        points: Box<Points>,
        alpha: f64,
        crf: &'a CrfParams,
    },
    Fixed {
        inv_gamma: f64,
        alpha: f64,
    },
    Mlp {
        curve: &'a MlpCurve,
        norm: [(f64, f64); 3],
    },
    Disabled,
}

impl PreparedCurve<'_> {
    pub fn is_disabled(&self) -> bool {
        matches!(self, Self::Disabled)
    }

    pub fn zero_grad(&self) -> CurveGrad {
        match self {
            Self::Points { .. } => CurveGrad::Points(Box::new([[0.0; CONTROL_POINTS]; 3])),
            Self::Mlp { curve, .. } => CurveGrad::Mlp(MlpCurveGrad::zeros(curve.params().len())),
            _ => CurveGrad::None,
        }
    }

    /// Value and slope of channel `c` at `x`.
    #[inline]
    pub fn eval(&self, c: usize, x: f64, training: bool) -> (f64, f64) {
        match self {
            Self::Points { points, alpha, .. } => eval_points(&points[c], *alpha, x, training),
            Self::Fixed { inv_gamma, alpha } => {
                if training {
                    if let Some(t) = leaky_tail(x, *alpha) {
                        return t;
                    }
                }
                if !(0.0..=1.0).contains(&x) {
                    return (x.clamp(0.0, 1.0), 0.0);
                }
                let xs = x.max(1e-12);
                (x.powf(*inv_gamma), inv_gamma * xs.powf(inv_gamma - 1.0))
            }
            Self::Mlp { curve, norm } => {
                let alpha = curve.leak_alpha();
                if training {
                    if let Some(t) = leaky_tail(x, alpha) {
                        return t;
                    }
                }
                let inside = (0.0..=1.0).contains(&x);
                let (h0, h1) = norm[c];
                let (h, dh) = curve.eval_raw(c, x.clamp(0.0, 1.0));
                let d = h1 - h0;
                ((h - h0) / d, if inside { dh / d } else { 0.0 })
            }
            Self::Disabled => {
                if training {
                    (x, 1.0)
                } else {
                    (x.clamp(0.0, 1.0), if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 })
                }
            }
        }
    }

    /// Accumulate `gy * dy/dθ` for channel `c` at `x`.
    #[inline]
    pub fn backward(&self, c: usize, x: f64, training: bool, gy: f64, grad: &mut CurveGrad) {
        if gy == 0.0 {
            return;
        }
        match (self, grad) {
            (Self::Points { alpha, .. }, CurveGrad::Points(g)) => {
                if training && leaky_tail(x, *alpha).is_some() {
                    return;
                }
                let (k, lam) = locate(x);
                g[c][k] += gy * (1.0 - lam);
                g[c][k + 1] += gy * lam;
            }
            (Self::Mlp { curve, norm }, CurveGrad::Mlp(g)) => {
                if training && leaky_tail(x, curve.leak_alpha()).is_some() {
                    return;
                }
                let (h0, h1) = norm[c];
                let d = h1 - h0;
                let xc = x.clamp(0.0, 1.0);
                let (h, _) = curve.eval_raw(c, xc);
                curve.backward_raw(c, xc, gy / d, &mut g.params);
                g.coef_a[c] += gy / d;
                g.coef_b[c] += gy * (h - h0) / (d * d);
            }
            _ => {}
        }
    }
}

/// Gradient accumulator matching a [`PreparedCurve`].
#[derive(Debug, Clone)]
pub enum CurveGrad {
    Points(Box<Points>),
    Mlp(MlpCurveGrad),
    None,
}

impl CurveGrad {
    pub fn add_assign(&mut self, other: &CurveGrad) {
        match (self, other) {
            (CurveGrad::Points(a), CurveGrad::Points(b)) => {
                for (ra, rb) in a.iter_mut().zip(b.iter()) {
                    for (x, y) in ra.iter_mut().zip(rb.iter()) {
                        *x += y;
                    }
                }
            }
            (CurveGrad::Mlp(a), CurveGrad::Mlp(b)) => a.add_assign(b),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_curvature() {
        let crf = CrfParams::identity(0.01);
        assert!(crf_smoothness_loss(&crf) < 1e-18);
    }

    #[test]
    fn quadratic_curvature_is_resolution_independent() {
        let grid = |n: usize| -> Vec<f64> { (0..n).map(|k| (k as f64 / (n - 1) as f64).powi(2)).collect() };
        let (s256, _) = smoothness_with_grad(&grid(256));
        let (s64, _) = smoothness_with_grad(&grid(64));
        // each interior second difference is 2h², so the sum is 254 * (2h²)² / h³ = 4 * 254 / 255
        let h: f64 = 1.0 / 255.0;
        let closed = 254.0 * (2.0 * h * h).powi(2) / (h * h * h);
        assert!((s256 - closed).abs() < 1e-9 * closed);
        assert!((s256 - s64).abs() / s256 < 0.05);
        let crf = CrfParams::from_control_points(&[std::array::from_fn(|k| (k as f64 / 255.0).powi(2)); 3], 0.01).unwrap();
        assert!((crf_smoothness_loss(&crf) - 3.0 * closed).abs() < 1e-3 * closed);
    }

    #[test]
    fn kink_has_positive_curvature() {
        let ch: [f64; CONTROL_POINTS] = std::array::from_fn(|k| {
            let x = k as f64 / 255.0;
            if x < 0.5 {
                0.5 * x
            } else {
                1.5 * x - 0.5
            }
        });
        let crf = CrfParams::from_control_points(&[ch; 3], 0.01).unwrap();
        assert!(crf_smoothness_loss(&crf) > 0.0);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let pts: Vec<f64> = (0..16).map(|k| ((k as f64) / 15.0).powf(0.6) + 0.01 * (k as f64).sin()).collect();
        let (_, g) = smoothness_with_grad(&pts);
        let h = 1e-7;
        for k in 0..pts.len() {
            let mut p = pts.clone();
            p[k] += h;
            let mut m = pts.clone();
            m[k] -= h;
            let fd = (smoothness_with_grad(&p).0 - smoothness_with_grad(&m).0) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_decreasing_points() {
        let mut ch: [f64; CONTROL_POINTS] = std::array::from_fn(|k| k as f64 / 255.0);
        ch[100] = 0.9;
        assert!(CrfParams::from_control_points(&[ch; 3], 0.01).is_err());
    }
}
