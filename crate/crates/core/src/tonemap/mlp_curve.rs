use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-channel response `h(x) = x + MLP(x)` with two tanh hidden layers,
/// normalized to `(h(x) - h(0)) / (h(1) - h(0))` when evaluated.
///
/// Monotonicity is not enforced; this curve exists as an ablation baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCurve {
    hidden: usize,
    leak_alpha: f64,
    params: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Layout {
    fn new(h: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        Self { w1, b1, w2, b2, w3, b3, len: b3 + 1 }
    }
}

impl MlpCurve {
    pub fn new(hidden: usize, leak_alpha: f64, seed: u64) -> Self {
        let lay = Layout::new(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_705f_6372_6631);
        let mut params = vec![0.0; 3 * lay.len];
        let s2 = (3.0 / hidden as f64).sqrt();
        for ch in params.chunks_mut(lay.len) {
            for i in 0..hidden {
                ch[lay.w1 + i] = rng.random_range(-3.0..3.0);
                ch[lay.b1 + i] = rng.random_range(-1.5..1.5);
                ch[lay.b2 + i] = 0.0;
                ch[lay.w3 + i] = rng.random_range(-0.01..0.01);
            }
            for v in &mut ch[lay.w2..lay.b2] {
                *v = rng.random_range(-s2..s2);
            }
        }
        Self { hidden, leak_alpha, params }
    }

    pub fn leak_alpha(&self) -> f64 {
        self.leak_alpha
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn channel(&self, c: usize) -> (&[f64], Layout) {
        let lay = Layout::new(self.hidden);
        (&self.params[c * lay.len..(c + 1) * lay.len], lay)
    }

    fn hidden_acts(&self, p: &[f64], lay: &Layout, x: f64) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let z1: Vec<f64> = (0..h).map(|i| (p[lay.w1 + i] * x + p[lay.b1 + i]).tanh()).collect();
        let z2: Vec<f64> = (0..h)
            .map(|j| {
                let a = p[lay.b2 + j] + (0..h).map(|i| z1[i] * p[lay.w2 + i * h + j]).sum::<f64>();
                a.tanh()
            })
            .collect();
        (z1, z2)
    }

    /// Unnormalized `h(x)` and `dh/dx` for channel `c`.
    pub fn eval_raw(&self, c: usize, x: f64) -> (f64, f64) {
        let (p, lay) = self.channel(c);
        let h = self.hidden;
        let (z1, z2) = self.hidden_acts(p, &lay, x);
        let mut out = x + p[lay.b3];
        let mut slope = 1.0;
        let dz1: Vec<f64> = (0..h).map(|i| (1.0 - z1[i] * z1[i]) * p[lay.w1 + i]).collect();
        for j in 0..h {
            out += p[lay.w3 + j] * z2[j];
            let da2: f64 = (0..h).map(|i| dz1[i] * p[lay.w2 + i * h + j]).sum();
            slope += p[lay.w3 + j] * (1.0 - z2[j] * z2[j]) * da2;
        }
        (out, slope)
    }

    /// Accumulate `gh * dh(x)/dθ` for channel `c` into `grad`.
    pub fn backward_raw(&self, c: usize, x: f64, gh: f64, grad: &mut [f64]) {
        let (p, lay) = self.channel(c);
        let h = self.hidden;
        let (z1, z2) = self.hidden_acts(p, &lay, x);
        let g = &mut grad[c * lay.len..(c + 1) * lay.len];
        g[lay.b3] += gh;
        let mut ga2 = vec![0.0; h];
        for j in 0..h {
            g[lay.w3 + j] += gh * z2[j];
            ga2[j] = gh * p[lay.w3 + j] * (1.0 - z2[j] * z2[j]);
            g[lay.b2 + j] += ga2[j];
        }
        for i in 0..h {
            let mut gz1 = 0.0;
            for j in 0..h {
                g[lay.w2 + i * h + j] += ga2[j] * z1[i];
                gz1 += ga2[j] * p[lay.w2 + i * h + j];
            }
            let ga1 = gz1 * (1.0 - z1[i] * z1[i]);
            g[lay.w1 + i] += ga1 * x;
            g[lay.b1 + i] += ga1;
        }
    }

    /// Add the normalization terms to the accumulated gradient and return it.
    pub(crate) fn finish_grad(&self, g: MlpCurveGrad) -> Vec<f64> {
        let mut out = g.params;
        for c in 0..3 {
            let (a, b) = (g.coef_a[c], g.coef_b[c]);
            self.backward_raw(c, 0.0, b - a, &mut out);
            self.backward_raw(c, 1.0, -b, &mut out);
        }
        out
    }
}

/// Gradient accumulator for [`MlpCurve`].
///
/// `coef_a` and `coef_b` collect the factors needed to differentiate the
/// `h(0)` and `h(1)` normalization once per step rather than per sample.
#[derive(Debug, Clone)]
pub struct MlpCurveGrad {
    pub(crate) params: Vec<f64>,
    pub(crate) coef_a: [f64; 3],
    pub(crate) coef_b: [f64; 3],
}

impl MlpCurveGrad {
    pub(crate) fn zeros(len: usize) -> Self {
        Self { params: vec![0.0; len], coef_a: [0.0; 3], coef_b: [0.0; 3] }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += b;
        }
        for c in 0..3 {
            self.coef_a[c] += other.coef_a[c];
            self.coef_b[c] += other.coef_b[c];
        }
    }
}
