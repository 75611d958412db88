use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected ReLU network stored in a caller-owned flat parameter slice.
///
/// Layer `l` holds a row-major `(in, out)` weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
}

/// Activations retained by [`Mlp::forward`] for the backward pass.
pub struct MlpTrace {
    /// Input of every layer; `inputs[0]` is the network input.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activation output of the last layer.
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden_layers: usize, width: usize, output: usize) -> Self {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(width, hidden_layers));
        dims.push(output);
        Self { dims }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// `(weight offset, bias offset, fan in, fan out)` of layer `l`.
    pub fn layer(&self, l: usize) -> (usize, usize, usize, usize) {
        let off: usize = self.dims[..=l].windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (off, off + i * o, i, o)
    }

    /// Fan-in scaled uniform init for hidden layers; the output layer gets
    /// weights scaled by `out_scale` and zero bias.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, out_scale: f64) {
        for l in 0..self.layers() {
            let (w, b, i, o) = self.layer(l);
            let mut bound = (6.0 / i as f64).sqrt();
            if l + 1 == self.layers() {
                bound *= out_scale;
            }
            for v in &mut params[w..w + i * o] {
                *v = if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
            }
            params[b..b + o].fill(0.0);
        }
    }

    pub fn forward(&self, params: &[f64], input: Array2<f64>) -> MlpTrace {
        debug_assert_eq!(input.ncols(), self.input_dim());
        let mut inputs = Vec::with_capacity(self.layers());
        let mut x = input;
        for l in 0..self.layers() {
            let (w, b, i, o) = self.layer(l);
            let wv = ArrayView2::from_shape((i, o), &params[w..w + i * o]).unwrap();
            let bv = ArrayView1::from(&params[b..b + o]);
            let mut y = x.dot(&wv);
            y += &bv;
            if l + 1 < self.layers() {
                y.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(x);
            x = y;
        }
        MlpTrace { inputs, output: x }
    }

    /// Accumulate parameter gradients for `d_output` (w.r.t. the pre-activation
    /// output) into `grad`; returns the input gradient when requested.
    pub fn backward(&self, params: &[f64], trace: &MlpTrace, d_output: Array2<f64>, grad: &mut [f64], need_input: bool) -> Option<Array2<f64>> {
        let mut g = d_output;
        for l in (0..self.layers()).rev() {
            let (w, b, i, o) = self.layer(l);
            let x = &trace.inputs[l];
            {
                let (gw_slice, rest) = grad[w..].split_at_mut(i * o);
                let mut gw = ArrayViewMut2::from_shape((i, o), gw_slice).unwrap();
                general_mat_mul(1.0, &x.t(), &g, 1.0, &mut gw);
                let mut gb = ArrayViewMut1::from(&mut rest[..o]);
                gb += &g.sum_axis(Axis(0));
            }
            if l == 0 && !need_input {
                return None;
            }
            let wv = ArrayView2::from_shape((i, o), &params[w..w + i * o]).unwrap();
            let mut gx = g.dot(&wv.t());
            if l > 0 {
                // x is the ReLU output of the previous layer
                ndarray::Zip::from(&mut gx).and(x).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            debug_assert_eq!(b, w + i * o);
            g = gx;
        }
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_finite_differences() {
        let mlp = Mlp::new(4, 2, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = vec![0.0; mlp.param_count()];
        mlp.init(&mut p, &mut rng, 1.0);
        for v in p.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let x = Array2::from_shape_fn((5, 4), |(r, c)| ((r * 4 + c) as f64 * 0.37).sin());
        let wout = Array2::from_shape_fn((5, 3), |(r, c)| ((r * 3 + c) as f64 * 0.91).cos());
        let loss = |p: &[f64], x: &Array2<f64>| (mlp.forward(p, x.clone()).output * &wout).sum();
        let trace = mlp.forward(&p, x.clone());
        let mut g = vec![0.0; p.len()];
        let gx = mlp.backward(&p, &trace, wout.clone(), &mut g, true).unwrap();
        let h = 1e-6;
        for k in 0..p.len() {
            let mut a = p.clone();
            a[k] += h;
            let mut b = p.clone();
            b[k] -= h;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", g[k]);
        }
        for r in 0..5 {
            for c in 0..4 {
                let mut a = x.clone();
                a[[r, c]] += h;
                let mut b = x.clone();
                b[[r, c]] -= h;
                let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
                assert!((fd - gx[[r, c]]).abs() <= 1e-4 * fd.abs().max(1e-3));
            }
        }
    }
}
