//! Batched fully connected network with a hand-written adjoint.
//!
//! Parameters live in one flat buffer; each layer stores its weight matrix
//! (out x in, row-major) followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    /// No nonlinearity; used as an exactly linear control network.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    offsets: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer activations of one batch, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    n: usize,
    acts: Vec<Vec<f64>>,
    scratch: Vec<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn output_mut(&mut self) -> &mut [f64] {
        self.acts.last_mut().map(|v| v.as_mut_slice()).unwrap_or(&mut [])
    }

    pub fn rows(&self) -> usize {
        self.n
    }
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`; weights get a uniform fan-in
    /// initialization, biases start at zero.
    pub fn new(sizes: &[usize], hidden: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden)?;
        for l in 0..net.layers() {
            let fan_in = net.sizes[l];
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in net.weight_mut(l) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], hidden: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut offsets = vec![0];
        for w in sizes.windows(2) {
            offsets.push(offsets.last().unwrap() + w[0] * w[1] + w[1]);
        }
        let total = *offsets.last().unwrap();
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            offsets,
            params: vec![0.0; total],
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let o = self.offsets[l];
        o..o + self.sizes[l] * self.sizes[l + 1]
    }

    fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let o = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
        o..o + self.sizes[l + 1]
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        &self.params[self.weight_range(l)]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.weight_range(l);
        &mut self.params[r]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.params[self.bias_range(l)]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.bias_range(l);
        &mut self.params[r]
    }

    /// Runs `n` input rows (row-major, `n x input_dim`) through the network.
    /// The raw output of the last layer is left in `cache.output()`.
    pub fn forward(&self, x: &[f64], n: usize, cache: &mut MlpCache) -> Result<()> {
        if x.len() != n * self.input_dim() {
            return Err(Error::shape(format!(
                "network input has {} values, expected {n} x {}",
                x.len(),
                self.input_dim()
            )));
        }
        cache.n = n;
        cache.acts.resize(self.sizes.len(), Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for l in 0..self.layers() {
            let (k, m) = (self.sizes[l], self.sizes[l + 1]);
            let (done, rest) = cache.acts.split_at_mut(l + 1);
            let input = &done[l];
            let out = &mut rest[0];
            out.resize(n * m, 0.0);
            let bias = self.bias(l);
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bias);
            }
            let w = self.weight(l);
            // out (n x m) += input (n x k) * W^T (k x m)
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    k,
                    m,
                    1.0,
                    input.as_ptr(),
                    k as isize,
                    1,
                    w.as_ptr(),
                    1,
                    k as isize,
                    1.0,
                    out.as_mut_ptr(),
                    m as isize,
                    1,
                );
            }
            if l + 1 < self.layers() && self.hidden == Activation::Relu {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(())
    }

    /// Accumulates parameter gradients into `grad` for upstream `d_out`
    /// (gradient of the loss with respect to the raw output). When `d_in` is
    /// given, the input gradient is written there.
    pub fn backward(&self, cache: &mut MlpCache, d_out: &[f64], grad: &mut [f64], d_in: Option<&mut [f64]>) -> Result<()> {
        let n = cache.n;
        if d_out.len() != n * self.output_dim() || grad.len() != self.params.len() {
            return Err(Error::shape("network backward buffers do not match the forward pass"));
        }
        let mut delta = d_out.to_vec();
        let want_input = d_in.is_some();
        for l in (0..self.layers()).rev() {
            let (k, m) = (self.sizes[l], self.sizes[l + 1]);
            let input = &cache.acts[l];
            let br = self.bias_range(l);
            for row in delta.chunks_exact(m) {
                for (g, d) in grad[br.clone()].iter_mut().zip(row) {
                    *g += d;
                }
            }
            let wr = self.weight_range(l);
            // dW (m x k) += delta^T (m x n) * input (n x k)
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    n,
                    k,
                    1.0,
                    delta.as_ptr(),
                    1,
                    m as isize,
                    input.as_ptr(),
                    k as isize,
                    1,
                    1.0,
                    grad[wr].as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            if l == 0 && !want_input {
                break;
            }
            // d input (n x k) = delta (n x m) * W (m x k)
            let scratch = &mut cache.scratch;
            scratch.clear();
            scratch.resize(n * k, 0.0);
            let w = self.weight(l);
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    m,
                    k,
                    1.0,
                    delta.as_ptr(),
                    m as isize,
                    1,
                    w.as_ptr(),
                    k as isize,
                    1,
                    0.0,
                    scratch.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            if l > 0 && self.hidden == Activation::Relu {
                for (s, a) in scratch.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *s = 0.0;
                    }
                }
            }
            std::mem::swap(&mut delta, scratch);
        }
        if let Some(d) = d_in {
            d.copy_from_slice(&delta);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &[f64], n: usize, up: &[f64]) -> f64 {
        let mut c = MlpCache::default();
        net.forward(x, n, &mut c).unwrap();
        c.output().iter().zip(up).map(|(a, b)| a * b).sum()
    }

    fn setup(hidden: Activation) -> (Mlp, Vec<f64>, Vec<f64>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[5, 7, 6, 3], hidden, &mut rng).unwrap();
        for b in 0..3 {
            for v in net.bias_mut(b) {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let n = 4;
        let x: Vec<f64> = (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        (net, x, up, n)
    }

    #[test]
    fn relu_gradients_match_central_differences() {
        let (mut net, x, up, n) = setup(Activation::Relu);
        let mut c = MlpCache::default();
        net.forward(&x, n, &mut c).unwrap();
        let mut grad = vec![0.0; net.param_count()];
        let mut dx = vec![0.0; x.len()];
        net.backward(&mut c, &up, &mut grad, Some(&mut dx)).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..net.param_count() {
            let keep = net.params[i];
            net.params[i] = keep + h;
            let lp = loss(&net, &x, n, &up);
            net.params[i] = keep - h;
            let lm = loss(&net, &x, n, &up);
            net.params[i] = keep;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8));
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&net, &xp, n, &up) - loss(&net, &xm, n, &up)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn linear_net_matches_closed_form() {
        // y = W2 W1 W0 x + (W2 W1 b0 + W2 b1 + b2); with loss u^T y the
        // gradients are dW2 = u (W1 W0 x + W1 b0 + b1)^T, db2 = u,
        // dW0 = (W2 W1)^T u x^T and dx = (W2 W1 W0)^T u, summed over rows.
        use nalgebra::{DMatrix, DVector};
        let (net, x, up, n) = setup(Activation::Identity);
        let mat = |l: usize| DMatrix::from_row_slice(net.sizes[l + 1], net.sizes[l], net.weight(l));
        let vec = |l: usize| DVector::from_row_slice(net.bias(l));
        let (w0, w1, w2) = (mat(0), mat(1), mat(2));
        let (b0, b1) = (vec(0), vec(1));
        let mut dw0 = DMatrix::zeros(7, 5);
        let mut dw2 = DMatrix::zeros(3, 6);
        let mut db2 = DVector::zeros(3);
        let mut dx = Vec::new();
        for r in 0..n {
            let xr = DVector::from_row_slice(&x[r * 5..r * 5 + 5]);
            let u = DVector::from_row_slice(&up[r * 3..r * 3 + 3]);
            let h1 = &w0 * &xr + &b0;
            let h2 = &w1 * &h1 + &b1;
            dw2 += &u * h2.transpose();
            db2 += &u;
            dw0 += (&w2 * &w1).transpose() * &u * xr.transpose();
            dx.extend(((&w2 * &w1 * &w0).transpose() * &u).iter().copied());
        }
        let mut c = MlpCache::default();
        net.forward(&x, n, &mut c).unwrap();
        let mut grad = vec![0.0; net.param_count()];
        let mut gx = vec![0.0; x.len()];
        net.backward(&mut c, &up, &mut grad, Some(&mut gx)).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&grad[net.weight_range(0)], DMatrix::transpose(&dw0).as_slice()));
        assert!(close(&grad[net.weight_range(2)], DMatrix::transpose(&dw2).as_slice()));
        assert!(close(&grad[net.bias_range(2)], db2.as_slice()));
        assert!(close(&gx, &dx));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (net, x, _, n) = setup(Activation::Relu);
        let mut c = MlpCache::default();
        net.forward(&x, n, &mut c).unwrap();
        let mut grad = vec![0.0; net.param_count()];
        net.backward(&mut c, &vec![0.0; n * 3], &mut grad, None).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_errors() {
        let (net, x, _, _) = setup(Activation::Relu);
        let mut c = MlpCache::default();
        assert!(matches!(net.forward(&x, 3, &mut c), Err(Error::Shape(_))));
        assert!(Mlp::zeros(&[3], Activation::Relu).is_err());
    }
}
