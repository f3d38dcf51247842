use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for k in 0..n {
            m.data[k * n + k] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (k, v) in values.iter().enumerate() {
            m.data[k * n + k] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension {
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `W^T y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate().take(self.rows) {
            axpy(yr, self.row(r), &mut out);
        }
        out
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn grad(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Feed-forward network with a shared hidden activation and identity output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    /// `weights[l]` has shape `(dims[l + 1], dims[l])`.
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Activations of one batched forward pass, kept for `Mlp::backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    n: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// Row-major `(n, out_dim)` output.
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, Vec::as_slice)
    }
}

/// Gradients shaped exactly like the owning network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn zeros_like(m: &Mlp) -> Self {
        GradientTape {
            weights: m
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows, w.cols))
                .collect(),
            biases: m.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.weights {
            w.scale(k);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &GradientTape) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            axpy(1.0, &b.data, &mut a.data);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            axpy(1.0, b, a);
        }
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|v| *v == 0.0)
    }

    pub fn matches(&self, m: &Mlp) -> bool {
        self.weights.len() == m.weights.len()
            && self
                .weights
                .iter()
                .zip(&m.weights)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
            && self
                .biases
                .iter()
                .zip(&m.biases)
                .all(|(a, b)| a.len() == b.len())
    }
}

impl Mlp {
    /// Uniform fan-in initialisation (He for relu, Xavier for tanh); the
    /// output layer is scaled down so fresh networks start near zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut m = Mlp::zeros(dims, activation);
        let layers = m.weights.len();
        for (l, w) in m.weights.iter_mut().enumerate() {
            let fan_in = w.cols as f64;
            let fan_out = w.rows as f64;
            let mut bound = match activation {
                Activation::Relu => (6.0 / fan_in).sqrt(),
                Activation::Tanh => (6.0 / (fan_in + fan_out)).sqrt(),
            };
            if l + 1 == layers {
                bound *= 0.1;
            }
            for v in &mut w.data {
                *v = rng.random_range(-bound..bound);
            }
        }
        m
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an Mlp needs at least an input and an output width");
        let weights = dims
            .windows(2)
            .map(|d| Matrix::zeros(d[1], d[0]))
            .collect();
        let biases = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
        }
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>, activation: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config("weights and biases must be non-empty and paired".into()));
        }
        let mut dims = vec![weights[0].cols];
        for (w, b) in weights.iter().zip(&biases) {
            let prev = *dims.last().unwrap();
            if w.cols != prev {
                return Err(Error::Dimension {
                    expected: prev,
                    got: w.cols,
                });
            }
            if b.len() != w.rows {
                return Err(Error::Dimension {
                    expected: w.rows,
                    got: b.len(),
                });
            }
            dims.push(w.rows);
        }
        let m = Mlp {
            dims,
            weights,
            biases,
            activation,
        };
        if !m.is_finite() {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.data.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut a = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(&a);
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
                if l < last {
                    *zi = self.activation.apply(*zi);
                }
            }
            a = z;
        }
        Ok(a)
    }

    /// Batched forward pass over `n` row-major inputs.
    pub fn forward_batch(&self, x: &[f64], n: usize) -> Result<ForwardCache> {
        if x.len() != n * self.input_dim() {
            return Err(Error::Dimension {
                expected: n * self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.weights.len() - 1;
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input: &[f64] = if l == 0 { x } else { &post[l - 1] };
            let mut z = vec![0.0; n * w.rows];
            for s in 0..n {
                let a = &input[s * w.cols..(s + 1) * w.cols];
                let zrow = &mut z[s * w.rows..(s + 1) * w.rows];
                for (o, zo) in zrow.iter_mut().enumerate() {
                    *zo = dot(w.row(o), a) + b[o];
                }
            }
            let y = if l < last {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(y);
        }
        Ok(ForwardCache {
            n,
            input: x.to_vec(),
            pre,
            post,
        })
    }

    /// Exact gradient of `sum(output * upstream)` with respect to every
    /// parameter.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<GradientTape> {
        Ok(self.backward_full(cache, upstream)?.0)
    }

    /// Like [`Mlp::backward`], also returning the gradient with respect to
    /// the inputs.
    pub fn backward_full(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(GradientTape, Vec<f64>)> {
        let n = cache.n;
        if cache.pre.len() != self.weights.len() || cache.input.len() != n * self.input_dim() {
            return Err(Error::Config("forward cache does not belong to this network".into()));
        }
        if upstream.len() != n * self.output_dim() {
            return Err(Error::Dimension {
                expected: n * self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut tape = GradientTape::zeros_like(self);
        let mut delta = upstream.to_vec();
        for l in (0..self.weights.len()).rev() {
            let w = &self.weights[l];
            let input: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let gw = &mut tape.weights[l];
            let gb = &mut tape.biases[l];
            for s in 0..n {
                let d = &delta[s * w.rows..(s + 1) * w.rows];
                let a = &input[s * w.cols..(s + 1) * w.cols];
                for (o, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        axpy(dv, a, &mut gw.data[o * w.cols..(o + 1) * w.cols]);
                        gb[o] += dv;
                    }
                }
            }
            let mut next = vec![0.0; n * w.cols];
            for s in 0..n {
                let d = &delta[s * w.rows..(s + 1) * w.rows];
                let out = &mut next[s * w.cols..(s + 1) * w.cols];
                for (o, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        axpy(dv, w.row(o), out);
                    }
                }
            }
            if l > 0 {
                let z = &cache.pre[l - 1];
                let y = &cache.post[l - 1];
                for (k, v) in next.iter_mut().enumerate() {
                    *v *= self.activation.grad(z[k], y[k]);
                }
            }
            delta = next;
        }
        Ok((tape, delta))
    }

    /// Product of per-layer spectral norms (exact for `iters` large enough);
    /// a global Lipschitz bound for 1-Lipschitz activations.
    pub fn lipschitz_bound(&self, iters: usize) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(l, w)| super::spectral::spectral_norm(w, iters, l as u64))
            .product()
    }
}
