use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mlp::{dot, Matrix, Mlp};
use crate::error::{Error, Result};

/// Iterations used when no warm start is available.
pub const DEFAULT_POWER_ITERS: usize = 50;

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Power iteration on `W^T W` with a persistent right singular vector.
#[derive(Clone, Debug)]
pub struct PowerIteration {
    v: Vec<f64>,
    rng: ChaCha8Rng,
}

impl PowerIteration {
    pub fn new(cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        if normalize(&mut v) == 0.0 && cols > 0 {
            v[0] = 1.0;
        }
        PowerIteration { v, rng }
    }

    /// Largest singular value estimate after `iters` more iterations.
    pub fn estimate(&mut self, w: &Matrix, iters: usize) -> f64 {
        if w.data.iter().all(|x| *x == 0.0) {
            return 0.0;
        }
        if self.v.len() != w.cols {
            *self = PowerIteration::new(w.cols, self.rng.random());
        }
        for _ in 0..iters.max(1) {
            let u = w.matvec(&self.v);
            let mut next = w.matvec_t(&u);
            if normalize(&mut next) == 0.0 {
                // The current vector fell into the null space; restart.
                next = (0..w.cols).map(|_| self.rng.random_range(-1.0..1.0)).collect();
                normalize(&mut next);
            }
            self.v = next;
        }
        let u = w.matvec(&self.v);
        dot(&u, &u).sqrt()
    }
}

/// Power-iteration estimate of `||W||_2`; zero matrices give 0.
pub fn spectral_norm(w: &Matrix, iters: usize, seed: u64) -> f64 {
    PowerIteration::new(w.cols, seed).estimate(w, iters)
}

/// Per-layer projection onto the ball `||W_l||_2 <= lambda`, keeping warm
/// power-iteration vectors between calls.
#[derive(Clone, Debug)]
pub struct SpectralProjector {
    pub lambda: f64,
    pub iters: usize,
    states: Vec<PowerIteration>,
}

impl SpectralProjector {
    pub fn new(net: &Mlp, lambda: f64, iters: usize, seed: u64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("projection radius must be positive, got {lambda}")));
        }
        let states = net
            .weights()
            .iter()
            .enumerate()
            .map(|(l, w)| PowerIteration::new(w.cols, seed.wrapping_add(l as u64)))
            .collect();
        Ok(SpectralProjector {
            lambda,
            iters,
            states,
        })
    }

    /// Rescales every weight matrix by `1 / max(sigma / lambda, 1)` and
    /// returns the per-layer norms measured before rescaling.
    pub fn project(&mut self, net: &mut Mlp) -> Vec<f64> {
        let mut norms = Vec::with_capacity(net.num_layers());
        for (w, st) in net.weights_mut().iter_mut().zip(&mut self.states) {
            let sigma = st.estimate(w, self.iters);
            let scale = (sigma / self.lambda).max(1.0);
            if scale > 1.0 {
                w.scale(1.0 / scale);
            }
            norms.push(sigma);
        }
        norms
    }

    pub fn norms(&mut self, net: &Mlp) -> Vec<f64> {
        net.weights()
            .iter()
            .zip(&mut self.states)
            .map(|(w, st)| st.estimate(w, self.iters))
            .collect()
    }
}

/// Returns a copy of `net` with each weight matrix projected onto the
/// spectral ball of radius `lambda`; biases are untouched.
pub fn project_weights(net: &Mlp, lambda: f64) -> Result<Mlp> {
    let mut out = net.clone();
    SpectralProjector::new(net, lambda, DEFAULT_POWER_ITERS, 0)?.project(&mut out);
    Ok(out)
}
