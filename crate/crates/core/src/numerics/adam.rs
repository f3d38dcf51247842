use serde::{Deserialize, Serialize};

use super::mlp::{GradientTape, Mlp};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: GradientTape,
    v: GradientTape,
}

impl Adam {
    pub fn new(net: &Mlp, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: GradientTape::zeros_like(net),
            v: GradientTape::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. The network is untouched if any gradient entry
    /// is non-finite.
    pub fn step(&mut self, net: &mut Mlp, grad: &GradientTape) -> Result<()> {
        if !grad.matches(net) {
            return Err(Error::Config("gradient tape does not match network shape".into()));
        }
        for (l, (w, b)) in grad.weights.iter().zip(&grad.biases).enumerate() {
            if !w.data.iter().chain(b.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: l });
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for l in 0..net.num_layers() {
            update(
                &mut net.weights_mut()[l].data,
                &grad.weights[l].data,
                &mut self.m.weights[l].data,
                &mut self.v.weights[l].data,
                c,
                bc1,
                bc2,
            );
            update(
                &mut net.biases_mut()[l],
                &grad.biases[l],
                &mut self.m.biases[l],
                &mut self.v.biases[l],
                c,
                bc1,
                bc2,
            );
        }
        Ok(())
    }
}

fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], c: AdamConfig, bc1: f64, bc2: f64) {
    for k in 0..p.len() {
        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
        let mh = m[k] / bc1;
        let vh = v[k] / bc2;
        p[k] -= c.lr * mh / (vh.sqrt() + c.eps);
    }
}

/// Adam over a flat parameter vector, used for free scalars such as slack
/// variables and for toy problems.
#[derive(Clone, Debug)]
pub struct FlatAdam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl FlatAdam {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        FlatAdam {
            cfg,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: 0 });
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        update(params, grad, &mut self.m, &mut self.v, self.cfg, bc1, bc2);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::{Activation, Matrix};

    #[test]
    fn zero_gradient_is_a_no_op() {
        let w = Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let mut net = Mlp::from_parts(vec![w], vec![vec![0.25]], Activation::Relu).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let g = GradientTape::zeros_like(&net);
        for _ in 0..5 {
            opt.step(&mut net, &g).unwrap();
        }
        assert_eq!(net, before);
    }

    #[test]
    fn scalar_descent_direction() {
        let mut w = [1.0];
        let mut opt = FlatAdam::new(1, AdamConfig::with_lr(0.1));
        opt.step(&mut w, &[1.0]).unwrap();
        assert!(w[0] < 1.0);
        assert!((w[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut net = Mlp::zeros(&[2, 3, 1], Activation::Relu);
        let mut opt = Adam::new(&net, AdamConfig::default());
        let mut g = GradientTape::zeros_like(&net);
        g.biases[1][0] = f64::NAN;
        let before = net.clone();
        assert!(matches!(opt.step(&mut net, &g), Err(Error::NonFiniteGradient { layer: 1 })));
        assert_eq!(net, before);
    }

    #[test]
    fn least_squares_toy_converges() {
        // Fit y = 2 x0 - x1 + 0.5 with a single linear layer.
        let xs: Vec<[f64; 2]> = (0..16)
            .map(|k| [(k as f64 * 0.7).sin(), (k as f64 * 1.3).cos()])
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0] - x[1] + 0.5).collect();
        let mut net = Mlp::zeros(&[2, 1], Activation::Relu);
        let mut opt = Adam::new(&net, AdamConfig::with_lr(0.05));
        let flat: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let loss = |net: &Mlp| -> (f64, Vec<f64>) {
            let c = net.forward_batch(&flat, xs.len()).unwrap();
            let r: Vec<f64> = c.output().iter().zip(&ys).map(|(p, y)| p - y).collect();
            let l = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
            (l, r)
        };
        for _ in 0..200 {
            let c = net.forward_batch(&flat, xs.len()).unwrap();
            let up: Vec<f64> = c
                .output()
                .iter()
                .zip(&ys)
                .map(|(p, y)| 2.0 * (p - y) / xs.len() as f64)
                .collect();
            let g = net.backward(&c, &up).unwrap();
            opt.step(&mut net, &g).unwrap();
        }
        assert!(loss(&net).0 < 1e-3, "loss {}", loss(&net).0);
    }
}
