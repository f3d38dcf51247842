//! One-step residual dynamics model trained with per-sample slack weights
//! and spectral-norm projection, plus its prediction-bound certificate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Transition;
use crate::env::{phi, Action, Cell, MazeKind, MazeSpec, State};
use crate::error::{Error, Result};
use crate::numerics::{spectral_norm, Activation, Adam, AdamConfig, GradientTape, Mlp, SpectralProjector};
use crate::stats::percentile;

/// Power iterations used for the final certification pass.
const CERTIFY_ITERS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Slack-weighted loss with projection after every step.
    Lipschitz,
    /// Plain squared error, no slack and no projection.
    Plain,
}

pub const DEFAULT_ONE_HOT_SCALE: [f64; 2] = [1.0, 2.0];

/// Maps `(state, action)` to network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Featurizer {
    /// Standardized `(x, y, vx, vy, fx, fy)`.
    Continuous { mean: [f64; 6], std: [f64; 6] },
    /// Scaled one-hot cell followed by a scaled one-hot action.
    Discrete {
        cells: Vec<Cell>,
        cell_scale: f64,
        action_scale: f64,
    },
}

fn raw_point(s: &State, a: &Action) -> [f64; 6] {
    match (s, a) {
        (State::Point { pos, vel }, Action::Force(f)) => [pos[0], pos[1], vel[0], vel[1], f[0], f[1]],
        _ => panic!("continuous featurizer applied to {s:?}, {a:?}"),
    }
}

impl Featurizer {
    pub fn fit(spec: &MazeSpec, pairs: &[(State, Action)]) -> Self {
        Self::fit_scaled(spec, pairs, DEFAULT_ONE_HOT_SCALE)
    }

    /// Like `fit`, with `[cell, action]` multipliers for the one-hot blocks
    /// of a grid maze.
    pub fn fit_scaled(spec: &MazeSpec, pairs: &[(State, Action)], one_hot_scale: [f64; 2]) -> Self {
        match spec.kind {
            MazeKind::Continuous => {
                let n = pairs.len().max(1) as f64;
                let mut mean = [0.0; 6];
                let mut sq = [0.0; 6];
                for (s, a) in pairs {
                    let r = raw_point(s, a);
                    for k in 0..6 {
                        mean[k] += r[k] / n;
                    }
                }
                for (s, a) in pairs {
                    let r = raw_point(s, a);
                    for k in 0..6 {
                        sq[k] += (r[k] - mean[k]).powi(2) / n;
                    }
                }
                let std = sq.map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
                Featurizer::Continuous { mean, std }
            }
            MazeKind::Discrete => Featurizer::Discrete {
                cells: spec.free_cells(),
                cell_scale: one_hot_scale[0],
                action_scale: one_hot_scale[1],
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Featurizer::Continuous { .. } => 6,
            Featurizer::Discrete { cells, .. } => cells.len() + 5,
        }
    }

    pub fn push(&self, s: &State, a: &Action, out: &mut Vec<f64>) {
        match self {
            Featurizer::Continuous { mean, std } => {
                let r = raw_point(s, a);
                out.extend((0..6).map(|k| (r[k] - mean[k]) / std[k]));
            }
            Featurizer::Discrete {
                cells,
                cell_scale,
                action_scale,
            } => {
                let (State::Cell(c), Action::Move(m)) = (s, a) else {
                    panic!("discrete featurizer applied to {s:?}, {a:?}");
                };
                let start = out.len();
                out.resize(start + cells.len() + 5, 0.0);
                if let Some(k) = cells.iter().position(|x| x == c) {
                    out[start + k] = *cell_scale;
                }
                out[start + cells.len() + m.index()] = *action_scale;
            }
        }
    }

    pub fn features(&self, s: &State, a: &Action) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        self.push(s, a, &mut v);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub lambda: f64,
    pub alpha_slack: f64,
    pub epochs: usize,
    pub lr: f64,
    pub slack_lr: f64,
    pub batch: usize,
    pub hidden: Vec<usize>,
    /// Multipliers for the one-hot cell and action inputs on grid mazes.
    pub one_hot_scale: [f64; 2],
    pub mode: TrainMode,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            lambda: 1.0,
            alpha_slack: 0.1,
            epochs: 20,
            lr: 1e-3,
            slack_lr: 1.0,
            batch: 256,
            hidden: vec![64, 64],
            one_hot_scale: DEFAULT_ONE_HOT_SCALE,
            mode: TrainMode::Lipschitz,
            power_iters: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// 95th percentile of training residual norms.
    pub epsilon: f64,
    pub layer_norms: Vec<f64>,
    /// Mean full objective per epoch, measured before each epoch's updates
    /// (entry 0) and after every epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub net: Mlp,
    pub featurizer: Featurizer,
    pub lambda: f64,
    pub mode: TrainMode,
    pub report: TrainReport,
}

/// Per-tuple slack logits; `sigma(lambda_n)` weights tuple `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlackWeights {
    pub logits: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SlackWeights {
    pub fn sigma(&self) -> Vec<f64> {
        self.logits.iter().map(|l| sigmoid(*l)).collect()
    }
}

/// Goal-space displacement `g - phi(s)` of a transition.
pub fn target_displacement(t: &Transition) -> [f64; 2] {
    let g0 = phi(&t.state).0;
    [t.next_goal.0[0] - g0[0], t.next_goal.0[1] - g0[1]]
}

/// Batch objective `mean(w_n |y_n - f(x_n)|^2) - alpha mean(w_n)`, where
/// `w_n = sigma(slack_n)` in Lipschitz mode and 1 in plain mode. Returns
/// the loss, the parameter gradient and the gradient for each slack logit.
pub fn slack_objective(
    net: &Mlp,
    x: &[f64],
    targets: &[f64],
    slack: &[f64],
    alpha: f64,
    mode: TrainMode,
) -> Result<(f64, GradientTape, Vec<f64>)> {
    let n = slack.len();
    let out = net.output_dim();
    if targets.len() != n * out {
        return Err(Error::Dimension {
            expected: n * out,
            got: targets.len(),
        });
    }
    let cache = net.forward_batch(x, n)?;
    let pred = cache.output();
    let mut up = vec![0.0; n * out];
    let mut dslack = vec![0.0; n];
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for k in 0..n {
        let mut r2 = 0.0;
        for d in 0..out {
            let r = pred[k * out + d] - targets[k * out + d];
            r2 += r * r;
        }
        let (w, dw) = match mode {
            TrainMode::Lipschitz => {
                let s = sigmoid(slack[k]);
                (s, s * (1.0 - s))
            }
            TrainMode::Plain => (1.0, 0.0),
        };
        let penalty = if mode == TrainMode::Lipschitz { alpha } else { 0.0 };
        loss += inv * (w * r2 - penalty * w);
        dslack[k] = inv * dw * (r2 - penalty);
        for d in 0..out {
            up[k * out + d] = inv * 2.0 * w * (pred[k * out + d] - targets[k * out + d]);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let tape = net.backward(&cache, &up)?;
    Ok((loss, tape, dslack))
}

fn validate(cfg: &DynamicsConfig, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 transitions, got {n}")));
    }
    if !(cfg.lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    if cfg.mode == TrainMode::Lipschitz && !(cfg.alpha_slack > 0.0) {
        return Err(Error::Config(
            "alpha_slack must be positive: without it every slack weight collapses to zero".into(),
        ));
    }
    if cfg.batch == 0 || cfg.power_iters == 0 {
        return Err(Error::Config("batch and power_iters must be positive".into()));
    }
    Ok(())
}

/// Trains the residual model on logged transitions.
pub fn fit_dynamics(spec: &MazeSpec, tuples: &[Transition], cfg: &DynamicsConfig) -> Result<(DynamicsModel, SlackWeights)> {
    validate(cfg, tuples.len())?;
    let pairs: Vec<(State, Action)> = tuples.iter().map(|t| (t.state, t.action)).collect();
    let featurizer = Featurizer::fit_scaled(spec, &pairs, cfg.one_hot_scale);
    let d = featurizer.dim();
    let n = tuples.len();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n * 2);
    for t in tuples {
        featurizer.push(&t.state, &t.action, &mut x);
        y.extend_from_slice(&target_displacement(t));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![d];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(2);
    let mut net = Mlp::new(&dims, Activation::Relu, &mut rng);
    let mut projector = match cfg.mode {
        TrainMode::Lipschitz => {
            let mut p = SpectralProjector::new(&net, cfg.lambda, cfg.power_iters, rng.random())?;
            p.project(&mut net);
            Some(p)
        }
        TrainMode::Plain => None,
    };
    let mut opt = Adam::new(&net, AdamConfig::with_lr(cfg.lr));
    let mut slack = vec![0.0; n];

    let full_loss = |net: &Mlp, slack: &[f64]| -> Result<f64> {
        Ok(slack_objective(net, &x, &y, slack, cfg.alpha_slack, cfg.mode)?.0)
    };
    let mut history = vec![full_loss(&net, &slack)?];
    let mut last_finite = history[0];
    let mut order: Vec<usize> = (0..n).collect();
    let mut bx = Vec::with_capacity(cfg.batch * d);
    let mut by = Vec::with_capacity(cfg.batch * 2);
    let mut bs = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            bx.clear();
            by.clear();
            bs.clear();
            for &k in chunk {
                bx.extend_from_slice(&x[k * d..(k + 1) * d]);
                by.extend_from_slice(&y[k * 2..k * 2 + 2]);
                bs.push(slack[k]);
            }
            let (loss, tape, dslack) = match slack_objective(&net, &bx, &by, &bs, cfg.alpha_slack, cfg.mode) {
                Ok(v) => v,
                Err(Error::NonFiniteLoss) => {
                    return Err(Error::Divergence {
                        last_finite_loss: last_finite,
                    })
                }
                Err(e) => return Err(e),
            };
            last_finite = loss;
            opt.step(&mut net, &tape)?;
            if let Some(p) = projector.as_mut() {
                p.project(&mut net);
                // Per-sample SGD on the slack logits; dslack carries a 1/batch
                // factor that the step size undoes.
                let scale = cfg.slack_lr * chunk.len() as f64;
                for (j, &k) in chunk.iter().enumerate() {
                    slack[k] -= scale * dslack[j];
                }
            }
        }
        let l = match full_loss(&net, &slack) {
            Ok(l) => l,
            Err(Error::NonFiniteLoss) => {
                return Err(Error::Divergence {
                    last_finite_loss: last_finite,
                })
            }
            Err(e) => return Err(e),
        };
        last_finite = l;
        history.push(l);
    }

    let layer_norms = match cfg.mode {
        TrainMode::Lipschitz => {
            let mut p = SpectralProjector::new(&net, cfg.lambda, CERTIFY_ITERS, cfg.seed ^ 0x5eed)?;
            p.project(&mut net);
            p.norms(&net)
        }
        TrainMode::Plain => net
            .weights()
            .iter()
            .map(|w| spectral_norm(w, CERTIFY_ITERS, 7))
            .collect(),
    };
    let mut model = DynamicsModel {
        net,
        featurizer,
        lambda: cfg.lambda,
        mode: cfg.mode,
        report: TrainReport {
            epsilon: 0.0,
            layer_norms,
            loss_history: history,
        },
    };
    model.report.epsilon = percentile(&model.residuals(tuples), 0.95);
    Ok((model, SlackWeights { logits: slack }))
}

impl DynamicsModel {
    /// A model whose network is all zeros.
    pub fn zeros(featurizer: Featurizer, hidden: &[usize], lambda: f64) -> Self {
        let mut dims = vec![featurizer.dim()];
        dims.extend_from_slice(hidden);
        dims.push(2);
        DynamicsModel {
            net: Mlp::zeros(&dims, Activation::Relu),
            featurizer,
            lambda,
            mode: TrainMode::Lipschitz,
            report: TrainReport {
                epsilon: 0.0,
                layer_norms: vec![0.0; hidden.len() + 1],
                loss_history: Vec::new(),
            },
        }
    }

    pub fn predict_displacement(&self, s: &State, a: &Action) -> [f64; 2] {
        let x = self.featurizer.features(s, a);
        let y = self.net.forward(&x).expect("featurizer matches network input");
        [y[0], y[1]]
    }

    /// Batched predictions for many `(state, action)` pairs.
    pub fn predict_many(&self, pairs: &[(State, Action)]) -> Vec<[f64; 2]> {
        pairs
            .par_chunks(4096)
            .flat_map_iter(|chunk| {
                let mut x = Vec::with_capacity(chunk.len() * self.featurizer.dim());
                for (s, a) in chunk {
                    self.featurizer.push(s, a, &mut x);
                }
                let c = self.net.forward_batch(&x, chunk.len()).expect("shapes match");
                c.output().chunks(2).map(|v| [v[0], v[1]]).collect::<Vec<_>>()
            })
            .collect()
    }

    /// Residual norms `|g - phi(s) - f(s, a)|` over transitions.
    pub fn residuals(&self, tuples: &[Transition]) -> Vec<f64> {
        let pairs: Vec<(State, Action)> = tuples.iter().map(|t| (t.state, t.action)).collect();
        let pred = self.predict_many(&pairs);
        tuples
            .iter()
            .zip(pred)
            .map(|(t, p)| {
                let y = target_displacement(t);
                ((y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2)).sqrt()
            })
            .collect()
    }

    /// Product of the per-layer spectral norms: a global Lipschitz bound in
    /// feature space.
    pub fn certificate_bound(&self) -> f64 {
        self.report.layer_norms.iter().product()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let m: DynamicsModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if !m.net.is_finite() || m.net.input_dim() != m.featurizer.dim() {
            return Err(Error::Config("checkpoint network does not match its featurizer".into()));
        }
        Ok(m)
    }
}

/// Empirical local Lipschitz constant of the model in state coordinates:
/// the largest finite-difference slope over `n_dirs` random perturbations of
/// length `radius` per probe (continuous), or over all grid neighbours
/// within `radius` (discrete). Actions are held fixed.
pub fn estimate_local_lipschitz(
    m: &DynamicsModel,
    spec: &MazeSpec,
    probes: &[(State, Action)],
    radius: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("radius must be positive, got {radius}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut dists = Vec::new();
    for (s, a) in probes {
        match s {
            State::Point { pos, vel } => {
                for _ in 0..n_dirs.max(1) {
                    let mut dir: [f64; 4] = std::array::from_fn(|_| {
                        let u: f64 = rng.random_range(-1.0..1.0);
                        u
                    });
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    dir.iter_mut().for_each(|v| *v *= radius / norm);
                    let s2 = State::Point {
                        pos: [pos[0] + dir[0], pos[1] + dir[1]],
                        vel: [vel[0] + dir[2], vel[1] + dir[3]],
                    };
                    pairs.push((*s, *a));
                    pairs.push((s2, *a));
                    dists.push(radius);
                }
            }
            State::Cell(c) => {
                let r = radius.floor() as isize;
                for dj in -r..=r {
                    for di in -r..=r {
                        let d = ((di * di + dj * dj) as f64).sqrt();
                        if d == 0.0 || d > radius {
                            continue;
                        }
                        let (i, j) = (c.i as isize + di, c.j as isize + dj);
                        if i < 0 || j < 0 {
                            continue;
                        }
                        let c2 = Cell::new(i as usize, j as usize);
                        if spec.is_free(c2) {
                            pairs.push((*s, *a));
                            pairs.push((State::Cell(c2), *a));
                            dists.push(d);
                        }
                    }
                }
            }
        }
    }
    let pred = m.predict_many(&pairs);
    let mut best: f64 = 0.0;
    for (k, d) in dists.iter().enumerate() {
        let (p, q) = (pred[2 * k], pred[2 * k + 1]);
        let gap = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        best = best.max(gap / d);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCertificate {
    pub epsilon: f64,
    pub k_env: f64,
    pub delta: f64,
    pub bound_violation_rate: f64,
    pub n_probes: usize,
    pub layer_norms: Vec<f64>,
}

/// Checks `|f(s,a) - f_hat(s,a)| <= eps + (K + Delta) |phi(s) - g|` on
/// held-out transitions, with the true residual recomputed by `spec.step`.
/// `delta` is measured on the held-out pairs with `radius`.
pub fn verify_theorem1(
    m: &DynamicsModel,
    spec: &MazeSpec,
    held_out: &[Transition],
    k_env: f64,
    radius: f64,
    seed: u64,
) -> Result<LipschitzCertificate> {
    if held_out.is_empty() {
        return Err(Error::Precondition("held-out set is empty".into()));
    }
    let pairs: Vec<(State, Action)> = held_out.iter().map(|t| (t.state, t.action)).collect();
    let delta = estimate_local_lipschitz(m, spec, &pairs, radius, 32, seed)?;
    let pred = m.predict_many(&pairs);
    let eps = m.report.epsilon;
    let mut violations = 0usize;
    for (t, p) in held_out.iter().zip(&pred) {
        let next = spec.step(&t.state, &t.action)?;
        let g0 = phi(&t.state);
        let truth = phi(&next);
        let f = [truth.0[0] - g0.0[0], truth.0[1] - g0.0[1]];
        let lhs = ((f[0] - p[0]).powi(2) + (f[1] - p[1]).powi(2)).sqrt();
        let rhs = eps + (k_env + delta) * g0.dist(&t.next_goal);
        if lhs > rhs {
            violations += 1;
        }
    }
    Ok(LipschitzCertificate {
        epsilon: eps,
        k_env,
        delta,
        bound_violation_rate: violations as f64 / held_out.len() as f64,
        n_probes: held_out.len(),
        layer_norms: m.report.layer_norms.clone(),
    })
}

/// Splits transitions by trajectory: every `holdout_every`-th trajectory is
/// held out, so the two sets never share a trajectory.
pub fn split_by_trajectory(tuples: &[Transition], holdout_every: usize) -> (Vec<Transition>, Vec<Transition>) {
    let every = holdout_every.max(2);
    tuples.iter().partition(|t| t.traj % every != every - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect, default_legs, transition_tuples, CollectConfig};

    #[test]
    fn alpha_zero_is_rejected() {
        let spec = MazeSpec::bundled("umaze", MazeKind::Continuous).unwrap();
        let ds = collect(
            &spec,
            &default_legs(&spec).unwrap(),
            &CollectConfig {
                n_traj: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = DynamicsConfig {
            alpha_slack: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            fit_dynamics(&spec, &transition_tuples(&ds), &cfg),
            Err(Error::Config(_))
        ));
        let plain = DynamicsConfig {
            alpha_slack: 0.0,
            mode: TrainMode::Plain,
            epochs: 1,
            ..Default::default()
        };
        assert!(fit_dynamics(&spec, &transition_tuples(&ds), &plain).is_ok());
    }

    #[test]
    fn zero_model_predicts_zero() {
        let spec = MazeSpec::bundled("grid5", MazeKind::Discrete).unwrap();
        let f = Featurizer::fit(&spec, &[]);
        let m = DynamicsModel::zeros(f, &[8], 1.0);
        let s = State::Cell(Cell::new(2, 2));
        let a = Action::Move(crate::env::Move::Left);
        assert_eq!(m.predict_displacement(&s, &a), [0.0, 0.0]);
        assert_eq!(estimate_local_lipschitz(&m, &spec, &[(s, a)], 1.0, 32, 0).unwrap(), 0.0);
    }

    #[test]
    fn discrete_features_are_one_hot() {
        let spec = MazeSpec::bundled("room5", MazeKind::Discrete).unwrap();
        let f = Featurizer::fit(&spec, &[]);
        let v = f.features(&State::Cell(Cell::new(2, 1)), &Action::Move(crate::env::Move::Down));
        assert_eq!(v.len(), 9 + 5);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[9 + 1], 2.0);
        assert_eq!(v.iter().sum::<f64>(), 3.0);
    }
}
