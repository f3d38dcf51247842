//! Goal-conditioned policies trained by weighted imitation of relabeled and
//! augmented samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedSample, Augmenter, Provenance};
use crate::data::sample_relabeled;
use crate::env::{Action, Goal, MazeKind, MazeSpec, Move, State};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Adam, AdamConfig, GradientTape, Mlp};

/// Fixed variance of the Gaussian action likelihood.
pub const ACTION_VARIANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    Discount { gamma: f64 },
}

impl WeightScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::Discount { gamma } if !(gamma > 0.0 && gamma < 1.0) => {
                Err(Error::Config(format!("discount gamma must be in (0, 1), got {gamma}")))
            }
            _ => Ok(()),
        }
    }

    /// Weight of relabel index `i` for a sample at time `t`.
    pub fn weight(&self, t: usize, i: usize) -> Result<f64> {
        if i < t {
            return Err(Error::Precondition(format!("relabel index {i} precedes sample time {t}")));
        }
        Ok(self.weight_for_horizon(i - t))
    }

    pub fn weight_for_horizon(&self, h: usize) -> f64 {
        match *self {
            WeightScheme::Uniform => 1.0,
            WeightScheme::Discount { gamma } => gamma.powi(h.min(i32::MAX as usize) as i32),
        }
    }

    pub fn parse(s: &str, gamma: f64) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "discount" => Ok(WeightScheme::Discount { gamma }),
            other => Err(Error::Config(format!("unknown weight scheme {other:?}"))),
        }
    }
}

/// Input encoding: state features followed by goal features. Positions and
/// goals are centred on the maze and scaled by its larger side, velocities
/// by the speed limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFeatures {
    pub kind: MazeKind,
    pub center: [f64; 2],
    pub scale: f64,
    pub v_max: f64,
}

impl PolicyFeatures {
    pub fn for_maze(spec: &MazeSpec) -> Self {
        let (w, h) = match spec.kind {
            MazeKind::Continuous => (spec.cols() as f64 * spec.cell_size, spec.rows() as f64 * spec.cell_size),
            MazeKind::Discrete => ((spec.cols() - 1) as f64, (spec.rows() - 1) as f64),
        };
        PolicyFeatures {
            kind: spec.kind,
            center: [w / 2.0, h / 2.0],
            scale: w.max(h) / 2.0,
            v_max: spec.v_max,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            MazeKind::Continuous => 6,
            MazeKind::Discrete => 4,
        }
    }

    pub fn push(&self, s: &State, g: &Goal, out: &mut Vec<f64>) {
        let p = crate::env::phi(s).0;
        let n = |v: f64, k: usize| (v - self.center[k]) / self.scale;
        out.push(n(p[0], 0));
        out.push(n(p[1], 1));
        if let State::Point { vel, .. } = s {
            out.push(vel[0] / self.v_max);
            out.push(vel[1] / self.v_max);
        }
        out.push(n(g.0[0], 0));
        out.push(n(g.0[1], 1));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub net: Mlp,
    pub features: PolicyFeatures,
}

impl Policy {
    pub fn new(spec: &MazeSpec, hidden: &[usize], seed: u64) -> Self {
        let features = PolicyFeatures::for_maze(spec);
        let out = match spec.kind {
            MazeKind::Continuous => 2,
            MazeKind::Discrete => Move::ALL.len(),
        };
        let mut dims = vec![features.dim()];
        dims.extend_from_slice(hidden);
        dims.push(out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Policy {
            net: Mlp::new(&dims, Activation::Tanh, &mut rng),
            features,
        }
    }

    pub fn kind(&self) -> MazeKind {
        self.features.kind
    }

    /// Raw network output: mean force or action logits.
    pub fn output(&self, s: &State, g: &Goal) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.features.dim());
        self.features.push(s, g, &mut x);
        self.net.forward(&x).expect("feature width matches network")
    }

    /// Greedy action: clamped mean, or the arg-max logit with ties going to
    /// the lowest index.
    pub fn act(&self, s: &State, g: &Goal) -> Action {
        action_from_output(self.kind(), &self.output(s, g))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let p: Policy = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if p.net.input_dim() != p.features.dim() || !p.net.is_finite() {
            return Err(Error::Config("policy checkpoint is inconsistent".into()));
        }
        Ok(p)
    }
}

pub fn action_from_output(kind: MazeKind, out: &[f64]) -> Action {
    match kind {
        MazeKind::Continuous => Action::force(out[0], out[1]),
        MazeKind::Discrete => {
            let mut best = 0;
            for k in 1..out.len() {
                if out[k] > out[best] {
                    best = k;
                }
            }
            Action::Move(Move::ALL[best])
        }
    }
}

/// Weighted negative log-likelihood, averaged over the batch, with exact
/// parameter gradients. Continuous actions use a fixed-variance Gaussian
/// (constants dropped); discrete actions use softmax cross-entropy.
pub fn gcwsl_loss(p: &Policy, batch: &[AugmentedSample], ws: &WeightScheme) -> Result<(f64, GradientTape)> {
    let weights: Vec<f64> = batch.iter().map(|s| ws.weight_for_horizon(s.horizon)).collect();
    weighted_nll(p, batch, &weights)
}

pub fn weighted_nll(p: &Policy, batch: &[AugmentedSample], weights: &[f64]) -> Result<(f64, GradientTape)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let n = batch.len();
    let mut x = Vec::with_capacity(n * p.features.dim());
    for s in batch {
        p.features.push(&s.base.state, &s.goal, &mut x);
    }
    let cache = p.net.forward_batch(&x, n)?;
    let out = cache.output();
    let od = p.net.output_dim();
    let mut up = vec![0.0; n * od];
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for (k, s) in batch.iter().enumerate() {
        let w = weights[k];
        let o = &out[k * od..(k + 1) * od];
        let g = &mut up[k * od..(k + 1) * od];
        match s.base.action {
            Action::Force(a) => {
                let mut sq = 0.0;
                for d in 0..2 {
                    let r = o[d] - a[d];
                    sq += r * r;
                    g[d] = inv * w * r / ACTION_VARIANCE;
                }
                loss += inv * w * sq / (2.0 * ACTION_VARIANCE);
            }
            Action::Move(m) => {
                let mx = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = o.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + z.ln();
                loss += inv * w * (lse - o[m.index()]);
                for d in 0..od {
                    let prob = (o[d] - lse).exp();
                    g[d] = inv * w * (prob - if d == m.index() { 1.0 } else { 0.0 });
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, p.net.backward(&cache, &up)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    /// Geometric tilt of the relabel index; uniform when absent.
    pub relabel_gamma: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 256,
            lr: 3e-4,
            hidden: vec![64, 64],
            relabel_gamma: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss on a fixed probe batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub augmented_fraction: f64,
}

const PROBE_BATCH: usize = 2048;

/// Runs the relabel, augment, update loop. Batches, augmentation and
/// initialisation draw from separate RNG streams, so a strategy that never
/// fires leaves training bit-identical to no augmentation.
pub fn train(aug: &Augmenter<'_>, ws: &WeightScheme, cfg: &TrainConfig) -> Result<(Policy, TrainLog)> {
    ws.validate()?;
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    let ds = aug.dataset();
    let mut policy = Policy::new(&ds.maze, &cfg.hidden, cfg.seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ aug.cfg.seed.rotate_left(17));
    aug_rng.set_stream(2);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    probe_rng.set_stream(3);

    let probe: Vec<AugmentedSample> = {
        let base = sample_relabeled(ds, PROBE_BATCH, cfg.relabel_gamma, &mut probe_rng);
        aug.augment_batch(&base, &mut probe_rng)
    };
    let initial_loss = gcwsl_loss(&policy, &probe, ws)?.0;
    let mut opt = Adam::new(&policy.net, AdamConfig::with_lr(cfg.lr));
    let mut n_aug = 0usize;
    for _ in 0..cfg.steps {
        let base = sample_relabeled(ds, cfg.batch, cfg.relabel_gamma, &mut batch_rng);
        let batch = aug.augment_batch(&base, &mut aug_rng);
        n_aug += batch.iter().filter(|s| s.provenance != Provenance::Original).count();
        let (_, tape) = gcwsl_loss(&policy, &batch, ws)?;
        opt.step(&mut policy.net, &tape)?;
    }
    let final_loss = gcwsl_loss(&policy, &probe, ws)?.0;
    let total = (cfg.steps * cfg.batch).max(1);
    Ok((
        policy,
        TrainLog {
            initial_loss,
            final_loss,
            augmented_fraction: n_aug as f64 / total as f64,
        },
    ))
}
