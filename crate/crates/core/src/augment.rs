//! Goal augmentation strategies and the ground-truth principle audit.
//!
//! All strategies replace only the goal of a relabeled sample. SGDA swaps in
//! a goal from another trajectory, TGDA takes a later goal from a random
//! state in the same goal cluster, and MGDA additionally requires that the
//! dynamics model maps the candidate state onto the original goal in one
//! step.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterIndex;
use crate::data::{truncated_geometric, OfflineDataset, RelabeledSample};
use crate::dynmodel::DynamicsModel;
use crate::env::{phi, Action, Cell, Goal, MazeKind, MazeSpec, State};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Sgda,
    Tgda,
    Mgda,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Sgda, Strategy::Tgda, Strategy::Mgda];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "sgda" => Ok(Strategy::Sgda),
            "tgda" => Ok(Strategy::Tgda),
            "mgda" => Ok(Strategy::Mgda),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Sgda => "sgda",
            Strategy::Tgda => "tgda",
            Strategy::Mgda => "mgda",
        })
    }
}

/// Which displacement MGDA adds to a candidate before comparing with the
/// goal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReachCheck {
    /// Prediction at the candidate state with its own logged action.
    CandidateAction,
    /// Prediction at the sample's state and action.
    LiteralAlg1,
    /// Accept every non-terminal candidate.
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub strategy: Strategy,
    pub eps_prob: f64,
    pub delta: f64,
    pub reach_check: ReachCheck,
    pub retries: usize,
    /// Geometric tilt for the later-goal draw; uniform when absent.
    pub later_gamma: Option<f64>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            strategy: Strategy::None,
            eps_prob: 0.5,
            delta: 0.5,
            reach_check: ReachCheck::CandidateAction,
            retries: 8,
            later_gamma: None,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps_prob) {
            return Err(Error::Config(format!("eps_prob must be in [0, 1], got {}", self.eps_prob)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.retries == 0 {
            return Err(Error::Config("retries must be at least 1".into()));
        }
        if let Some(g) = self.later_gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("later_gamma must be in (0, 1), got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Sgda,
    Tgda,
    Mgda,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentedSample {
    pub base: RelabeledSample,
    pub goal: Goal,
    pub provenance: Provenance,
    /// Candidate state `(traj, t)` used by TGDA or MGDA.
    pub nearby: Option<(usize, usize)>,
    /// Dataset state `(traj, t)` the goal was read from.
    pub source: (usize, usize),
    /// Step count from the sample to its goal along the stitched path, used
    /// by discounted weights.
    pub horizon: usize,
}

impl AugmentedSample {
    pub fn original(base: RelabeledSample) -> Self {
        AugmentedSample {
            base,
            goal: base.goal,
            provenance: Provenance::Original,
            nearby: None,
            source: (base.traj, base.i),
            horizon: base.i - base.t,
        }
    }

    pub fn state(&self) -> &State {
        &self.base.state
    }

    pub fn action(&self) -> &Action {
        &self.base.action
    }
}

/// Applies one strategy with cached model predictions for every
/// non-terminal dataset state.
pub struct Augmenter<'a> {
    ds: &'a OfflineDataset,
    index: Option<&'a ClusterIndex>,
    model: Option<&'a DynamicsModel>,
    pub cfg: AugmentConfig,
    state_offsets: Vec<usize>,
    predictions: Vec<[f64; 2]>,
}

impl<'a> Augmenter<'a> {
    pub fn new(
        ds: &'a OfflineDataset,
        index: Option<&'a ClusterIndex>,
        model: Option<&'a DynamicsModel>,
        cfg: AugmentConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        match cfg.strategy {
            Strategy::Tgda if index.is_none() => {
                return Err(Error::Config("tgda needs a cluster index; run cluster first".into()))
            }
            Strategy::Mgda if index.is_none() => {
                return Err(Error::Config("mgda needs a cluster index; run cluster first".into()))
            }
            Strategy::Mgda if model.is_none() => {
                return Err(Error::Config("mgda needs a dynamics model; run fit-dynamics first".into()))
            }
            _ => {}
        }
        let mut state_offsets = Vec::with_capacity(ds.len());
        let mut acc = 0;
        for tr in &ds.trajectories {
            state_offsets.push(acc);
            acc += tr.states.len();
        }
        let mut predictions = Vec::new();
        if cfg.strategy == Strategy::Mgda && cfg.reach_check == ReachCheck::CandidateAction {
            let m = model.expect("checked above");
            let mut pairs = Vec::with_capacity(acc);
            for tr in &ds.trajectories {
                for t in 0..tr.states.len() {
                    // Terminal states reuse the last action; `accepts`
                    // rejects them before reading the prediction.
                    let a = match (tr.actions.get(t).or(tr.actions.last()), tr.states[t]) {
                        (Some(a), _) => *a,
                        (None, State::Point { .. }) => Action::Force([0.0, 0.0]),
                        (None, State::Cell(_)) => Action::Move(crate::env::Move::Stay),
                    };
                    pairs.push((tr.states[t], a));
                }
            }
            predictions = m.predict_many(&pairs);
        }
        Ok(Augmenter {
            ds,
            index,
            model,
            cfg,
            state_offsets,
            predictions,
        })
    }

    pub fn dataset(&self) -> &OfflineDataset {
        self.ds
    }

    fn later<R: Rng + ?Sized>(&self, traj: usize, t: usize, rng: &mut R) -> usize {
        let last = self.ds.trajectories[traj].len();
        match self.cfg.later_gamma {
            None => rng.random_range(t + 1..=last),
            Some(g) => t + truncated_geometric(rng, g, 1, last - t),
        }
    }

    pub fn augment<R: Rng + ?Sized>(&self, s: &RelabeledSample, rng: &mut R) -> AugmentedSample {
        let orig = AugmentedSample::original(*s);
        if self.cfg.strategy == Strategy::None || rng.random::<f64>() >= self.cfg.eps_prob {
            return orig;
        }
        match self.cfg.strategy {
            Strategy::None => orig,
            Strategy::Sgda => self.sgda(s, rng).unwrap_or(orig),
            Strategy::Tgda => self.tgda(s, rng).unwrap_or(orig),
            Strategy::Mgda => self.mgda(s, rng).unwrap_or(orig),
        }
    }

    pub fn augment_batch<R: Rng + ?Sized>(&self, batch: &[RelabeledSample], rng: &mut R) -> Vec<AugmentedSample> {
        batch.iter().map(|s| self.augment(s, rng)).collect()
    }

    fn sgda<R: Rng + ?Sized>(&self, s: &RelabeledSample, rng: &mut R) -> Option<AugmentedSample> {
        let n = self.ds.len();
        if n < 2 {
            return None;
        }
        let mut other = rng.random_range(0..n - 1);
        if other >= s.traj {
            other += 1;
        }
        let tr = &self.ds.trajectories[other];
        let j = rng.random_range(0..tr.states.len());
        Some(AugmentedSample {
            base: *s,
            goal: tr.goal_at(j),
            provenance: Provenance::Sgda,
            nearby: None,
            source: (other, j),
            horizon: s.i - s.t,
        })
    }

    fn tgda<R: Rng + ?Sized>(&self, s: &RelabeledSample, rng: &mut R) -> Option<AugmentedSample> {
        let ci = self.index?;
        let members = ci.members(ci.assign(&s.goal));
        if members.is_empty() {
            return None;
        }
        let (traj, t) = members[rng.random_range(0..members.len())];
        let tr = &self.ds.trajectories[traj];
        let j = if t >= tr.len() { t } else { self.later(traj, t, rng) };
        Some(AugmentedSample {
            base: *s,
            goal: tr.goal_at(j),
            provenance: Provenance::Tgda,
            nearby: Some((traj, t)),
            source: (traj, j),
            horizon: (s.i - s.t) + (j - t),
        })
    }

    /// Whether MGDA accepts dataset state `(traj, t)` as a one-step
    /// predecessor of `goal` for the given sample.
    pub fn accepts(&self, s: &RelabeledSample, goal: &Goal, traj: usize, t: usize) -> bool {
        let tr = &self.ds.trajectories[traj];
        if t >= tr.len() {
            return false;
        }
        let d = match self.cfg.reach_check {
            ReachCheck::Disabled => return true,
            ReachCheck::CandidateAction => self.predictions[self.state_offsets[traj] + t],
            ReachCheck::LiteralAlg1 => match self.model {
                Some(m) => m.predict_displacement(&s.state, &s.action),
                None => return false,
            },
        };
        let u = phi(&tr.states[t]);
        let rx = goal.0[0] - u.0[0] - d[0];
        let ry = goal.0[1] - u.0[1] - d[1];
        (rx * rx + ry * ry).sqrt() < self.cfg.delta
    }

    fn mgda<R: Rng + ?Sized>(&self, s: &RelabeledSample, rng: &mut R) -> Option<AugmentedSample> {
        let ci = self.index?;
        let members = ci.members(ci.assign(&s.goal));
        if members.is_empty() {
            return None;
        }
        for _ in 0..self.cfg.retries {
            let (traj, t) = members[rng.random_range(0..members.len())];
            if !self.accepts(s, &s.goal, traj, t) {
                continue;
            }
            let j = self.later(traj, t, rng);
            return Some(AugmentedSample {
                base: *s,
                goal: self.ds.trajectories[traj].goal_at(j),
                provenance: Provenance::Mgda,
                nearby: Some((traj, t)),
                source: (traj, j),
                horizon: (s.i - s.t) + (j - t - 1),
            });
        }
        None
    }
}

/// Scores of one strategy against the three augmentation principles.
/// Metrics are `None` when no augmented sample was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipleReport {
    pub strategy: Strategy,
    pub n_draws: usize,
    pub n_augmented: usize,
    pub diversity: Option<f64>,
    pub optimality: Option<f64>,
    pub reachability: Option<f64>,
}

/// Table thresholds: Diversity > 0, Optimality >= 0.9, Reachability >= 0.95.
pub const OPTIMALITY_THRESHOLD: f64 = 0.9;
pub const REACHABILITY_THRESHOLD: f64 = 0.95;

impl PrincipleReport {
    /// Pass marks for Diversity, Optimality and Reachability.
    pub fn marks(&self) -> [bool; 3] {
        [
            self.diversity.is_some_and(|d| d > 0.0),
            self.optimality.is_some_and(|o| o >= OPTIMALITY_THRESHOLD),
            self.reachability.is_some_and(|r| r >= REACHABILITY_THRESHOLD),
        ]
    }

    pub fn csv_header() -> &'static str {
        "strategy,n_draws,n_augmented,diversity,optimality,reachability"
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.4}"));
        format!(
            "{},{},{},{},{},{}",
            self.strategy,
            self.n_draws,
            self.n_augmented,
            f(self.diversity),
            f(self.optimality),
            f(self.reachability)
        )
    }
}

/// Audits augmented samples with exact grid oracles. Optimality is scored
/// on reachable goals only: the logged action must decrease the shortest
/// path length by one, or keep the walker in place when it already sits on
/// the goal.
pub fn audit_principles<R: Rng + ?Sized>(
    aug: &Augmenter<'_>,
    spec: &MazeSpec,
    n_draws: usize,
    rng: &mut R,
) -> Result<PrincipleReport> {
    if spec.kind != MazeKind::Discrete {
        return Err(Error::Unsupported("the principle audit needs a discrete maze".into()));
    }
    let sp = spec.shortest_paths();
    let ds = aug.dataset();
    let mut n_aug = 0usize;
    let mut reachable = 0usize;
    let mut optimal = 0usize;
    let mut by_state: HashMap<Cell, (HashSet<(u64, u64)>, HashSet<usize>)> = HashMap::new();
    let budget = n_draws.saturating_mul(50).max(1);
    let mut attempts = 0;
    while n_aug < n_draws && attempts < budget && aug.cfg.strategy != Strategy::None {
        attempts += 1;
        let base = crate::data::sample_relabeled(ds, 1, None, rng)[0];
        let a = aug.augment(&base, rng);
        if a.provenance == Provenance::Original {
            continue;
        }
        n_aug += 1;
        let (State::Cell(c), Action::Move(m)) = (a.base.state, a.base.action) else {
            return Err(Error::Unsupported("non-grid sample in a discrete audit".into()));
        };
        let g = spec
            .goal_cell(&a.goal)
            .ok_or_else(|| Error::Precondition("augmented goal outside the grid".into()))?;
        if let Some(d) = sp.dist(c, g) {
            reachable += 1;
            let next = spec.shift(c, m);
            let ok = if d == 0 { next == c } else { sp.dist(next, g) == Some(d - 1) };
            if ok {
                optimal += 1;
            }
        }
        let e = by_state.entry(c).or_default();
        e.0.insert((a.goal.0[0].to_bits(), a.goal.0[1].to_bits()));
        e.1.insert(a.source.0);
    }
    let ratio = |k: usize, n: usize| (n > 0).then(|| k as f64 / n as f64);
    let diverse = by_state
        .values()
        .filter(|(goals, trajs)| goals.len() >= 2 && trajs.len() >= 2)
        .count();
    Ok(PrincipleReport {
        strategy: aug.cfg.strategy,
        n_draws,
        n_augmented: n_aug,
        diversity: ratio(diverse, by_state.len()),
        optimality: ratio(optimal, reachable),
        reachability: ratio(reachable, n_aug),
    })
}
