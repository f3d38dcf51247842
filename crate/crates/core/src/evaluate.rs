//! Rollout evaluation with bootstrap intervals, exact discounted occupancies
//! on grids, and the Monte-Carlo check of MGDA's goal distribution against
//! the composed one-step oracle.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Augmenter, Provenance, ReachCheck, Strategy};
use crate::cluster::ClusterIndex;
use crate::data::{collect_tabular, OfflineDataset, RelabeledSample, TabularPolicy};
use crate::dynmodel::DynamicsModel;
use crate::env::{phi, reward, Action, Cell, Goal, MazeKind, MazeSpec, Move, State};
use crate::error::{Error, Result};
use crate::policy::Policy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    InDistribution,
    Stitching,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPair {
    pub start: State,
    pub goal: Goal,
    pub kind: PairKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_episodes: usize,
    pub outcomes: Vec<bool>,
    /// Steps to first success, per pair.
    pub steps: Vec<Option<usize>>,
}

/// Percentile bootstrap interval for the mean of `xs`.
pub fn bootstrap_ci(xs: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    let m = xs.iter().sum::<f64>() / n as f64;
    (
        crate::stats::percentile_sorted(&means, a).min(m),
        crate::stats::percentile_sorted(&means, 1.0 - a).max(m),
    )
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Rolls out `act` from every pair for at most `t_max` steps; success means
/// the goal reward fires at some visited state, including the start.
pub fn rollout_success(
    p: &Policy,
    spec: &MazeSpec,
    pairs: &[EvalPair],
    t_max: usize,
    delta: f64,
    seed: u64,
) -> Result<EvalReport> {
    let steps: Vec<Option<usize>> = pairs
        .par_iter()
        .map(|pair| -> Result<Option<usize>> {
            let mut s = pair.start;
            for t in 0..=t_max {
                if reward(&s, &pair.goal, delta) == 1 {
                    return Ok(Some(t));
                }
                if t == t_max {
                    break;
                }
                s = spec.step(&s, &p.act(&s, &pair.goal))?;
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<bool> = steps.iter().map(Option::is_some).collect();
    let xs: Vec<f64> = outcomes.iter().map(|o| f64::from(u8::from(*o))).collect();
    let rate = if xs.is_empty() { 0.0 } else { crate::stats::mean(&xs) };
    let (ci_low, ci_high) = if xs.is_empty() {
        (0.0, 0.0)
    } else {
        bootstrap_ci(&xs, BOOTSTRAP_RESAMPLES, 0.95, seed)
    };
    Ok(EvalReport {
        success_rate: rate,
        ci_low,
        ci_high,
        n_episodes: pairs.len(),
        outcomes,
        steps,
    })
}

/// Default rollout budget by layout.
pub fn default_t_max(spec: &MazeSpec) -> usize {
    match spec.name.as_str() {
        "umaze" => 100,
        "medium" => 200,
        "large" => 400,
        _ => 8 * (spec.rows() + spec.cols()),
    }
}

/// Cells covered by exactly one leg.
fn exclusive_cells(spec: &MazeSpec, ds: &OfflineDataset, leg: usize) -> Vec<Cell> {
    let mine = ds.legs[leg].cells(spec);
    let others: Vec<Cell> = ds
        .legs
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != leg)
        .flat_map(|(_, l)| l.cells(spec))
        .collect();
    mine.into_iter().filter(|c| !others.contains(c)).collect()
}

fn point_in_cell<R: Rng + ?Sized>(spec: &MazeSpec, c: Cell, jitter: f64, rng: &mut R) -> Goal {
    let centre = spec.cell_goal(c);
    match spec.kind {
        MazeKind::Continuous => {
            let j = jitter * spec.cell_size;
            centre.offset([rng.random_range(-j..=j), rng.random_range(-j..=j)])
        }
        MazeKind::Discrete => centre,
    }
}

fn state_at(spec: &MazeSpec, g: &Goal) -> State {
    match spec.kind {
        MazeKind::Continuous => State::at_rest(g.0[0], g.0[1]),
        MazeKind::Discrete => State::Cell(spec.goal_cell(g).expect("goal inside grid")),
    }
}

/// True when no single trajectory passes within `delta` of both points.
pub fn has_stitching_gap(ds: &OfflineDataset, a: &Goal, b: &Goal, delta: f64) -> bool {
    !ds.trajectories.iter().any(|tr| {
        tr.states.iter().any(|s| phi(s).dist(a) < delta) && tr.states.iter().any(|s| phi(s).dist(b) < delta)
    })
}

/// Pairs whose start lies in leg `A`'s exclusive cells and whose goal lies
/// in the next leg's exclusive cells. Each pair is certified reachable and
/// uncovered by any single trajectory.
pub fn make_stitching_pairs(spec: &MazeSpec, ds: &OfflineDataset, n_pairs: usize, delta: f64, seed: u64) -> Result<Vec<EvalPair>> {
    if ds.legs.len() < 2 {
        return Err(Error::Config(format!(
            "stitching pairs need at least two legs, dataset has {}",
            ds.legs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_links = ds.legs.len() - 1;
    let excl: Vec<Vec<Cell>> = (0..ds.legs.len()).map(|k| exclusive_cells(spec, ds, k)).collect();
    let mut out = Vec::with_capacity(n_pairs);
    let budget = 200 * n_pairs.max(1);
    let mut tries = 0;
    while out.len() < n_pairs {
        tries += 1;
        if tries > budget {
            let names: Vec<&str> = ds.legs.iter().map(|l| l.name.as_str()).collect();
            return Err(Error::Config(format!(
                "no certified stitching pairs between legs {names:?} after {budget} draws"
            )));
        }
        let a = rng.random_range(0..n_links);
        let (ea, eb) = (&excl[a], &excl[a + 1]);
        if ea.is_empty() || eb.is_empty() {
            continue;
        }
        let s = point_in_cell(spec, ea[rng.random_range(0..ea.len())], 0.3, &mut rng);
        let g = point_in_cell(spec, eb[rng.random_range(0..eb.len())], 0.3, &mut rng);
        if !spec.goal_is_valid(&s) || !spec.goal_is_valid(&g) {
            continue;
        }
        if !spec.bfs_reachable(&s, &g)?.reachable || !has_stitching_gap(ds, &s, &g, delta) {
            continue;
        }
        out.push(EvalPair {
            start: state_at(spec, &s),
            goal: g,
            kind: PairKind::Stitching,
        });
    }
    Ok(out)
}

/// Pairs taken from single trajectories: a logged state and a later goal at
/// least `delta` away.
pub fn make_in_distribution_pairs(ds: &OfflineDataset, n_pairs: usize, delta: f64, seed: u64) -> Result<Vec<EvalPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_pairs);
    let budget = 200 * n_pairs.max(1);
    for _ in 0..budget {
        if out.len() == n_pairs {
            break;
        }
        let tr = &ds.trajectories[rng.random_range(0..ds.len())];
        if tr.is_empty() {
            continue;
        }
        let t = rng.random_range(0..tr.len());
        let i = rng.random_range(t + 1..=tr.len());
        let g = tr.goal_at(i);
        if phi(&tr.states[t]).dist(&g) < delta {
            continue;
        }
        out.push(EvalPair {
            start: tr.states[t],
            goal: g,
            kind: PairKind::InDistribution,
        });
    }
    if out.len() < n_pairs {
        return Err(Error::Config("dataset too short for in-distribution pairs".into()));
    }
    Ok(out)
}

/// Discounted occupancies of one tabular policy: `state_occ[s][g]` is
/// `(1 - gamma) sum_t gamma^t P(s_t = g | s_0 = s)` and `sa_occ[s][a][g]`
/// additionally fixes the first action.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyTable {
    pub gamma: f64,
    pub cells: Vec<Cell>,
    pub state_occ: Vec<Vec<f64>>,
    pub sa_occ: Vec<[Vec<f64>; 5]>,
    index: HashMap<Cell, usize>,
}

impl OccupancyTable {
    pub fn index_of(&self, c: Cell) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn sa(&self, s: Cell, a: Move) -> &[f64] {
        &self.sa_occ[self.index[&s]][a.index()]
    }

    pub fn state(&self, s: Cell) -> &[f64] {
        &self.state_occ[self.index[&s]]
    }
}

/// Row-stochastic transition matrix of a tabular policy over free cells.
pub fn transition_matrix(spec: &MazeSpec, policy: &TabularPolicy, cells: &[Cell], index: &HashMap<Cell, usize>) -> Vec<Vec<f64>> {
    let n = cells.len();
    let mut p = vec![vec![0.0; n]; n];
    for (k, &c) in cells.iter().enumerate() {
        let probs = policy.probs(c).expect("policy covers free cells");
        for (m, pm) in Move::ALL.iter().zip(probs) {
            p[k][index[&spec.shift(c, *m)]] += pm;
        }
    }
    p
}

/// Exact occupancy by iterating the chain until `gamma^t < 1e-12`, then
/// renormalising each row.
pub fn exact_occupancy(spec: &MazeSpec, policy: &TabularPolicy, gamma: f64) -> Result<OccupancyTable> {
    if spec.kind != MazeKind::Discrete {
        return Err(Error::Unsupported("exact occupancy needs a discrete maze".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let cells = spec.free_cells();
    let index: HashMap<Cell, usize> = cells.iter().enumerate().map(|(k, c)| (*c, k)).collect();
    let n = cells.len();
    let p = transition_matrix(spec, policy, &cells, &index);
    let mut occ = vec![vec![0.0; n]; n];
    for (s, row) in occ.iter_mut().enumerate() {
        let mut dist = vec![0.0; n];
        dist[s] = 1.0;
        let mut w = 1.0 - gamma;
        let mut disc = 1.0;
        while disc >= 1e-12 {
            for g in 0..n {
                row[g] += w * dist[g];
            }
            let mut next = vec![0.0; n];
            for (a, da) in dist.iter().enumerate() {
                if *da != 0.0 {
                    for (b, pab) in p[a].iter().enumerate() {
                        next[b] += da * pab;
                    }
                }
            }
            dist = next;
            w *= gamma;
            disc *= gamma;
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    let sa_occ = cells
        .iter()
        .enumerate()
        .map(|(s, &c)| {
            std::array::from_fn(|a| {
                let next = index[&spec.shift(c, Move::ALL[a])];
                (0..n)
                    .map(|g| gamma * occ[next][g] + if g == s { 1.0 - gamma } else { 0.0 })
                    .collect()
            })
        })
        .collect();
    Ok(OccupancyTable {
        gamma,
        cells,
        state_occ: occ,
        sa_occ,
        index,
    })
}

/// Tabular policy that never bumps into walls: moves are weighted by
/// `prefs` (Up, Down, Left, Right) among unblocked directions and share
/// `1 - stay`, with a constant `stay` probability.
pub fn wall_avoiding_policy(spec: &MazeSpec, name: &str, prefs: [f64; 4], stay: f64) -> Result<TabularPolicy> {
    TabularPolicy::new(spec, name, |c| {
        let mut p = [0.0; 5];
        let mut total = 0.0;
        for k in 0..4 {
            if spec.shift(c, Move::ALL[k]) != c {
                p[k] = prefs[k];
                total += prefs[k];
            }
        }
        for v in p.iter_mut().take(4) {
            *v *= (1.0 - stay) / total;
        }
        p[4] = stay;
        p
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem2Config {
    pub maze: String,
    pub n_traj: usize,
    /// Only states with `t <= t_use` are clustered and used as candidates.
    pub t_use: usize,
    /// Extra steps after `t_use` so later-goal draws are never truncated in
    /// practice.
    pub buffer: usize,
    pub gamma: f64,
    pub clusters: usize,
    pub n_samples: usize,
    pub query_cell: [usize; 2],
    pub query_action: Move,
    pub stay: f64,
    pub reach_check: ReachCheck,
    pub delta: f64,
    pub seed: u64,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Theorem2Config {
            maze: "grid5".into(),
            n_traj: 2000,
            t_use: 40,
            buffer: 300,
            gamma: 0.9,
            clusters: 4,
            n_samples: 100_000,
            query_cell: [3, 3],
            query_action: Move::Right,
            stay: 0.2,
            reach_check: ReachCheck::CandidateAction,
            delta: 0.5,
            seed: 0,
        }
    }
}

/// The two behavior policies of the oracle instance: one drifting
/// south-east, one north-west.
pub fn oracle_policies(spec: &MazeSpec, stay: f64) -> Result<Vec<TabularPolicy>> {
    Ok(vec![
        wall_avoiding_policy(spec, "south_east", [1.0, 3.0, 1.0, 3.0], stay)?,
        wall_avoiding_policy(spec, "north_west", [3.0, 1.0, 3.0, 1.0], stay)?,
    ])
}

/// Everything the oracle needs about a tabular dataset.
pub struct OracleInstance {
    pub spec: MazeSpec,
    pub policies: Vec<TabularPolicy>,
    pub tables: Vec<OccupancyTable>,
    pub dataset: OfflineDataset,
    pub cfg: Theorem2Config,
    /// Expected visits to each cell during `t = 0..=t_use`, per policy.
    pub visits: Vec<Vec<f64>>,
}

impl OracleInstance {
    pub fn build(cfg: &Theorem2Config) -> Result<Self> {
        let spec = MazeSpec::bundled(&cfg.maze, MazeKind::Discrete)?;
        let policies = oracle_policies(&spec, cfg.stay)?;
        let tables = policies
            .par_iter()
            .map(|p| exact_occupancy(&spec, p, cfg.gamma))
            .collect::<Result<Vec<_>>>()?;
        let starts = spec.free_cells();
        let dataset = collect_tabular(&spec, &policies, &starts, cfg.n_traj, cfg.t_use + cfg.buffer, cfg.seed)?;
        let cells = &tables[0].cells;
        let n = cells.len();
        let visits = policies
            .iter()
            .map(|p| {
                let index: HashMap<Cell, usize> = cells.iter().enumerate().map(|(k, c)| (*c, k)).collect();
                let m = transition_matrix(&spec, p, cells, &index);
                let mut dist = vec![1.0 / n as f64; n];
                let mut acc = vec![0.0; n];
                for _ in 0..=cfg.t_use {
                    for k in 0..n {
                        acc[k] += dist[k];
                    }
                    let mut next = vec![0.0; n];
                    for a in 0..n {
                        for b in 0..n {
                            next[b] += dist[a] * m[a][b];
                        }
                    }
                    dist = next;
                }
                acc
            })
            .collect();
        Ok(OracleInstance {
            spec,
            policies,
            tables,
            dataset,
            cfg: cfg.clone(),
            visits,
        })
    }

    fn prior(&self) -> Vec<f64> {
        let n = self.cfg.n_traj;
        let h = self.policies.len();
        (0..h).map(|k| ((n + h - 1 - k) / h) as f64 / n as f64).collect()
    }

    /// `p(h | s, a)` for a dataset occurrence of `(s, a)`.
    pub fn posterior_sa(&self, s: Cell, a: Move) -> Vec<f64> {
        let k = self.tables[0].index_of(s).expect("free cell");
        let prior = self.prior();
        let w: Vec<f64> = (0..self.policies.len())
            .map(|h| prior[h] * self.visits[h][k] * self.policies[h].probs(s).unwrap()[a.index()])
            .collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// `p(h | s)` for a dataset occurrence of `s`.
    pub fn posterior_s(&self, s: Cell) -> Vec<f64> {
        let k = self.tables[0].index_of(s).expect("free cell");
        let prior = self.prior();
        let w: Vec<f64> = (0..self.policies.len()).map(|h| prior[h] * self.visits[h][k]).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// Relabel-stage distribution `sum_h p(h|s,a) p+(. | s, a)`.
    pub fn first_stage(&self, s: Cell, a: Move) -> Vec<f64> {
        let post = self.posterior_sa(s, a);
        let n = self.tables[0].cells.len();
        let mut out = vec![0.0; n];
        for (h, w) in post.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.tables[h].sa(s, a)) {
                *o += w * v;
            }
        }
        out
    }

    /// The composed one-step goal distribution for `(s, a)`.
    pub fn one_step(&self, s: Cell, a: Move) -> Vec<f64> {
        let first = self.first_stage(s, a);
        let cells = &self.tables[0].cells;
        let n = cells.len();
        let mut out = vec![0.0; n];
        for (kn, &sn) in cells.iter().enumerate() {
            if first[kn] == 0.0 {
                continue;
            }
            let post = self.posterior_s(sn);
            for (h, w) in post.iter().enumerate() {
                for (o, v) in out.iter_mut().zip(self.tables[h].state(sn)) {
                    *o += first[kn] * w * v;
                }
            }
        }
        out
    }

    /// Draws a relabeled goal from the first stage by simulation.
    fn sample_first_stage<R: Rng + ?Sized>(&self, s: Cell, a: Move, post: &[f64], rng: &mut R) -> (Cell, usize) {
        let u: f64 = rng.random();
        let h = if u < post[0] { 0 } else { 1.min(post.len() - 1) };
        let k = crate::data::truncated_geometric(rng, self.cfg.gamma, 0, usize::MAX / 2);
        if k == 0 {
            return (s, 0);
        }
        let mut c = self.spec.shift(s, a);
        for _ in 1..k {
            c = self.spec.shift(c, self.policies[h].sample(c, rng));
        }
        (c, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub n_samples: usize,
    pub n_accepted: usize,
    pub clusters: usize,
    pub reach_check: ReachCheck,
    pub max_deviation: f64,
    /// Largest per-cell standard error, clustered by the source trajectory
    /// of each draw so the shared dataset's variability is included.
    pub mc_standard_error: f64,
    /// Largest per-cell binomial standard error, ignoring dataset reuse.
    pub naive_standard_error: f64,
    pub eps_k: f64,
    pub l1: f64,
    pub l2: f64,
    pub bound: f64,
    /// `max_deviation / (eps_k * l1)`, infinite when the denominator is 0.
    pub ratio: f64,
    pub within_bound: bool,
    pub p_hat: Vec<f64>,
    pub p_one_step: Vec<f64>,
    pub cells: Vec<Cell>,
}

/// Compares the MGDA goal distribution for one `(s, a)` query with the
/// composed oracle. The relabel stage is simulated exactly, then the
/// augmenter runs with `eps_prob = 1` and geometric later-goal draws; only
/// draws with MGDA provenance enter the estimate.
pub fn theorem2_check(
    inst: &OracleInstance,
    ci: &ClusterIndex,
    model: &DynamicsModel,
    c_bound: f64,
) -> Result<Theorem2Report> {
    let cfg = &inst.cfg;
    let s = Cell::new(cfg.query_cell[0], cfg.query_cell[1]);
    if !inst.spec.is_free(s) {
        return Err(Error::Config(format!("query cell ({}, {}) is a wall", s.i, s.j)));
    }
    let a = cfg.query_action;
    let aug_cfg = AugmentConfig {
        strategy: Strategy::Mgda,
        eps_prob: 1.0,
        delta: cfg.delta,
        reach_check: cfg.reach_check,
        retries: 8,
        later_gamma: Some(cfg.gamma),
        seed: cfg.seed,
    };
    let aug = Augmenter::new(&inst.dataset, Some(ci), Some(model), aug_cfg)?;
    let cells = inst.tables[0].cells.clone();
    let n = cells.len();
    let post = inst.posterior_sa(s, a);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e02);
    let mut draws: Vec<(usize, usize)> = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let (sn, k) = inst.sample_first_stage(s, a, &post, &mut rng);
        let base = RelabeledSample {
            state: State::Cell(s),
            action: Action::Move(a),
            goal: Goal::from(sn),
            traj: usize::MAX,
            t: 0,
            i: k,
        };
        let out = aug.augment(&base, &mut rng);
        if out.provenance != Provenance::Mgda {
            continue;
        }
        let g = inst.spec.goal_cell(&out.goal).expect("dataset goal");
        draws.push((inst.tables[0].index_of(g).expect("free"), out.source.0));
    }
    let m = draws.len();
    if m == 0 {
        return Err(Error::Precondition("no MGDA draw was accepted".into()));
    }
    let mut p_hat = vec![0.0; n];
    for (g, _) in &draws {
        p_hat[*g] += 1.0 / m as f64;
    }
    let p_one = inst.one_step(s, a);
    let max_dev = p_hat
        .iter()
        .zip(&p_one)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let naive = p_hat
        .iter()
        .map(|p| (p * (1.0 - p) / m as f64).sqrt())
        .fold(0.0, f64::max);
    let mut by_traj: HashMap<usize, Vec<usize>> = HashMap::new();
    for (g, tr) in &draws {
        by_traj.entry(*tr).or_default().push(*g);
    }
    let mut clustered: f64 = 0.0;
    let n_groups = by_traj.len() as f64;
    for g in 0..n {
        let mut acc = 0.0;
        for gs in by_traj.values() {
            let hits = gs.iter().filter(|x| **x == g).count() as f64;
            let e = hits - p_hat[g] * gs.len() as f64;
            acc += e * e;
        }
        let var = if n_groups > 1.0 { acc * n_groups / (n_groups - 1.0) } else { acc };
        clustered = clustered.max(var.sqrt() / m as f64);
    }
    let se = clustered.max(naive);

    let first = inst.first_stage(s, a);
    let sp = inst.spec.shortest_paths();
    let mut cluster_cells: Vec<Vec<usize>> = vec![Vec::new(); ci.n_clusters()];
    for (k, &c) in cells.iter().enumerate() {
        cluster_cells[ci.assign(&Goal::from(c))].push(k);
    }
    let mut l1: f64 = 0.0;
    let mut l2: f64 = 0.0;
    for members in &cluster_cells {
        for &x in members {
            for &y in members {
                if x == y || sp.dist(cells[x], cells[y]).is_none() {
                    continue;
                }
                let d = Goal::from(cells[x]).dist(&Goal::from(cells[y]));
                l1 = l1.max((first[x] - first[y]).abs() / d);
                let (px, py) = (inst.posterior_s(cells[x]), inst.posterior_s(cells[y]));
                l2 = l2.max((px[0] - py[0]).abs() / d);
            }
        }
    }
    let eps_k = ci.max_eps();
    let bound = c_bound * eps_k * l1 + 3.0 * se;
    Ok(Theorem2Report {
        n_samples: cfg.n_samples,
        n_accepted: m,
        clusters: ci.n_clusters(),
        reach_check: cfg.reach_check,
        max_deviation: max_dev,
        mc_standard_error: se,
        naive_standard_error: naive,
        eps_k,
        l1,
        l2,
        bound,
        ratio: if eps_k * l1 > 0.0 { max_dev / (eps_k * l1) } else { f64::INFINITY },
        within_bound: max_dev <= bound,
        p_hat,
        p_one_step: p_one,
        cells,
    })
}

/// Clusters the oracle dataset (states with `t <= t_use` only).
pub fn oracle_clusters(inst: &OracleInstance, c: usize) -> Result<ClusterIndex> {
    let t_use = inst.cfg.t_use;
    ClusterIndex::fit_filtered(&inst.dataset, c, 100, inst.cfg.seed, |_, t| t <= t_use)
}

/// Number of distinct goal points among clustered oracle states, i.e. the
/// cluster count that makes every cluster a single point.
pub fn oracle_singleton_count(inst: &OracleInstance) -> usize {
    let mut pts = Vec::new();
    for tr in &inst.dataset.trajectories {
        for s in tr.states.iter().take(inst.cfg.t_use + 1) {
            pts.push(phi(s).0);
        }
    }
    crate::cluster::count_distinct(&pts)
}
