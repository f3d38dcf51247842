//! Scripted data collection, hindsight relabeling and dataset persistence.
//!
//! Trajectories come from leg controllers: each leg is a short waypoint route
//! through the maze, and consecutive legs share a cell. No trajectory runs
//! more than one leg, so reaching across legs requires stitching.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{phi, Action, Cell, Goal, MazeKind, MazeSpec, Move, State};
use crate::error::{Error, Result};

/// One logged rollout: `states.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub desired_goal: Goal,
    pub controller_id: usize,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn goal_at(&self, i: usize) -> Goal {
        phi(&self.states[i])
    }

    fn check(&self, spec: &MazeSpec) -> std::result::Result<(), String> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(format!(
                "{} states for {} actions",
                self.states.len(),
                self.actions.len()
            ));
        }
        if !spec.goal_is_valid(&self.desired_goal) {
            return Err(format!("desired goal {:?} is not in a free cell", self.desired_goal.0));
        }
        for (t, s) in self.states.iter().enumerate() {
            if !spec.state_is_valid(s) {
                return Err(format!("state {t} ({:?}) is inside a wall or out of bounds", s.coords()));
            }
        }
        for t in 0..self.actions.len() {
            let next = spec
                .step(&self.states[t], &self.actions[t])
                .map_err(|e| format!("step {t}: {e}"))?;
            if next != self.states[t + 1] {
                return Err(format!("state {} does not follow from step {t}", t + 1));
            }
        }
        Ok(())
    }

    /// Cells visited, in order of first visit.
    pub fn cells(&self, spec: &MazeSpec) -> Vec<Cell> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &self.states {
            if let Some(c) = spec.goal_cell(&phi(s)) {
                if seen.insert(c) {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// A waypoint route followed by one behavior controller.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leg {
    pub name: String,
    pub waypoints: Vec<Cell>,
}

impl Leg {
    pub fn new(name: &str, waypoints: &[Cell]) -> Self {
        Leg {
            name: name.to_string(),
            waypoints: waypoints.to_vec(),
        }
    }

    pub fn validate(&self, spec: &MazeSpec) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::Config(format!("leg {:?} has no waypoints", self.name)));
        }
        for w in &self.waypoints {
            if !spec.is_free(*w) {
                return Err(Error::Config(format!(
                    "waypoint ({}, {}) of leg {:?} is inside a wall",
                    w.i, w.j, self.name
                )));
            }
        }
        for pair in self.waypoints.windows(2) {
            if spec.cell_path(pair[0], pair[1]).is_none() {
                return Err(Error::Config(format!(
                    "leg {:?} has unconnected waypoints ({}, {}) and ({}, {})",
                    self.name, pair[0].i, pair[0].j, pair[1].i, pair[1].j
                )));
            }
        }
        Ok(())
    }

    /// Cells along the BFS route through all waypoints.
    pub fn cells(&self, spec: &MazeSpec) -> Vec<Cell> {
        let mut out = vec![self.waypoints[0]];
        for pair in self.waypoints.windows(2) {
            if let Some(p) = spec.cell_path(pair[0], pair[1]) {
                out.extend(p.into_iter().skip(1));
            }
        }
        out
    }
}

/// Splits the maze's longest shortest path into `n_legs` chunks that share
/// their boundary cell. Waypoints are the chunk ends plus every turn.
pub fn route_legs(spec: &MazeSpec, n_legs: usize) -> Result<Vec<Leg>> {
    if n_legs == 0 {
        return Err(Error::Config("need at least one leg".into()));
    }
    let sp = spec.shortest_paths();
    let mut best = (0u32, sp.cells[0], sp.cells[0]);
    for &a in &sp.cells {
        for &b in &sp.cells {
            if let Some(d) = sp.dist(a, b) {
                if d > best.0 {
                    best = (d, a, b);
                }
            }
        }
    }
    let route = spec
        .cell_path(best.1, best.2)
        .ok_or_else(|| Error::Config("maze has no route".into()))?;
    let hops = route.len() - 1;
    if hops < n_legs {
        return Err(Error::Config(format!(
            "route of {hops} hops cannot be split into {n_legs} legs"
        )));
    }
    let mut legs = Vec::with_capacity(n_legs);
    for k in 0..n_legs {
        let lo = k * hops / n_legs;
        let hi = (k + 1) * hops / n_legs;
        let chunk = &route[lo..=hi];
        let mut wps = vec![chunk[0]];
        for w in chunk.windows(3) {
            let d1 = (w[1].i as isize - w[0].i as isize, w[1].j as isize - w[0].j as isize);
            let d2 = (w[2].i as isize - w[1].i as isize, w[2].j as isize - w[1].j as isize);
            if d1 != d2 {
                wps.push(w[1]);
            }
        }
        wps.push(chunk[chunk.len() - 1]);
        legs.push(Leg::new(&format!("leg{k}"), &wps));
    }
    Ok(legs)
}

/// Default controller set for a layout.
pub fn default_legs(spec: &MazeSpec) -> Result<Vec<Leg>> {
    match spec.name.as_str() {
        "two_room" => {
            let bottom = spec.rows() - 2;
            Ok(vec![
                Leg::new("west", &[Cell::new(1, 1), Cell::new(1, bottom)]),
                Leg::new("east", &[Cell::new(3, 1), Cell::new(3, bottom)]),
            ])
        }
        _ => route_legs(spec, 2),
    }
}

/// Collection parameters. `noise` is the force noise std on the point maze
/// and the random-move probability on grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub n_traj: usize,
    pub horizon: usize,
    pub noise: f64,
    pub seed: u64,
    pub kp: f64,
    pub kd: f64,
    pub switch_radius: f64,
    pub start_jitter: f64,
    /// Probability that a trajectory drives its leg from the last waypoint
    /// back to the first.
    pub reverse_fraction: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            n_traj: 500,
            horizon: 100,
            noise: 0.1,
            seed: 0,
            kp: 6.0,
            kd: 4.0,
            switch_radius: 0.3,
            start_jitter: 0.25,
            reverse_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub maze: MazeSpec,
    pub seed: u64,
    pub legs: Vec<Leg>,
    pub trajectories: Vec<Trajectory>,
    /// `offsets[k]` is the number of transitions before trajectory `k`.
    offsets: Vec<usize>,
}

impl OfflineDataset {
    pub fn new(maze: MazeSpec, seed: u64, legs: Vec<Leg>, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Config("dataset has no trajectories".into()));
        }
        for (k, tr) in trajectories.iter().enumerate() {
            tr.check(&maze)
                .map_err(|msg| Error::InvalidTrajectory { traj: k, msg })?;
        }
        let mut offsets = Vec::with_capacity(trajectories.len() + 1);
        let mut acc = 0;
        for tr in &trajectories {
            offsets.push(acc);
            acc += tr.len();
        }
        offsets.push(acc);
        if acc == 0 {
            return Err(Error::Config("dataset has no transitions".into()));
        }
        Ok(OfflineDataset {
            maze,
            seed,
            legs,
            trajectories,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_transitions(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn n_states(&self) -> usize {
        self.n_transitions() + self.len()
    }

    /// Maps a flat transition index to `(trajectory, t)`.
    pub fn locate(&self, k: usize) -> (usize, usize) {
        let traj = self.offsets.partition_point(|&o| o <= k) - 1;
        (traj, k - self.offsets[traj])
    }

    pub fn state(&self, traj: usize, t: usize) -> &State {
        &self.trajectories[traj].states[t]
    }

    /// Trajectories whose controller is `leg`.
    pub fn by_controller(&self, leg: usize) -> impl Iterator<Item = (usize, &Trajectory)> {
        self.trajectories
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.controller_id == leg)
    }
}

/// Runs the leg controllers round-robin; trajectory `k` uses the RNG stream
/// `seed + k` so collection is order-independent.
pub fn collect(spec: &MazeSpec, legs: &[Leg], cfg: &CollectConfig) -> Result<OfflineDataset> {
    if cfg.n_traj == 0 {
        return Err(Error::Config("n_traj must be at least 1".into()));
    }
    if cfg.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if legs.is_empty() {
        return Err(Error::Config("no controllers given".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be non-negative, got {}", cfg.noise)));
    }
    if !(0.0..=1.0).contains(&cfg.reverse_fraction) {
        return Err(Error::Config(format!(
            "reverse_fraction must be in [0, 1], got {}",
            cfg.reverse_fraction
        )));
    }
    for leg in legs {
        leg.validate(spec)?;
    }
    let trajectories = (0..cfg.n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
            let leg_id = k % legs.len();
            let mut leg = legs[leg_id].clone();
            if cfg.reverse_fraction > 0.0 && rng.random::<f64>() < cfg.reverse_fraction {
                leg.waypoints.reverse();
            }
            match spec.kind {
                MazeKind::Continuous => run_point_leg(spec, &leg, leg_id, cfg, &mut rng),
                MazeKind::Discrete => run_grid_leg(spec, &leg, leg_id, cfg, &mut rng),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    OfflineDataset::new(spec.clone(), cfg.seed, legs.to_vec(), trajectories)
}

fn run_point_leg(
    spec: &MazeSpec,
    leg: &Leg,
    leg_id: usize,
    cfg: &CollectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let targets: Vec<Goal> = leg.waypoints.iter().map(|c| spec.cell_goal(*c)).collect();
    let noise = Normal::new(0.0, cfg.noise.max(1e-300)).map_err(|e| Error::Config(e.to_string()))?;
    let j = cfg.start_jitter * spec.cell_size;
    let start = targets[0].offset([rng.random_range(-j..=j), rng.random_range(-j..=j)]);
    let mut s = State::at_rest(start.0[0], start.0[1]);
    let mut states = vec![s];
    let mut actions = Vec::new();
    let mut k = 1.min(targets.len() - 1);
    for _ in 0..cfg.horizon {
        let State::Point { pos, vel } = s else { unreachable!() };
        while k < targets.len() && Goal(pos).dist(&targets[k]) < cfg.switch_radius {
            k += 1;
        }
        if k >= targets.len() {
            break;
        }
        let tgt = targets[k].0;
        let mut f = [0.0; 2];
        for d in 0..2 {
            f[d] = cfg.kp * (tgt[d] - pos[d]) - cfg.kd * vel[d];
            if cfg.noise > 0.0 {
                f[d] += noise.sample(rng);
            }
        }
        let a = Action::force(f[0], f[1]);
        s = spec.step(&s, &a)?;
        actions.push(a);
        states.push(s);
    }
    Ok(Trajectory {
        states,
        actions,
        desired_goal: *targets.last().unwrap(),
        controller_id: leg_id,
    })
}

/// First move of a BFS shortest path, ties broken by `Move::ALL` order.
pub fn greedy_move(spec: &MazeSpec, from: Cell, to: Cell) -> Move {
    match spec.cell_path(from, to) {
        Some(p) if p.len() >= 2 => Move::ALL
            .into_iter()
            .find(|m| spec.shift(from, *m) == p[1])
            .unwrap_or(Move::Stay),
        _ => Move::Stay,
    }
}

fn run_grid_leg(
    spec: &MazeSpec,
    leg: &Leg,
    leg_id: usize,
    cfg: &CollectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut c = leg.waypoints[0];
    let mut states = vec![State::Cell(c)];
    let mut actions = Vec::new();
    let mut k = 1.min(leg.waypoints.len() - 1);
    for _ in 0..cfg.horizon {
        while k < leg.waypoints.len() && c == leg.waypoints[k] {
            k += 1;
        }
        if k >= leg.waypoints.len() {
            break;
        }
        let m = if rng.random::<f64>() < cfg.noise {
            Move::ALL[rng.random_range(0..Move::ALL.len())]
        } else {
            greedy_move(spec, c, leg.waypoints[k])
        };
        c = spec.shift(c, m);
        actions.push(Action::Move(m));
        states.push(State::Cell(c));
    }
    Ok(Trajectory {
        states,
        actions,
        desired_goal: Goal::from(*leg.waypoints.last().unwrap()),
        controller_id: leg_id,
    })
}

/// Stationary tabular behavior policy on a grid maze.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub name: String,
    cells: Vec<Cell>,
    probs: Vec<[f64; 5]>,
}

impl TabularPolicy {
    /// Builds the policy from `f(cell)`, which must return a probability
    /// vector over `Move::ALL`.
    pub fn new(spec: &MazeSpec, name: &str, f: impl Fn(Cell) -> [f64; 5]) -> Result<Self> {
        let cells = spec.free_cells();
        let mut probs = Vec::with_capacity(cells.len());
        for &c in &cells {
            let p = f(c);
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "policy {name:?} is not a distribution at ({}, {})",
                    c.i, c.j
                )));
            }
            probs.push(p);
        }
        Ok(TabularPolicy {
            name: name.to_string(),
            cells,
            probs,
        })
    }

    pub fn probs(&self, c: Cell) -> Option<&[f64; 5]> {
        self.cells.binary_search_by(|x| (x.j, x.i).cmp(&(c.j, c.i))).ok().map(|k| &self.probs[k])
    }

    pub fn sample<R: Rng + ?Sized>(&self, c: Cell, rng: &mut R) -> Move {
        let p = self.probs(c).expect("cell is free");
        let mut u: f64 = rng.random();
        for (k, pk) in p.iter().enumerate() {
            if u < *pk {
                return Move::ALL[k];
            }
            u -= pk;
        }
        Move::ALL[p.iter().rposition(|v| *v > 0.0).unwrap_or(4)]
    }
}

/// Rolls out tabular policies round-robin for exactly `horizon` steps from
/// starts drawn uniformly over `starts`.
pub fn collect_tabular(
    spec: &MazeSpec,
    policies: &[TabularPolicy],
    starts: &[Cell],
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if spec.kind != MazeKind::Discrete {
        return Err(Error::Unsupported("tabular collection needs a discrete maze".into()));
    }
    if n_traj == 0 || horizon == 0 || policies.is_empty() || starts.is_empty() {
        return Err(Error::Config("tabular collection needs policies, starts, n_traj and horizon".into()));
    }
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let h = k % policies.len();
            let mut c = starts[rng.random_range(0..starts.len())];
            let mut states = vec![State::Cell(c)];
            let mut actions = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let m = policies[h].sample(c, &mut rng);
                c = spec.shift(c, m);
                actions.push(Action::Move(m));
                states.push(State::Cell(c));
            }
            Trajectory {
                desired_goal: phi(states.last().unwrap()),
                states,
                actions,
                controller_id: h,
            }
        })
        .collect();
    OfflineDataset::new(spec.clone(), seed, Vec::new(), trajectories)
}

/// Random walk over unblocked moves that, with probability `bump`, instead
/// tries a move a wall blocks (when the cell has one).
pub fn wall_stress_dataset(spec: &MazeSpec, n_traj: usize, horizon: usize, bump: f64, seed: u64) -> Result<OfflineDataset> {
    if !(0.0..=1.0).contains(&bump) {
        return Err(Error::Config(format!("bump probability must be in [0, 1], got {bump}")));
    }
    let walk = TabularPolicy::new(spec, "wall_stress", |c| {
        let blocked: Vec<bool> = Move::ALL.iter().map(|m| *m != Move::Stay && spec.shift(c, *m) == c).collect();
        let n_blocked = blocked.iter().filter(|b| **b).count();
        let n_open = Move::ALL.len() - n_blocked;
        let p_bump = if n_blocked > 0 { bump } else { 0.0 };
        std::array::from_fn(|k| {
            if blocked[k] {
                p_bump / n_blocked as f64
            } else {
                (1.0 - p_bump) / n_open as f64
            }
        })
    })?;
    collect_tabular(spec, &[walk], &spec.free_cells(), n_traj, horizon, seed)
}

/// Whether a grid transition attempted a move that a wall blocked.
pub fn is_wall_contact(t: &Transition) -> bool {
    match (t.state, t.action) {
        (State::Cell(c), Action::Move(m)) => m != Move::Stay && Goal::from(c) == t.next_goal,
        _ => false,
    }
}

/// A training pair drawn by hindsight relabeling: `goal = phi(states[i])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelabeledSample {
    pub state: State,
    pub action: Action,
    pub goal: Goal,
    pub traj: usize,
    pub t: usize,
    pub i: usize,
}

/// Draws an offset `k >= min_k` with `P(k) ~ gamma^k`, capped at `max_k` by
/// rejection.
pub fn truncated_geometric<R: Rng + ?Sized>(rng: &mut R, gamma: f64, min_k: usize, max_k: usize) -> usize {
    debug_assert!(min_k <= max_k);
    loop {
        let u: f64 = rng.random();
        let k = min_k + ((1.0 - u).ln() / gamma.ln()).floor() as usize;
        if k <= max_k {
            return k;
        }
    }
}

/// Uniform over transitions `(traj, t)`; `i` uniform on `{t..=T}` or, with
/// `gamma_geom`, geometrically tilted toward `t`.
pub fn sample_relabeled<R: Rng + ?Sized>(
    ds: &OfflineDataset,
    batch: usize,
    gamma_geom: Option<f64>,
    rng: &mut R,
) -> Vec<RelabeledSample> {
    let n = ds.n_transitions();
    (0..batch)
        .map(|_| {
            let (traj, t) = ds.locate(rng.random_range(0..n));
            let tr = &ds.trajectories[traj];
            let i = match gamma_geom {
                None => rng.random_range(t..=tr.len()),
                Some(g) => t + truncated_geometric(rng, g, 0, tr.len() - t),
            };
            RelabeledSample {
                state: tr.states[t],
                action: tr.actions[t],
                goal: tr.goal_at(i),
                traj,
                t,
                i,
            }
        })
        .collect()
}

/// One logged transition with the goal of its successor state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub next_goal: Goal,
    pub traj: usize,
    pub t: usize,
}

pub fn transition_tuples(ds: &OfflineDataset) -> Vec<Transition> {
    let mut out = Vec::with_capacity(ds.n_transitions());
    for (traj, tr) in ds.trajectories.iter().enumerate() {
        for t in 0..tr.len() {
            out.push(Transition {
                state: tr.states[t],
                action: tr.actions[t],
                next_goal: tr.goal_at(t + 1),
                traj,
                t,
            });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    maze: String,
    kind: MazeKind,
    layout: Vec<String>,
    cell_size: f64,
    dt: f64,
    v_max: f64,
    seed: u64,
    n_traj: usize,
    n_transitions: usize,
    legs: Vec<Leg>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ActionRecord {
    Force([f64; 2]),
    Move(Move),
}

#[derive(Serialize, Deserialize)]
struct Record {
    index: usize,
    controller: usize,
    desired_goal: [f64; 2],
    states: Vec<Vec<f64>>,
    actions: Vec<ActionRecord>,
}

const FORMAT_TAG: &str = "mgda-dataset/1";

/// Writes the dataset as JSON lines: one header, then one record per
/// trajectory.
pub fn save(ds: &OfflineDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_to<W: Write>(ds: &OfflineDataset, w: &mut W) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        maze: ds.maze.name.clone(),
        kind: ds.maze.kind,
        layout: ds.maze.to_text().lines().map(str::to_string).collect(),
        cell_size: ds.maze.cell_size,
        dt: ds.maze.dt,
        v_max: ds.maze.v_max,
        seed: ds.seed,
        n_traj: ds.len(),
        n_transitions: ds.n_transitions(),
        legs: ds.legs.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    for (index, tr) in ds.trajectories.iter().enumerate() {
        let rec = Record {
            index,
            controller: tr.controller_id,
            desired_goal: tr.desired_goal.0,
            states: tr.states.iter().map(State::coords).collect(),
            actions: tr
                .actions
                .iter()
                .map(|a| match *a {
                    Action::Force(f) => ActionRecord::Force(f),
                    Action::Move(m) => ActionRecord::Move(m),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<OfflineDataset> {
    read_from(BufReader::new(File::open(path)?))
}

fn decode_state(kind: MazeKind, v: &[f64], line: usize) -> Result<State> {
    let bad = |msg: String| Error::Parse { line, msg };
    match (kind, v.len()) {
        (MazeKind::Continuous, 4) => Ok(State::Point {
            pos: [v[0], v[1]],
            vel: [v[2], v[3]],
        }),
        (MazeKind::Discrete, 2) => {
            if v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
                return Err(bad(format!("cell coordinates {v:?} are not non-negative integers")));
            }
            Ok(State::Cell(Cell::new(v[0] as usize, v[1] as usize)))
        }
        (_, n) => Err(bad(format!("{kind} state with {n} components"))),
    }
}

pub fn read_from<B: BufRead>(reader: B) -> Result<OfflineDataset> {
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty dataset file".into(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("header: {e}"),
    })?;
    if header.format != FORMAT_TAG {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unknown format {:?}", header.format),
        });
    }
    let mut maze = MazeSpec::parse(&header.maze, &header.layout.join("\n"), header.kind)?;
    maze.cell_size = header.cell_size;
    maze.dt = header.dt;
    maze.v_max = header.v_max;
    maze.validate()?;
    let mut trajectories = Vec::with_capacity(header.n_traj);
    for (ln, line) in lines {
        let line = line?;
        let lineno = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("trajectory record: {e}"),
        })?;
        if rec.index != trajectories.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected trajectory {}, found {}", trajectories.len(), rec.index),
            });
        }
        let states = rec
            .states
            .iter()
            .map(|v| decode_state(header.kind, v, lineno))
            .collect::<Result<Vec<_>>>()?;
        let actions = rec
            .actions
            .into_iter()
            .map(|a| match (header.kind, a) {
                (MazeKind::Continuous, ActionRecord::Force(f)) => Ok(Action::Force(f)),
                (MazeKind::Discrete, ActionRecord::Move(m)) => Ok(Action::Move(m)),
                _ => Err(Error::Parse {
                    line: lineno,
                    msg: format!("action does not match a {} maze", header.kind),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory {
            states,
            actions,
            desired_goal: Goal(rec.desired_goal),
            controller_id: rec.controller,
        });
    }
    if trajectories.len() != header.n_traj {
        return Err(Error::Parse {
            line: trajectories.len() + 2,
            msg: format!(
                "header announces {} trajectories, file holds {}",
                header.n_traj,
                trajectories.len()
            ),
        });
    }
    let ds = OfflineDataset::new(maze, header.seed, header.legs, trajectories)?;
    if ds.n_transitions() != header.n_transitions {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "header announces {} transitions, file holds {}",
                header.n_transitions,
                ds.n_transitions()
            ),
        });
    }
    Ok(ds)
}
