//! Ground-truth maze environments.
//!
//! Two variants share one layout format: a continuous point mass driven by
//! cartesian forces (a damping-free double integrator) and a discrete grid
//! walker. Cell `(i, j)` is column `i`, row `j`; rows grow downward.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default integration step of the point maze.
pub const DEFAULT_DT: f64 = 0.1;
/// Default per-component speed limit of the point maze.
pub const DEFAULT_V_MAX: f64 = 1.0;
/// Default success threshold on goal distance.
pub const DEFAULT_DELTA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MazeKind {
    Continuous,
    Discrete,
}

impl fmt::Display for MazeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MazeKind::Continuous => write!(f, "continuous"),
            MazeKind::Discrete => write!(f, "discrete"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
}

impl Cell {
    pub const fn new(i: usize, j: usize) -> Self {
        Cell { i, j }
    }
}

/// A point in goal space. Discrete goals carry integral cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal(pub [f64; 2]);

impl Goal {
    pub fn new(x: f64, y: f64) -> Self {
        Goal([x, y])
    }

    pub fn dist(&self, other: &Goal) -> f64 {
        let dx = self.0[0] - other.0[0];
        let dy = self.0[1] - other.0[1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn offset(&self, d: [f64; 2]) -> Goal {
        Goal([self.0[0] + d[0], self.0[1] + d[1]])
    }
}

impl From<Cell> for Goal {
    fn from(c: Cell) -> Self {
        Goal([c.i as f64, c.j as f64])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum State {
    /// Position in length units and velocity in length per unit time.
    Point { pos: [f64; 2], vel: [f64; 2] },
    Cell(Cell),
}

impl State {
    pub fn at_rest(x: f64, y: f64) -> Self {
        State::Point {
            pos: [x, y],
            vel: [0.0, 0.0],
        }
    }

    /// Raw coordinates: `[x, y, vx, vy]` or `[i, j]`.
    pub fn coords(&self) -> Vec<f64> {
        match *self {
            State::Point { pos, vel } => vec![pos[0], pos[1], vel[0], vel[1]],
            State::Cell(c) => vec![c.i as f64, c.j as f64],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::Up, Move::Down, Move::Left, Move::Right, Move::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Move> {
        Move::ALL.get(k).copied()
    }

    /// Cell offset `(di, dj)`.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Move::Up => (0, -1),
            Move::Down => (0, 1),
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
            Move::Stay => (0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    /// Cartesian force, each component in `[-1, 1]`.
    Force([f64; 2]),
    Move(Move),
}

impl Action {
    /// Builds a force action with both components clamped to `[-1, 1]`.
    pub fn force(fx: f64, fy: f64) -> Self {
        Action::Force([fx.clamp(-1.0, 1.0), fy.clamp(-1.0, 1.0)])
    }
}

/// Maze layout plus physical constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub name: String,
    pub kind: MazeKind,
    /// `walls[row][col]`.
    walls: Vec<Vec<bool>>,
    pub cell_size: f64,
    pub dt: f64,
    pub v_max: f64,
}

impl MazeSpec {
    /// Parses a layout: `#` wall, `.` free, one row per line. Blank lines
    /// are ignored; `O`, `G` and spaces inside a row are not accepted.
    pub fn parse(name: &str, text: &str, kind: MazeKind) -> Result<Self> {
        let mut walls = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::with_capacity(line.len());
            for ch in line.chars() {
                match ch {
                    '#' => row.push(true),
                    '.' => row.push(false),
                    other => {
                        return Err(Error::Parse {
                            line: ln + 1,
                            msg: format!("unexpected character {other:?}"),
                        })
                    }
                }
            }
            walls.push(row);
        }
        Self::from_walls(name, walls, kind)
    }

    pub fn from_walls(name: &str, walls: Vec<Vec<bool>>, kind: MazeKind) -> Result<Self> {
        let spec = MazeSpec {
            name: name.to_string(),
            kind,
            walls,
            cell_size: 1.0,
            dt: DEFAULT_DT,
            v_max: DEFAULT_V_MAX,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One of the bundled layouts: `umaze`, `medium`, `large`, `two_room`,
    /// `room5` (3x3 free) and `grid5` (5x5 free).
    pub fn bundled(name: &str, kind: MazeKind) -> Result<Self> {
        let text = layouts::get(name)
            .ok_or_else(|| Error::Config(format!("unknown bundled maze {name:?}")))?;
        Self::parse(name, text, kind)
    }

    pub fn with_kind(&self, kind: MazeKind) -> Self {
        MazeSpec {
            kind,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.walls.len();
        if rows == 0 {
            return Err(Error::Config("maze has no rows".into()));
        }
        let cols = self.walls[0].len();
        if let Some(r) = self.walls.iter().position(|r| r.len() != cols) {
            return Err(Error::Parse {
                line: r + 1,
                msg: format!("row length {} differs from {}", self.walls[r].len(), cols),
            });
        }
        for j in 0..rows {
            for i in 0..cols {
                let border = i == 0 || j == 0 || i + 1 == cols || j + 1 == rows;
                if border && !self.walls[j][i] {
                    return Err(Error::Config(format!(
                        "boundary cell ({i}, {j}) of maze {:?} is not a wall",
                        self.name
                    )));
                }
            }
        }
        let free = self.free_cells();
        if free.is_empty() {
            return Err(Error::Config(format!("maze {:?} has no free cell", self.name)));
        }
        for c in &free {
            if self.component_size(*c) < 2 {
                return Err(Error::Config(format!(
                    "free cell ({}, {}) of maze {:?} is isolated",
                    c.i, c.j, self.name
                )));
            }
        }
        if !(self.cell_size > 0.0 && self.dt > 0.0 && self.v_max > 0.0) {
            return Err(Error::Config("cell_size, dt and v_max must be positive".into()));
        }
        if self.v_max * self.dt >= self.cell_size {
            return Err(Error::Config(
                "v_max * dt must be smaller than the cell size".into(),
            ));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.walls.len()
    }

    pub fn cols(&self) -> usize {
        self.walls[0].len()
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        c.j >= self.rows() || c.i >= self.cols() || self.walls[c.j][c.i]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_wall(c)
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for j in 0..self.rows() {
            for i in 0..self.cols() {
                if !self.walls[j][i] {
                    out.push(Cell::new(i, j));
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.walls {
            for &w in row {
                s.push(if w { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    fn component_size(&self, start: Cell) -> usize {
        let mut seen = vec![vec![false; self.cols()]; self.rows()];
        let mut queue = VecDeque::from([start]);
        seen[start.j][start.i] = true;
        let mut n = 0;
        while let Some(c) = queue.pop_front() {
            n += 1;
            for nb in self.neighbors(c) {
                if !seen[nb.j][nb.i] {
                    seen[nb.j][nb.i] = true;
                    queue.push_back(nb);
                }
            }
        }
        n
    }

    fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        [Move::Up, Move::Down, Move::Left, Move::Right]
            .into_iter()
            .map(move |m| self.shift(c, m))
            .filter(move |&n| n != c)
    }

    /// Target of a grid move; blocked moves return the same cell.
    pub fn shift(&self, c: Cell, m: Move) -> Cell {
        let (di, dj) = m.delta();
        let i = c.i as isize + di;
        let j = c.j as isize + dj;
        if i < 0 || j < 0 {
            return c;
        }
        let n = Cell::new(i as usize, j as usize);
        if self.is_free(n) {
            n
        } else {
            c
        }
    }

    /// Cell containing a continuous position.
    pub fn cell_of(&self, pos: [f64; 2]) -> Option<Cell> {
        let fx = (pos[0] / self.cell_size).floor();
        let fy = (pos[1] / self.cell_size).floor();
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        Some(Cell::new(fx as usize, fy as usize))
    }

    /// Cell containing a goal, snapping by the variant's convention.
    pub fn goal_cell(&self, g: &Goal) -> Option<Cell> {
        match self.kind {
            MazeKind::Continuous => self.cell_of(g.0),
            MazeKind::Discrete => {
                let (x, y) = (g.0[0].round(), g.0[1].round());
                if x < 0.0 || y < 0.0 {
                    None
                } else {
                    Some(Cell::new(x as usize, y as usize))
                }
            }
        }
    }

    /// Goal-space location of a cell: its centre (continuous) or its
    /// coordinates (discrete).
    pub fn cell_goal(&self, c: Cell) -> Goal {
        match self.kind {
            MazeKind::Continuous => Goal([
                (c.i as f64 + 0.5) * self.cell_size,
                (c.j as f64 + 0.5) * self.cell_size,
            ]),
            MazeKind::Discrete => Goal::from(c),
        }
    }

    /// Local Lipschitz constant of the continuous step in open space.
    pub fn lipschitz_constant(&self) -> f64 {
        1.0 + self.dt
    }

    pub fn state_is_valid(&self, s: &State) -> bool {
        match (self.kind, s) {
            (MazeKind::Continuous, State::Point { pos, vel }) => {
                pos.iter().chain(vel.iter()).all(|v| v.is_finite())
                    && vel.iter().all(|v| v.abs() <= self.v_max + 1e-12)
                    && self.cell_of(*pos).is_some_and(|c| self.is_free(c))
            }
            (MazeKind::Discrete, State::Cell(c)) => self.is_free(*c),
            _ => false,
        }
    }

    pub fn goal_is_valid(&self, g: &Goal) -> bool {
        g.0.iter().all(|v| v.is_finite()) && self.goal_cell(g).is_some_and(|c| self.is_free(c))
    }

    /// Ground-truth transition.
    pub fn step(&self, s: &State, a: &Action) -> Result<State> {
        if !self.state_is_valid(s) {
            return Err(Error::Precondition(format!(
                "state {s:?} is not valid for {} maze {:?}",
                self.kind, self.name
            )));
        }
        match (s, a) {
            (State::Point { pos, vel }, Action::Force(f)) => Ok(self.point_step(*pos, *vel, *f)),
            (State::Cell(c), Action::Move(m)) => Ok(State::Cell(self.shift(*c, *m))),
            _ => Err(Error::Precondition(format!(
                "action {a:?} does not match state {s:?}"
            ))),
        }
    }

    fn point_step(&self, pos: [f64; 2], vel: [f64; 2], force: [f64; 2]) -> State {
        let margin = 1e-6 * self.cell_size;
        let mut v = [0.0; 2];
        for k in 0..2 {
            let f = force[k].clamp(-1.0, 1.0);
            v[k] = (vel[k] + f * self.dt).clamp(-self.v_max, self.v_max);
        }
        let mut p = pos;
        // Axis-separated collision: x first, then y from the updated x.
        for k in 0..2 {
            let mut next = p;
            next[k] += v[k] * self.dt;
            let blocked = match self.cell_of(next) {
                Some(c) => self.is_wall(c),
                None => true,
            };
            if blocked {
                let here = (p[k] / self.cell_size).floor();
                next[k] = if v[k] > 0.0 {
                    (here + 1.0) * self.cell_size - margin
                } else {
                    here * self.cell_size + margin
                };
                v[k] = 0.0;
            }
            p = next;
        }
        State::Point { pos: p, vel: v }
    }

    /// All-pairs shortest path lengths between free cells.
    pub fn shortest_paths(&self) -> ShortestPaths {
        let cells = self.free_cells();
        let index: HashMap<Cell, usize> = cells.iter().enumerate().map(|(k, c)| (*c, k)).collect();
        let n = cells.len();
        let mut dist = vec![vec![None; n]; n];
        for (src, &c0) in cells.iter().enumerate() {
            let row = &mut dist[src];
            row[src] = Some(0u32);
            let mut queue = VecDeque::from([c0]);
            while let Some(c) = queue.pop_front() {
                let d = row[index[&c]].unwrap();
                for nb in self.neighbors(c) {
                    let k = index[&nb];
                    if row[k].is_none() {
                        row[k] = Some(d + 1);
                        queue.push_back(nb);
                    }
                }
            }
        }
        ShortestPaths { cells, index, dist }
    }

    /// Breadth-first reachability between the cells containing two goals.
    pub fn bfs_reachable(&self, from: &Goal, to: &Goal) -> Result<Reach> {
        let a = self.free_goal_cell(from)?;
        let b = self.free_goal_cell(to)?;
        let mut seen = HashMap::from([(a, 0usize)]);
        let mut queue = VecDeque::from([a]);
        while let Some(c) = queue.pop_front() {
            let d = seen[&c];
            if c == b {
                return Ok(Reach {
                    reachable: true,
                    length: Some(d),
                });
            }
            for nb in self.neighbors(c) {
                if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(nb) {
                    e.insert(d + 1);
                    queue.push_back(nb);
                }
            }
        }
        Ok(Reach {
            reachable: false,
            length: None,
        })
    }

    fn free_goal_cell(&self, g: &Goal) -> Result<Cell> {
        match self.goal_cell(g) {
            Some(c) if self.is_free(c) => Ok(c),
            _ => Err(Error::Precondition(format!(
                "goal {:?} is not inside a free cell of {:?}",
                g.0, self.name
            ))),
        }
    }

    /// BFS cell path from `a` to `b` inclusive, if connected.
    pub fn cell_path(&self, a: Cell, b: Cell) -> Option<Vec<Cell>> {
        let mut prev: HashMap<Cell, Cell> = HashMap::new();
        let mut queue = VecDeque::from([a]);
        prev.insert(a, a);
        while let Some(c) = queue.pop_front() {
            if c == b {
                let mut path = vec![b];
                let mut cur = b;
                while cur != a {
                    cur = prev[&cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for nb in self.neighbors(c) {
                if let std::collections::hash_map::Entry::Vacant(e) = prev.entry(nb) {
                    e.insert(c);
                    queue.push_back(nb);
                }
            }
        }
        None
    }
}

/// State-to-goal projection.
pub fn phi(s: &State) -> Goal {
    match *s {
        State::Point { pos, .. } => Goal(pos),
        State::Cell(c) => Goal::from(c),
    }
}

/// Sparse indicator reward: 1 iff `|phi(s) - g| < delta`.
pub fn reward(s: &State, g: &Goal, delta: f64) -> u8 {
    u8::from(phi(s).dist(g) < delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reach {
    pub reachable: bool,
    /// Hop count of a shortest path.
    pub length: Option<usize>,
}

/// Dense shortest-path table over free cells.
#[derive(Clone, Debug)]
pub struct ShortestPaths {
    pub cells: Vec<Cell>,
    index: HashMap<Cell, usize>,
    dist: Vec<Vec<Option<u32>>>,
}

impl ShortestPaths {
    pub fn index_of(&self, c: Cell) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn dist(&self, a: Cell, b: Cell) -> Option<u32> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        self.dist[ia][ib]
    }
}

pub mod layouts {
    pub const UMAZE: &str = "\
#####
#...#
###.#
#...#
#####
";

    pub const MEDIUM: &str = "\
########
#..##..#
#..#...#
##...###
#..#...#
#.#..#.#
#...#..#
########
";

    pub const LARGE: &str = "\
############
#....#.....#
#.##.#.#.#.#
#......#...#
#.####.###.#
#..#.#.....#
##.#.#.#.###
#..#...#...#
############
";

    /// Two vertical corridors with no connection between them.
    pub const TWO_ROOM: &str = "\
#####
#.#.#
#.#.#
#.#.#
#.#.#
#.#.#
#.#.#
#.#.#
#.#.#
#.#.#
#.#.#
#####
";

    pub const ROOM5: &str = "\
#####
#...#
#...#
#...#
#####
";

    pub const GRID5: &str = "\
#######
#.....#
#.....#
#.....#
#.....#
#.....#
#######
";

    /// `GRID5` with a wall down the middle column, open in the centre row.
    pub const GRID5_WALL: &str = "\
#######
#..#..#
#..#..#
#.....#
#..#..#
#..#..#
#######
";

    pub fn get(name: &str) -> Option<&'static str> {
        match name {
            "umaze" => Some(UMAZE),
            "medium" => Some(MEDIUM),
            "large" => Some(LARGE),
            "two_room" => Some(TWO_ROOM),
            "room5" => Some(ROOM5),
            "grid5" => Some(GRID5),
            "grid5_wall" => Some(GRID5_WALL),
            _ => None,
        }
    }

    pub const NAMES: [&str; 7] = ["umaze", "medium", "large", "two_room", "room5", "grid5", "grid5_wall"];
}
