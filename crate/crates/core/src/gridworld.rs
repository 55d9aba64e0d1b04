//! Deterministic 4-connected grid worlds with candidate goals.
//!
//! Map files are ASCII: `#` blocked, `.` free, `S` start, `0`-`9` candidate
//! goals (the digit is the goal index). The true goal is chosen by the
//! experiment, never by the map file.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("map parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("goal {0} is unreachable from the start")]
    UnreachableGoal(usize),
    #[error("map has no start cell")]
    NoStart,
    #[error("map needs at least two candidate goals, found {0}")]
    TooFewGoals(usize),
    #[error("true goal index {index} out of range for {count} goals")]
    BadTrueGoal { index: usize, count: usize },
    #[error("cell {0} is blocked")]
    BlockedOrigin(Cell),
    #[error("no path from {0} to {1}")]
    Unreachable(Cell, Cell),
    #[error("invalid reward settings: {0}")]
    BadRewards(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Moves in tie-breaking priority order. `y` grows downwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub step_cost: f64,
    pub goal_reward: f64,
    pub horizon: usize,
}

impl RewardSpec {
    pub fn for_size(width: usize, height: usize) -> Self {
        Self {
            step_cost: -1.0,
            goal_reward: 100.0,
            horizon: 4 * (width + height),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    blocked: Vec<bool>,
    goals: Vec<Cell>,
    true_goal: usize,
    start: Cell,
    rewards: RewardSpec,
}

impl GridMap {
    /// Parses and validates a map. The true goal defaults to index 0.
    pub fn parse(text: &str) -> Result<Self, GridError> {
        let rows: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(GridError::Parse {
                line: 1,
                message: "empty map".into(),
            });
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut blocked = vec![false; width * height];
        let mut goal_slots: [Option<Cell>; 10] = [None; 10];
        let mut start = None;
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(GridError::Parse {
                    line: y + 1,
                    message: format!("row has {} cells, expected {width}", row.chars().count()),
                });
            }
            for (x, ch) in row.chars().enumerate() {
                let cell = Cell::new(x, y);
                match ch {
                    '#' => blocked[y * width + x] = true,
                    '.' => {}
                    'S' => {
                        if start.replace(cell).is_some() {
                            return Err(GridError::Parse {
                                line: y + 1,
                                message: "more than one start".into(),
                            });
                        }
                    }
                    '0'..='9' => {
                        let idx = ch as usize - '0' as usize;
                        if goal_slots[idx].replace(cell).is_some() {
                            return Err(GridError::Parse {
                                line: y + 1,
                                message: format!("goal {idx} appears twice"),
                            });
                        }
                    }
                    other => {
                        return Err(GridError::Parse {
                            line: y + 1,
                            message: format!("unknown glyph {other:?}"),
                        })
                    }
                }
            }
        }
        let count = goal_slots.iter().filter(|g| g.is_some()).count();
        if goal_slots[..count].iter().any(|g| g.is_none()) {
            return Err(GridError::Parse {
                line: 1,
                message: "goal digits must be contiguous from 0".into(),
            });
        }
        let goals: Vec<Cell> = goal_slots[..count].iter().map(|g| g.unwrap()).collect();
        let start = start.ok_or(GridError::NoStart)?;
        if goals.len() < 2 {
            return Err(GridError::TooFewGoals(goals.len()));
        }
        let map = Self {
            width,
            height,
            blocked,
            goals,
            true_goal: 0,
            start,
            rewards: RewardSpec::for_size(width, height),
        };
        let dist = map.distances_from(start);
        let mut longest = 0;
        for (i, g) in map.goals.iter().enumerate() {
            match dist[map.index(*g)] {
                Some(d) => longest = longest.max(d),
                None => return Err(GridError::UnreachableGoal(i)),
            }
        }
        if map.rewards.horizon < longest {
            return Err(GridError::BadRewards(format!(
                "horizon {} shorter than path {longest}",
                map.rewards.horizon
            )));
        }
        Ok(map)
    }

    pub fn with_true_goal(mut self, index: usize) -> Result<Self, GridError> {
        if index >= self.goals.len() {
            return Err(GridError::BadTrueGoal {
                index,
                count: self.goals.len(),
            });
        }
        self.true_goal = index;
        Ok(self)
    }

    pub fn with_rewards(mut self, rewards: RewardSpec) -> Result<Self, GridError> {
        if !(rewards.step_cost < 0.0) || !(rewards.goal_reward > 0.0) {
            return Err(GridError::BadRewards(
                "step cost must be negative and goal reward positive".into(),
            ));
        }
        let dist = self.distances_from(self.start);
        let longest = self
            .goals
            .iter()
            .filter_map(|g| dist[self.index(*g)])
            .max()
            .unwrap_or(0);
        if rewards.horizon < longest {
            return Err(GridError::BadRewards(format!(
                "horizon {} shorter than path {longest}",
                rewards.horizon
            )));
        }
        self.rewards = rewards;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn goals(&self) -> &[Cell] {
        &self.goals
    }

    pub fn goal_count(&self) -> usize {
        self.goals.len()
    }

    pub fn true_goal_index(&self) -> usize {
        self.true_goal
    }

    pub fn true_goal(&self) -> Cell {
        self.goals[self.true_goal]
    }

    pub fn rewards(&self) -> RewardSpec {
        self.rewards
    }

    pub fn horizon(&self) -> usize {
        self.rewards.horizon
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.blocked[self.index(c)]
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|b| **b).count()
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.cell_count())
            .map(|i| self.cell_at(i))
            .filter(|c| self.is_free(*c))
            .collect()
    }

    /// Target of `action` from `c`, or `c` itself if the move is blocked.
    pub fn next_cell(&self, c: Cell, action: Action) -> Cell {
        let target = match action {
            Action::Up if c.y > 0 => Cell::new(c.x, c.y - 1),
            Action::Down => Cell::new(c.x, c.y + 1),
            Action::Left if c.x > 0 => Cell::new(c.x - 1, c.y),
            Action::Right => Cell::new(c.x + 1, c.y),
            _ => c,
        };
        if self.is_free(target) {
            target
        } else {
            c
        }
    }

    /// One environment transition. `done` reports arrival at the true goal;
    /// the caller tracks the horizon.
    pub fn step(&self, c: Cell, action: Action) -> Result<(Cell, f64, bool), GridError> {
        if !self.is_free(c) {
            return Err(GridError::BlockedOrigin(c));
        }
        let next = self.next_cell(c, action);
        let done = next == self.true_goal();
        let mut reward = self.rewards.step_cost;
        if done {
            reward += self.rewards.goal_reward;
        }
        Ok((next, reward, done))
    }

    /// BFS step counts from `source` to every cell (`None` when unreachable).
    pub fn distances_from(&self, source: Cell) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cell_count()];
        if !self.is_free(source) {
            return dist;
        }
        let mut queue = VecDeque::new();
        dist[self.index(source)] = Some(0);
        queue.push_back(source);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.index(c)].unwrap();
            for a in Action::ALL {
                let n = self.next_cell(c, a);
                let slot = &mut dist[self.index(n)];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Minimal-length path including both endpoints. Ties go to the first
    /// action in `up, down, left, right` order.
    pub fn shortest_path(&self, from: Cell, to: Cell) -> Result<Vec<Cell>, GridError> {
        if !self.is_free(from) {
            return Err(GridError::BlockedOrigin(from));
        }
        let dist = self.distances_from(to);
        let Some(mut d) = dist[self.index(from)] else {
            return Err(GridError::Unreachable(from, to));
        };
        let mut path = vec![from];
        let mut c = from;
        while d > 0 {
            let next = Action::ALL
                .iter()
                .map(|a| self.next_cell(c, *a))
                .find(|n| dist[self.index(*n)] == Some(d - 1))
                .expect("BFS guarantees a downhill neighbour");
            path.push(next);
            c = next;
            d -= 1;
        }
        Ok(path)
    }

    /// Renders the map back to its file format.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                let ch = if c == self.start {
                    'S'
                } else if let Some(i) = self.goals.iter().position(|g| *g == c) {
                    char::from(b'0' + i as u8)
                } else if self.blocked[self.index(c)] {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Parses a map file's contents; alias kept for the CLI's vocabulary.
pub fn load_map(text: &str) -> Result<GridMap, GridError> {
    GridMap::parse(text)
}

/// Maps shipped with the crate. The obstacle layouts approximate the
/// layouts used in published grid experiments.
pub mod bundled {
    pub const GRID15: &str = include_str!("../maps/grid15.map");
    pub const GRID49: &str = include_str!("../maps/grid49.map");
    pub const GRID100: &str = include_str!("../maps/grid100.map");
    pub const PIRATE49: &str = include_str!("../maps/pirate49.map");

    pub fn by_name(name: &str) -> Option<&'static str> {
        match name {
            "grid15" => Some(GRID15),
            "grid49" => Some(GRID49),
            "grid100" => Some(GRID100),
            "pirate49" => Some(PIRATE49),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub cell: Cell,
    pub action: Action,
}

/// Ordered `(cell, action)` pairs plus the cell reached after the last one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminal: Cell,
    pub episode: usize,
    pub reached_goal: bool,
}

impl Trajectory {
    pub fn empty_at(cell: Cell) -> Self {
        Self {
            steps: Vec::new(),
            terminal: cell,
            episode: 0,
            reached_goal: false,
        }
    }

    /// Builds the trajectory that walks `cells` (consecutive cells must be
    /// 4-neighbours).
    pub fn from_cells(cells: &[Cell], reached_goal: bool) -> Self {
        assert!(!cells.is_empty());
        let steps = cells
            .windows(2)
            .map(|w| Step {
                cell: w[0],
                action: direction(w[0], w[1]).expect("cells must be adjacent"),
            })
            .collect();
        Self {
            steps,
            terminal: *cells.last().unwrap(),
            episode: 0,
            reached_goal,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn start(&self) -> Cell {
        self.steps.first().map(|s| s.cell).unwrap_or(self.terminal)
    }

    /// Every visited cell, terminal included (`len() + 1` entries).
    pub fn cells(&self) -> Vec<Cell> {
        let mut v: Vec<Cell> = self.steps.iter().map(|s| s.cell).collect();
        v.push(self.terminal);
        v
    }

    /// First `len` steps; the terminal becomes the cell after them.
    pub fn prefix(&self, len: usize) -> Trajectory {
        let len = len.min(self.steps.len());
        let terminal = if len < self.steps.len() {
            self.steps[len].cell
        } else {
            self.terminal
        };
        Trajectory {
            steps: self.steps[..len].to_vec(),
            terminal,
            episode: self.episode,
            reached_goal: self.reached_goal && len == self.steps.len(),
        }
    }

    /// Checks dynamics consistency, blocked cells and the horizon.
    pub fn is_valid_on(&self, map: &GridMap) -> bool {
        let cells = self.cells();
        cells.iter().all(|c| map.is_free(*c))
            && self
                .steps
                .iter()
                .zip(cells.iter().skip(1))
                .all(|(s, next)| map.next_cell(s.cell, s.action) == *next)
            && self.len() <= map.horizon()
    }
}

fn direction(from: Cell, to: Cell) -> Option<Action> {
    match (to.x as isize - from.x as isize, to.y as isize - from.y as isize) {
        (0, -1) => Some(Action::Up),
        (0, 1) => Some(Action::Down),
        (-1, 0) => Some(Action::Left),
        (1, 0) => Some(Action::Right),
        _ => None,
    }
}

/// Exact optimal action values for every candidate goal's reward function.
///
/// Under goal `i`'s reward, `V_i(s) = goal_reward + d_i(s) * step_cost`
/// where `d_i` is the BFS distance, and `Q_i(s, a) = step_cost + V_i(s')`.
/// Values are undiscounted.
#[derive(Debug, Clone)]
pub struct QTables {
    width: usize,
    values: Vec<Vec<f64>>,
    q: Vec<Vec<[f64; 4]>>,
}

/// Value assigned to cells that cannot reach a goal.
pub const UNREACHABLE_VALUE: f64 = -1e9;

impl QTables {
    pub fn goal_count(&self) -> usize {
        self.q.len()
    }

    fn idx(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn value(&self, goal: usize, c: Cell) -> f64 {
        self.values[goal][self.idx(c)]
    }

    pub fn q(&self, goal: usize, c: Cell, a: Action) -> f64 {
        self.q[goal][self.idx(c)][a.index()]
    }

    pub fn q_row(&self, goal: usize, c: Cell) -> [f64; 4] {
        self.q[goal][self.idx(c)]
    }

    pub fn max_q(&self, goal: usize, c: Cell) -> f64 {
        self.q_row(goal, c).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn optimal_q_tables(map: &GridMap) -> QTables {
    let r = map.rewards();
    let mut values = Vec::with_capacity(map.goal_count());
    let mut q = Vec::with_capacity(map.goal_count());
    for g in map.goals() {
        let dist = map.distances_from(*g);
        let v: Vec<f64> = dist
            .iter()
            .map(|d| match d {
                Some(d) => r.goal_reward + *d as f64 * r.step_cost,
                None => UNREACHABLE_VALUE,
            })
            .collect();
        let table = (0..map.cell_count())
            .map(|i| {
                let c = map.cell_at(i);
                let mut row = [UNREACHABLE_VALUE; 4];
                if map.is_free(c) {
                    for a in Action::ALL {
                        let n = map.next_cell(c, a);
                        row[a.index()] = r.step_cost + v[map.index(n)];
                    }
                }
                row
            })
            .collect();
        values.push(v);
        q.push(table);
    }
    QTables {
        width: map.width(),
        values,
        q,
    }
}
