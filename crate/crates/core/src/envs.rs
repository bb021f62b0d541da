//! Gridworld Dec-MDPs: joint foraging, the three-section coordination task,
//! the sparse-reward race against a scripted opponent, and the corridor.
//!
//! All tasks share one movement model: agents declare their intended move
//! simultaneously, contested cells go to the lower agent index, swaps and
//! moves into cells held by stationary bodies are cancelled.

use serde::Serialize;
use thiserror::Error;

use crate::config::ExperimentId;
use crate::rng::Rng;

pub const NUM_ACTIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
    Collect = 5,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
        Action::Collect,
    ];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay | Action::Collect => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, PartialOrd, Ord)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    /// 4-neighbourhood adjacency.
    pub fn adjacent(self, other: Pos) -> bool {
        self.manhattan(other) == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    JointForage,
    ThreeSection,
    SparseVersus,
    Corridor,
}

impl From<ExperimentId> for EnvKind {
    fn from(id: ExperimentId) -> Self {
        match id {
            ExperimentId::Foraging1 => EnvKind::JointForage,
            ExperimentId::Foraging2 => EnvKind::ThreeSection,
            ExperimentId::Foraging3 => EnvKind::SparseVersus,
            ExperimentId::Corridor => EnvKind::Corridor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SectionLock {
    Free,
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Apple {
    pub pos: Pos,
    pub level: u32,
    pub collected: bool,
}

/// Task constants. [`EnvParams::for_kind`] gives the standard layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvParams {
    pub width: usize,
    pub height: usize,
    pub episode_limit: u32,
    pub agent_levels: Vec<u32>,
    pub apple_count: usize,
    pub apple_level: u32,
    /// Penalty for a failed (uncoordinated) collect in joint foraging.
    pub penalty: f64,
    /// Total top-section reward `r` in the three-section task.
    pub top_reward: f64,
    /// Both-bottom reward `R`, with `r/2 < R < r`.
    pub bottom_reward: f64,
    /// Scripted opponent's random-move probability.
    pub opponent_epsilon: f64,
}

impl EnvParams {
    pub fn for_kind(kind: EnvKind) -> Self {
        let base = EnvParams {
            width: 8,
            height: 8,
            episode_limit: 50,
            agent_levels: vec![1, 1],
            apple_count: 0,
            apple_level: 1,
            penalty: 0.5,
            top_reward: 1.0,
            bottom_reward: 0.75,
            opponent_epsilon: 0.1,
        };
        match kind {
            EnvKind::JointForage => EnvParams {
                agent_levels: vec![1, 2],
                apple_count: 3,
                apple_level: 3,
                ..base
            },
            EnvKind::ThreeSection => EnvParams {
                width: 9,
                height: 9,
                ..base
            },
            EnvKind::SparseVersus => EnvParams {
                apple_count: 1,
                ..base
            },
            EnvKind::Corridor => EnvParams {
                width: 11,
                height: 5,
                episode_limit: 60,
                ..base
            },
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode (tick {tick}); reset first")]
    EpisodeDone { tick: u32 },
    #[error("joint action has {got} entries, expected {expected}")]
    ActionLength { got: usize, expected: usize },
    #[error("action index {index} for agent {agent} is out of range")]
    BadAction { agent: usize, index: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    pub collected: u32,
    pub failed_collects: u32,
    pub opponent_collected: bool,
    pub opponent_random_move: bool,
    pub goals_reached: u32,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub per_agent_reward: Vec<f64>,
    pub team_reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One line of the optional episode trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub tick: u32,
    pub positions: Vec<Pos>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

const CORRIDOR_ROW: usize = 2;
const CORRIDOR_X: std::ops::RangeInclusive<usize> = 4..=6;

#[derive(Debug, Clone)]
pub struct GridEnv {
    kind: EnvKind,
    params: EnvParams,
    agents: Vec<Pos>,
    opponent: Option<Pos>,
    apples: Vec<Apple>,
    locks: Vec<SectionLock>,
    /// Three-section: unvisited top tiles (row-major over the top band).
    top_tiles: Vec<bool>,
    special_used: bool,
    goals: Vec<Pos>,
    reached: Vec<bool>,
    tick: u32,
    done: bool,
    episode_successes: u32,
    rng: Rng,
}

impl GridEnv {
    pub fn new(kind: EnvKind, rng: Rng) -> Self {
        Self::with_params(kind, EnvParams::for_kind(kind), rng)
    }

    pub fn with_params(kind: EnvKind, params: EnvParams, rng: Rng) -> Self {
        let n = params.agent_levels.len();
        let mut env = Self {
            kind,
            agents: Vec::with_capacity(n),
            opponent: None,
            apples: Vec::new(),
            locks: vec![SectionLock::Free; n],
            top_tiles: Vec::new(),
            special_used: false,
            goals: Vec::new(),
            reached: vec![false; n],
            tick: 0,
            done: false,
            episode_successes: 0,
            rng,
            params,
        };
        env.reset();
        env
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn num_agents(&self) -> usize {
        self.params.agent_levels.len()
    }

    pub fn agents(&self) -> &[Pos] {
        &self.agents
    }

    pub fn opponent(&self) -> Option<Pos> {
        self.opponent
    }

    pub fn apples(&self) -> &[Apple] {
        &self.apples
    }

    pub fn locks(&self) -> &[SectionLock] {
        &self.locks
    }

    pub fn goals(&self) -> &[Pos] {
        &self.goals
    }

    pub fn tick(&self) -> u32 {
        self.tick
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn width(&self) -> usize {
        self.params.width
    }

    pub fn height(&self) -> usize {
        self.params.height
    }

    fn cells(&self) -> usize {
        self.params.width * self.params.height
    }

    fn cell_index(&self, p: Pos) -> usize {
        p.y * self.params.width + p.x
    }

    fn band_height(&self) -> usize {
        self.params.height / 3
    }

    fn band(&self, p: Pos) -> SectionLock {
        let b = self.band_height();
        if p.y < b {
            SectionLock::Top
        } else if p.y >= self.params.height - b {
            SectionLock::Bottom
        } else {
            SectionLock::Free
        }
    }

    /// Number of tiles in one section of the three-section grid.
    pub fn section_tiles(&self) -> usize {
        self.band_height() * self.params.width
    }

    /// Bottom-right tile of the three-section grid.
    pub fn special_tile(&self) -> Pos {
        Pos::new(self.params.width - 1, self.params.height - 1)
    }

    pub fn is_corridor(&self, p: Pos) -> bool {
        self.kind == EnvKind::Corridor && p.y == CORRIDOR_ROW && CORRIDOR_X.contains(&p.x)
    }

    fn is_wall(&self, p: Pos) -> bool {
        self.kind == EnvKind::Corridor && CORRIDOR_X.contains(&p.x) && p.y != CORRIDOR_ROW
    }

    fn apple_at(&self, p: Pos) -> bool {
        self.apples.iter().any(|a| !a.collected && a.pos == p)
    }

    fn random_cell(&mut self, xs: std::ops::Range<usize>, ys: std::ops::Range<usize>, taken: &[Pos]) -> Pos {
        loop {
            let x = xs.start + self.rng.below(xs.len());
            let y = ys.start + self.rng.below(ys.len());
            let p = Pos::new(x, y);
            if !taken.contains(&p) && !self.is_wall(p) {
                return p;
            }
        }
    }

    /// Places agents and apples per the task rules and returns the state encoding.
    pub fn reset(&mut self) -> Vec<f64> {
        let n = self.num_agents();
        let (w, h) = (self.params.width, self.params.height);
        self.tick = 0;
        self.done = false;
        self.episode_successes = 0;
        self.locks = vec![SectionLock::Free; n];
        self.reached = vec![false; n];
        self.special_used = false;
        self.apples.clear();
        self.agents.clear();
        self.opponent = None;
        self.goals.clear();
        self.top_tiles.clear();

        let mut taken: Vec<Pos> = Vec::new();
        match self.kind {
            EnvKind::JointForage | EnvKind::SparseVersus => {
                // Apples sit off the border so their full 4-neighbourhood exists,
                // and never next to each other.
                while self.apples.len() < self.params.apple_count {
                    let p = self.random_cell(1..w - 1, 1..h - 1, &taken);
                    if self.apples.iter().any(|a| a.pos.manhattan(p) <= 2) {
                        continue;
                    }
                    taken.push(p);
                    self.apples.push(Apple {
                        pos: p,
                        level: self.params.apple_level,
                        collected: false,
                    });
                }
                for _ in 0..n {
                    let p = self.random_cell(0..w, 0..h, &taken);
                    taken.push(p);
                    self.agents.push(p);
                }
                if self.kind == EnvKind::SparseVersus {
                    let p = self.random_cell(0..w, 0..h, &taken);
                    self.opponent = Some(p);
                }
            }
            EnvKind::ThreeSection => {
                let b = self.band_height();
                for _ in 0..n {
                    let p = self.random_cell(0..w, b..h - b, &taken);
                    taken.push(p);
                    self.agents.push(p);
                }
                self.top_tiles = vec![true; self.section_tiles()];
            }
            EnvKind::Corridor => {
                self.goals = vec![Pos::new(w - 1, CORRIDOR_ROW), Pos::new(0, CORRIDOR_ROW)];
                taken.extend(self.goals.iter().copied());
                let left = 0..*CORRIDOR_X.start();
                let right = CORRIDOR_X.end() + 1..w;
                for i in 0..n {
                    let xs = if i % 2 == 0 { left.clone() } else { right.clone() };
                    let p = self.random_cell(xs, 0..h, &taken);
                    taken.push(p);
                    self.agents.push(p);
                }
            }
        }
        self.encode_state()
    }

    /// Fixed-length dimension of [`encode_state`](Self::encode_state) for this layout.
    pub fn state_dim(&self) -> usize {
        let bodies = self.num_agents() + usize::from(self.kind == EnvKind::SparseVersus);
        bodies * self.cells() + self.cells() + self.params.apple_count + 1 + self.flag_count()
    }

    fn flag_count(&self) -> usize {
        match self.kind {
            EnvKind::ThreeSection => 2 * self.num_agents(),
            EnvKind::Corridor => self.num_agents(),
            _ => 0,
        }
    }

    /// One-hot body positions, reward-tile occupancy, apple levels, elapsed
    /// time and task flags.
    pub fn encode_state(&self) -> Vec<f64> {
        let cells = self.cells();
        let mut v = vec![0.0; self.state_dim()];
        let mut off = 0;
        for p in self.agents.iter().chain(self.opponent.iter()) {
            v[off + self.cell_index(*p)] = 1.0;
            off += cells;
        }
        match self.kind {
            EnvKind::JointForage | EnvKind::SparseVersus => {
                for a in self.apples.iter().filter(|a| !a.collected) {
                    v[off + self.cell_index(a.pos)] = 1.0;
                }
            }
            EnvKind::ThreeSection => {
                for (i, &open) in self.top_tiles.iter().enumerate() {
                    if open {
                        v[off + i] = 1.0;
                    }
                }
                if !self.special_used {
                    v[off + self.cell_index(self.special_tile())] = 1.0;
                }
            }
            EnvKind::Corridor => {
                for (g, &r) in self.goals.iter().zip(&self.reached) {
                    if !r {
                        v[off + self.cell_index(*g)] = 1.0;
                    }
                }
            }
        }
        off += cells;
        let max_level = self.params.apple_level.max(1) as f64;
        for a in &self.apples {
            if !a.collected {
                v[off] = a.level as f64 / max_level;
            }
            off += 1;
        }
        v[off] = self.tick as f64 / self.params.episode_limit as f64;
        off += 1;
        match self.kind {
            EnvKind::ThreeSection => {
                for lock in &self.locks {
                    v[off] = f64::from(u8::from(*lock == SectionLock::Top));
                    v[off + 1] = f64::from(u8::from(*lock == SectionLock::Bottom));
                    off += 2;
                }
            }
            EnvKind::Corridor => {
                for &r in &self.reached {
                    v[off] = f64::from(u8::from(r));
                    off += 1;
                }
            }
            _ => {}
        }
        debug_assert_eq!(off, v.len());
        v
    }

    /// Exact configuration key (positions plus task progress) for visit counting.
    pub fn grid_key(&self) -> Vec<u32> {
        let mut key: Vec<u32> = self
            .agents
            .iter()
            .chain(self.opponent.iter())
            .map(|p| self.cell_index(*p) as u32)
            .collect();
        key.extend(self.apples.iter().map(|a| u32::from(a.collected)));
        match self.kind {
            EnvKind::ThreeSection => {
                key.extend(self.locks.iter().map(|l| *l as u32));
                key.extend(self.top_tiles.iter().map(|&t| u32::from(t)));
            }
            EnvKind::Corridor => key.extend(self.reached.iter().map(|&r| u32::from(r))),
            _ => {}
        }
        key
    }

    /// Greedy Manhattan step toward the apple (ties: up, left, down, right),
    /// `collect` when adjacent, and a uniformly random move with probability
    /// `opponent_epsilon`. Returns the action and whether the random branch fired.
    pub fn scripted_opponent(&self, rng: &mut Rng) -> (Action, bool) {
        let Some(me) = self.opponent else {
            return (Action::Stay, false);
        };
        if rng.bernoulli(self.params.opponent_epsilon) {
            let moves = [Action::Up, Action::Down, Action::Left, Action::Right];
            return (moves[rng.below(4)], true);
        }
        let Some(apple) = self.apples.iter().find(|a| !a.collected) else {
            return (Action::Stay, false);
        };
        if me.adjacent(apple.pos) {
            return (Action::Collect, false);
        }
        let here = me.manhattan(apple.pos);
        for a in [Action::Up, Action::Left, Action::Down, Action::Right] {
            if let Some(t) = self.target(me, a) {
                if t.manhattan(apple.pos) < here {
                    return (a, false);
                }
            }
        }
        (Action::Stay, false)
    }

    fn target(&self, from: Pos, a: Action) -> Option<Pos> {
        let (dx, dy) = a.delta();
        let x = from.x as i64 + dx;
        let y = from.y as i64 + dy;
        if x < 0 || y < 0 || x >= self.params.width as i64 || y >= self.params.height as i64 {
            return None;
        }
        Some(Pos::new(x as usize, y as usize))
    }

    /// Resolves simultaneous moves for all bodies (agents, then opponent).
    fn resolve_moves(&self, positions: &[Pos], intents: &[Action]) -> Vec<Pos> {
        let n = positions.len();
        let mut targets: Vec<Pos> = positions
            .iter()
            .zip(intents)
            .enumerate()
            .map(|(i, (&p, &a))| match self.target(p, a) {
                Some(t) if t != p && !self.is_wall(t) && !self.apple_at(t) && !self.move_locked(i, t) => t,
                _ => p,
            })
            .collect();

        loop {
            let mut changed = false;
            for i in 0..n {
                if targets[i] == positions[i] {
                    continue;
                }
                let blocked = (0..n).filter(|&j| j != i).any(|j| {
                    let contested = targets[j] == targets[i] && (targets[j] == positions[j] || j < i);
                    let swap = targets[i] == positions[j] && targets[j] == positions[i];
                    contested || swap
                });
                if blocked {
                    targets[i] = positions[i];
                    changed = true;
                }
            }
            if self.kind == EnvKind::Corridor {
                // Bodies already inside keep their place, then the lowest-index entrant.
                let mut occupant = (0..n).find(|&i| self.is_corridor(positions[i]) && self.is_corridor(targets[i]));
                for i in 0..n {
                    if self.is_corridor(targets[i]) && !self.is_corridor(positions[i]) {
                        match occupant {
                            None => occupant = Some(i),
                            Some(o) if o != i => {
                                targets[i] = positions[i];
                                changed = true;
                            }
                            _ => {}
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        targets
    }

    fn move_locked(&self, body: usize, t: Pos) -> bool {
        self.kind == EnvKind::ThreeSection
            && body < self.locks.len()
            && self.locks[body] != SectionLock::Free
            && self.band(t) == SectionLock::Free
    }

    pub fn step(&mut self, joint: &[usize]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone { tick: self.tick });
        }
        let n = self.num_agents();
        if joint.len() != n {
            return Err(EnvError::ActionLength {
                got: joint.len(),
                expected: n,
            });
        }
        let mut actions = Vec::with_capacity(n + 1);
        for (agent, &index) in joint.iter().enumerate() {
            actions.push(Action::from_index(index).ok_or(EnvError::BadAction { agent, index })?);
        }

        let mut rewards = vec![0.0; n];
        let mut team = 0.0;
        let mut info = StepInfo::default();

        match self.kind {
            EnvKind::JointForage => self.collect_joint(&actions, &mut rewards, &mut team, &mut info),
            EnvKind::SparseVersus => {
                let mut opp_rng = self.rng.clone();
                let (opp_action, random) = self.scripted_opponent(&mut opp_rng);
                self.rng = opp_rng;
                info.opponent_random_move = random;
                actions.push(opp_action);
                self.collect_race(&actions, &mut rewards, &mut team, &mut info);
            }
            _ => {}
        }

        if !self.done {
            let mut bodies: Vec<Pos> = self.agents.clone();
            bodies.extend(self.opponent.iter());
            let intents: Vec<Action> = actions
                .iter()
                .enumerate()
                .map(|(i, &a)| if i < n && self.reached[i] { Action::Stay } else { a })
                .collect();
            let moved = self.resolve_moves(&bodies, &intents);
            self.agents.copy_from_slice(&moved[..n]);
            if self.opponent.is_some() {
                self.opponent = Some(moved[n]);
            }
        }

        match self.kind {
            EnvKind::ThreeSection => self.three_section_rewards(&mut rewards, &mut team, &mut info),
            EnvKind::Corridor => self.corridor_rewards(&mut rewards, &mut team, &mut info),
            _ => {}
        }

        self.tick += 1;
        if self.tick >= self.params.episode_limit {
            self.done = true;
        }
        Ok(StepResult {
            next_state: self.encode_state(),
            per_agent_reward: rewards,
            team_reward: team,
            done: self.done,
            info,
        })
    }

    fn collect_joint(&mut self, actions: &[Action], rewards: &mut [f64], team: &mut f64, info: &mut StepInfo) {
        let n = self.num_agents();
        let mut succeeded = vec![false; n];
        let mut attempted = vec![false; n];
        for k in 0..self.apples.len() {
            if self.apples[k].collected {
                continue;
            }
            let apple = self.apples[k];
            let collectors: Vec<usize> = (0..n)
                .filter(|&i| actions[i] == Action::Collect && self.agents[i].adjacent(apple.pos))
                .collect();
            if collectors.is_empty() {
                continue;
            }
            let level: u32 = collectors.iter().map(|&i| self.params.agent_levels[i]).sum();
            if collectors.len() == n && level >= apple.level {
                self.apples[k].collected = true;
                info.collected += 1;
                *team += 1.0;
                for r in rewards.iter_mut() {
                    *r += 1.0;
                }
                for &i in &collectors {
                    succeeded[i] = true;
                }
            } else {
                for &i in &collectors {
                    attempted[i] = true;
                }
            }
        }
        for i in 0..n {
            if attempted[i] && !succeeded[i] {
                rewards[i] -= self.params.penalty;
                *team -= self.params.penalty;
                info.failed_collects += 1;
            }
        }
        self.episode_successes += info.collected;
        if self.apples.iter().all(|a| a.collected) {
            self.done = true;
            info.success = true;
        }
    }

    fn collect_race(&mut self, actions: &[Action], rewards: &mut [f64], team: &mut f64, info: &mut StepInfo) {
        let n = self.num_agents();
        let Some(apple) = self.apples.iter().find(|a| !a.collected).copied() else {
            return;
        };
        let team_collects = (0..n).any(|i| actions[i] == Action::Collect && self.agents[i].adjacent(apple.pos));
        let opp_collects = self
            .opponent
            .map(|o| actions[n] == Action::Collect && o.adjacent(apple.pos))
            .unwrap_or(false);
        if !(team_collects || opp_collects) {
            return;
        }
        for a in self.apples.iter_mut() {
            a.collected = true;
        }
        self.done = true;
        info.opponent_collected = opp_collects;
        if team_collects && !opp_collects {
            info.collected = 1;
            info.success = true;
            *team += 1.0;
            for r in rewards.iter_mut() {
                *r += 1.0;
            }
        }
    }

    fn three_section_rewards(&mut self, rewards: &mut [f64], team: &mut f64, info: &mut StepInfo) {
        let n = self.num_agents();
        for i in 0..n {
            if self.locks[i] == SectionLock::Free {
                self.locks[i] = self.band(self.agents[i]);
            }
        }
        let per_tile = self.params.top_reward / self.section_tiles() as f64;
        for i in 0..n {
            let p = self.agents[i];
            if self.band(p) != SectionLock::Top {
                continue;
            }
            let idx = self.cell_index(p);
            if !self.top_tiles[idx] {
                continue;
            }
            self.top_tiles[idx] = false;
            rewards[i] += per_tile;
            *team += per_tile;
            info.collected += 1;
            for j in (0..n).filter(|&j| j != i) {
                if self.band(self.agents[j]) == SectionLock::Bottom {
                    rewards[j] -= per_tile;
                    *team -= per_tile;
                }
            }
        }
        let all_bottom = self.agents.iter().all(|&p| self.band(p) == SectionLock::Bottom);
        if all_bottom && !self.special_used && self.agents.contains(&self.special_tile()) {
            self.special_used = true;
            for r in rewards.iter_mut() {
                *r += self.params.bottom_reward;
            }
            *team += self.params.bottom_reward * n as f64;
            info.success = true;
            self.done = true;
        }
    }

    fn corridor_rewards(&mut self, rewards: &mut [f64], team: &mut f64, info: &mut StepInfo) {
        for i in 0..self.num_agents() {
            if !self.reached[i] && self.agents[i] == self.goals[i] {
                self.reached[i] = true;
                rewards[i] += 1.0;
                *team += 1.0;
                info.goals_reached += 1;
            }
        }
        if self.reached.iter().all(|&r| r) {
            info.success = true;
            self.done = true;
        }
    }

    // Scenario setup, used by tests and fixtures.

    pub fn set_agents(&mut self, agents: &[Pos]) {
        assert_eq!(agents.len(), self.num_agents());
        self.agents = agents.to_vec();
        for i in 0..agents.len() {
            self.locks[i] = match self.kind {
                EnvKind::ThreeSection => self.band(agents[i]),
                _ => SectionLock::Free,
            };
        }
    }

    /// Replaces the apples; the encoding's apple-level slots follow the new count.
    pub fn set_apples(&mut self, apples: &[Pos]) {
        self.params.apple_count = apples.len();
        self.apples = apples
            .iter()
            .map(|&pos| Apple {
                pos,
                level: self.params.apple_level,
                collected: false,
            })
            .collect();
    }

    pub fn set_opponent(&mut self, p: Pos) {
        self.opponent = Some(p);
    }

    pub fn trace_record(&self, actions: &[usize], rewards: &[f64]) -> TraceRecord {
        TraceRecord {
            tick: self.tick,
            positions: self.agents.iter().chain(self.opponent.iter()).copied().collect(),
            actions: actions.to_vec(),
            rewards: rewards.to_vec(),
        }
    }
}
