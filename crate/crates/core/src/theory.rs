//! Tabular switching-control games: intervention and Bellman operators on the
//! augmented value `V(s, I)`, value iteration, the Heaviside switching rule,
//! exact policy-invariance audits, and linear function approximation of the
//! switching Q-function.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::rngs::SmallRng;
use rand::{Rng as _, RngCore, SeedableRng};

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("P[{state}][{action}] sums to {sum} (must be 1 ± 1e-12)")]
    RowSum { state: usize, action: usize, sum: f64 },
    #[error("P[{state}][{action}] has a negative or non-finite entry")]
    BadProbability { state: usize, action: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("gamma {0} outside (0, 1)")]
    Gamma(f64),
    #[error("enumeration too large: {states} states, {actions} actions (cap 4 and 3)")]
    EnumerationCap { states: usize, actions: usize },
    #[error("linear iterate diverged at step {step}: ‖r‖ = {norm}")]
    Divergence { step: u64, norm: f64 },
    #[error("basis is rank deficient (rank {rank} < {p})")]
    RankDeficient { rank: usize, p: usize },
    #[error("fixture {path}: {reason}")]
    Fixture { path: String, reason: String },
}

/// Finite game with a Generator: transitions, rewards, intrinsic values per
/// channel θ, a switch cost and a novelty bonus table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularGame {
    pub n_states: usize,
    pub n_joint_actions: usize,
    /// `p[s][a][s']`.
    pub p: Vec<Vec<Vec<f64>>>,
    /// `r[s][a]`.
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
    /// `f_table[s][θ]`.
    pub f_table: Vec<Vec<f64>>,
    pub switch_cost: f64,
    /// `l_table[s][a]`; all zeros when absent.
    #[serde(default)]
    pub l_table: Vec<Vec<f64>>,
}

/// `V(s, I)` stored as `v[2s + I]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedValue {
    pub n_states: usize,
    pub v: Vec<f64>,
}

impl AugmentedValue {
    pub fn zeros(n_states: usize) -> Self {
        Self {
            n_states,
            v: vec![0.0; 2 * n_states],
        }
    }

    pub fn constant(n_states: usize, c: f64) -> Self {
        Self {
            n_states,
            v: vec![c; 2 * n_states],
        }
    }

    pub fn get(&self, s: usize, i: usize) -> f64 {
        self.v[2 * s + i]
    }

    pub fn set(&mut self, s: usize, i: usize, x: f64) {
        self.v[2 * s + i] = x;
    }

    pub fn sup_dist(&self, other: &AugmentedValue) -> f64 {
        self.v
            .iter()
            .zip(&other.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl TabularGame {
    pub fn m(&self) -> usize {
        self.f_table.first().map_or(0, Vec::len)
    }

    pub fn l(&self, s: usize, a: usize) -> f64 {
        self.l_table.get(s).and_then(|row| row.get(a)).copied().unwrap_or(0.0)
    }

    /// `max_θ F(s, θ)`.
    pub fn f_best(&self, s: usize) -> f64 {
        self.f_table[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let (ns, na) = (self.n_states, self.n_joint_actions);
        if ns == 0 || na == 0 {
            return Err(TheoryError::Shape("empty game".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TheoryError::Gamma(self.gamma));
        }
        if self.p.len() != ns || self.r.len() != ns || self.f_table.len() != ns {
            return Err(TheoryError::Shape(format!(
                "expected {ns} state rows in p, r and f_table"
            )));
        }
        let m = self.m();
        if m == 0 {
            return Err(TheoryError::Shape("f_table needs at least one channel".into()));
        }
        if !self.l_table.is_empty() && (self.l_table.len() != ns || self.l_table.iter().any(|row| row.len() != na)) {
            return Err(TheoryError::Shape(format!("l_table must be {ns}×{na}")));
        }
        for s in 0..ns {
            if self.p[s].len() != na || self.r[s].len() != na || self.f_table[s].len() != m {
                return Err(TheoryError::Shape(format!("row {s} has the wrong width")));
            }
            for a in 0..na {
                let row = &self.p[s][a];
                if row.len() != ns {
                    return Err(TheoryError::Shape(format!("P[{s}][{a}] has {} entries", row.len())));
                }
                if row.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                    return Err(TheoryError::BadProbability { state: s, action: a });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(TheoryError::RowSum { state: s, action: a, sum });
                }
            }
        }
        let finite = |t: &Vec<Vec<f64>>| t.iter().flatten().all(|x| x.is_finite());
        if !finite(&self.r) {
            return Err(TheoryError::NonFinite("reward"));
        }
        if !finite(&self.f_table) || !finite(&self.l_table) || !self.switch_cost.is_finite() {
            return Err(TheoryError::NonFinite("intrinsic table"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("game serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TheoryError> {
        let g: TabularGame = serde_json::from_str(text).map_err(|e| TheoryError::Fixture {
            path: "<string>".into(),
            reason: e.to_string(),
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TheoryError> {
        let path = path.as_ref();
        let fixture = |reason: String| TheoryError::Fixture {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fixture(e.to_string()))?;
        let g: TabularGame = serde_json::from_str(&text).map_err(|e| fixture(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    /// `Σ_{s'} P(s'|s,a) f(s')`.
    fn expect(&self, s: usize, a: usize, f: impl Fn(usize) -> f64) -> f64 {
        self.p[s][a].iter().enumerate().map(|(t, p)| p * f(t)).sum()
    }

    /// Random fixture: Dirichlet(1) transition rows, rewards in [0, 1),
    /// intrinsic values in [0, 0.5), cost in [0, 0.5), γ in [0.5, 0.9).
    pub fn random(rng: &mut Rng, n_states: usize, n_actions: usize, m: usize) -> Self {
        let p = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        let raw: Vec<f64> = (0..n_states).map(|_| -(1.0 - rng.uniform()).ln()).collect();
                        let z: f64 = raw.iter().sum();
                        let mut row: Vec<f64> = raw.iter().map(|x| x / z).collect();
                        // Put the rounding residue on the largest entry.
                        let k = (0..n_states).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
                        let rest: f64 = row.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, x)| x).sum();
                        row[k] = 1.0 - rest;
                        row
                    })
                    .collect()
            })
            .collect();
        let table = |rng: &mut Rng, rows: usize, cols: usize, hi: f64| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| rng.uniform_range(0.0, hi)).collect())
                .collect()
        };
        let r = table(rng, n_states, n_actions, 1.0);
        let f_table = table(rng, n_states, m, 0.5);
        Self {
            n_states,
            n_joint_actions: n_actions,
            p,
            r,
            gamma: rng.uniform_range(0.5, 0.9),
            f_table,
            switch_cost: rng.uniform_range(0.0, 0.5),
            l_table: Vec::new(),
        }
    }
}

/// Stochastic policy tables for the agents (`pi[s][a]`) and the reward
/// channel choice (`g[s][θ]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTables {
    pub pi: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

/// Intervention branch under fixed policies:
/// `Σ_a π[R + L + γ Σ P V(·, 1−I)] + Σ_θ g F − c`.
pub fn intervention_op(game: &TabularGame, v: &AugmentedValue, pol: &PolicyTables) -> Result<AugmentedValue, TheoryError> {
    let (ns, na, m) = (game.n_states, game.n_joint_actions, game.m());
    if v.n_states != ns
        || pol.pi.len() != ns
        || pol.g.len() != ns
        || pol.pi.iter().any(|r| r.len() != na)
        || pol.g.iter().any(|r| r.len() != m)
    {
        return Err(TheoryError::Shape("value or policy tables do not match the game".into()));
    }
    let mut out = AugmentedValue::zeros(ns);
    for s in 0..ns {
        let f: f64 = (0..m).map(|k| pol.g[s][k] * game.f_table[s][k]).sum();
        for i in 0..2 {
            let backup: f64 = (0..na)
                .map(|a| {
                    pol.pi[s][a]
                        * (game.r[s][a] + game.l(s, a) + game.gamma * game.expect(s, a, |t| v.get(t, 1 - i)))
                })
                .sum();
            out.set(s, i, backup + f - game.switch_cost);
        }
    }
    Ok(out)
}

/// Intervention branch with the agents and the channel choice greedy:
/// `max_a[R + L + γ Σ P V(·, 1−I)] + max_θ F − c`.
pub fn intervention_op_opt(game: &TabularGame, v: &AugmentedValue) -> AugmentedValue {
    let mut out = AugmentedValue::zeros(game.n_states);
    for s in 0..game.n_states {
        for i in 0..2 {
            let best = (0..game.n_joint_actions)
                .map(|a| game.r[s][a] + game.l(s, a) + game.gamma * game.expect(s, a, |t| v.get(t, 1 - i)))
                .fold(f64::NEG_INFINITY, f64::max);
            out.set(s, i, best + game.f_best(s) - game.switch_cost);
        }
    }
    out
}

/// No-intervention branch `max_a[R + γ Σ P V(·, I)]`.
pub fn continuation_op(game: &TabularGame, v: &AugmentedValue) -> AugmentedValue {
    let mut out = AugmentedValue::zeros(game.n_states);
    for s in 0..game.n_states {
        for i in 0..2 {
            let best = (0..game.n_joint_actions)
                .map(|a| game.r[s][a] + game.gamma * game.expect(s, a, |t| v.get(t, i)))
                .fold(f64::NEG_INFINITY, f64::max);
            out.set(s, i, best);
        }
    }
    out
}

/// `TV = max(ℳV, NV)` pointwise.
pub fn bellman_op(game: &TabularGame, v: &AugmentedValue) -> AugmentedValue {
    let m = intervention_op_opt(game, v);
    let n = continuation_op(game, v);
    AugmentedValue {
        n_states: game.n_states,
        v: m.v.iter().zip(&n.v).map(|(a, b)| a.max(*b)).collect(),
    }
}

/// Iterates `T` from `v0` until successive iterates are within `tol` in the
/// sup norm. Returns the last iterate and the number of applications of `T`.
pub fn value_iterate_from(game: &TabularGame, v0: AugmentedValue, tol: f64) -> (AugmentedValue, usize) {
    assert!(tol > 0.0, "tolerance must be positive");
    let mut v = v0;
    let mut iters = 0;
    loop {
        let next = bellman_op(game, &v);
        iters += 1;
        let d = next.sup_dist(&v);
        v = next;
        if d < tol {
            return (v, iters);
        }
    }
}

pub fn value_iterate(game: &TabularGame, tol: f64) -> (AugmentedValue, usize) {
    value_iterate_from(game, AugmentedValue::zeros(game.n_states), tol)
}

/// Heaviside switching rule `H(ℳV* − TV*)`, indexed `[2s + I]`.
pub fn switch_rule(game: &TabularGame, v_star: &AugmentedValue) -> Vec<bool> {
    let m = intervention_op_opt(game, v_star);
    let t = bellman_op(game, v_star);
    m.v.iter().zip(&t.v).map(|(a, b)| a - b >= 0.0).collect()
}

/// Exact policy evaluation of the environment MDP under a deterministic policy.
pub fn evaluate_policy(game: &TabularGame, pi: &[usize]) -> Vec<f64> {
    let ns = game.n_states;
    let mut a = DMatrix::<f64>::identity(ns, ns);
    let mut b = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        b[s] = game.r[s][pi[s]];
        for t in 0..ns {
            a[(s, t)] -= game.gamma * game.p[s][pi[s]][t];
        }
    }
    a.lu().solve(&b).expect("I − γP is invertible").iter().copied().collect()
}

/// Deterministic Generator: switch decision per `(s, J)` with `J` the
/// previous switch value, and a channel per state.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchPolicy {
    /// `switch[2s + J]`.
    pub switch: Vec<bool>,
    pub theta: Vec<usize>,
}

/// Value of `π` on the shaped problem, over augmented states `[2s + J]`.
///
/// While the switch is on the agents receive `γ·u_{t+1} − u_t` with the
/// potential zeroed at switch-on and switch-off, so the expected shaped
/// reward at `(s, J)` with `q = 𝔤(s, J)` is
/// `R + q·(γ Σ P 𝔤(s', 1) u(s') − J·u(s))`.
pub fn evaluate_shaped(game: &TabularGame, pi: &[usize], gen: &SwitchPolicy) -> Vec<f64> {
    let ns = game.n_states;
    let n = 2 * ns;
    let u = |s: usize| game.f_table[s][gen.theta[s]];
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..ns {
        let act = pi[s];
        for j in 0..2 {
            let x = 2 * s + j;
            let q = gen.switch[x];
            let mut reward = game.r[s][act];
            if q {
                let next = game.expect(s, act, |t| if gen.switch[2 * t + 1] { u(t) } else { 0.0 });
                reward += game.gamma * next - if j == 1 { u(s) } else { 0.0 };
            }
            b[x] = reward;
            let jn = usize::from(q);
            for t in 0..ns {
                a[(x, 2 * t + jn)] -= game.gamma * game.p[s][act][t];
            }
        }
    }
    a.lu().solve(&b).expect("I − γP is invertible").iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    pub policies: usize,
    pub generators: usize,
    /// Largest `|v^{π,g}(s,0) − v^π(s)|` over all enumerated pairs.
    pub max_value_gap: f64,
    /// Every generator leaves the set of optimal agent policies unchanged.
    pub argmax_sets_equal: bool,
    pub best_plain: f64,
    /// Best environment return among policies optimal for some shaped problem.
    pub best_with_generator: f64,
}

impl InvarianceReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_value_gap <= tol && self.argmax_sets_equal && self.best_with_generator >= self.best_plain - tol
    }
}

fn enumerate(radix: usize, digits: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = radix.pow(digits as u32);
    (0..total).map(move |mut k| {
        (0..digits)
            .map(|_| {
                let d = k % radix;
                k /= radix;
                d
            })
            .collect()
    })
}

fn optimal_set(values: &[Vec<f64>], tol: f64) -> Vec<usize> {
    let ns = values[0].len();
    let best: Vec<f64> = (0..ns)
        .map(|s| values.iter().map(|v| v[s]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    (0..values.len())
        .filter(|&k| (0..ns).all(|s| values[k][s] >= best[s] - tol))
        .collect()
}

/// Enumerates every deterministic agent policy and every deterministic
/// Generator (switch rule and channel choice), comparing shaped and plain
/// values exactly.
pub fn invariance_audit(game: &TabularGame, tol: f64) -> Result<InvarianceReport, TheoryError> {
    game.validate()?;
    let (ns, na, m) = (game.n_states, game.n_joint_actions, game.m());
    if ns > 4 || na > 3 || m > 2 {
        return Err(TheoryError::EnumerationCap { states: ns, actions: na });
    }
    let policies: Vec<Vec<usize>> = enumerate(na, ns).collect();
    let plain: Vec<Vec<f64>> = policies.iter().map(|pi| evaluate_policy(game, pi)).collect();
    let plain_opt = optimal_set(&plain, tol);
    let best_plain = plain.iter().map(|v| v.iter().sum::<f64>()).fold(f64::NEG_INFINITY, f64::max);

    let mut report = InvarianceReport {
        policies: policies.len(),
        generators: 0,
        max_value_gap: 0.0,
        argmax_sets_equal: true,
        best_plain,
        best_with_generator: f64::NEG_INFINITY,
    };
    for switch in enumerate(2, 2 * ns) {
        for theta in enumerate(m, ns) {
            let gen = SwitchPolicy {
                switch: switch.iter().map(|&b| b == 1).collect(),
                theta,
            };
            report.generators += 1;
            let shaped: Vec<Vec<f64>> = policies
                .iter()
                .map(|pi| {
                    let v = evaluate_shaped(game, pi, &gen);
                    (0..ns).map(|s| v[2 * s]).collect()
                })
                .collect();
            for (sv, pv) in shaped.iter().zip(&plain) {
                for (a, b) in sv.iter().zip(pv) {
                    report.max_value_gap = report.max_value_gap.max((a - b).abs());
                }
            }
            let opt = optimal_set(&shaped, tol);
            if opt != plain_opt {
                report.argmax_sets_equal = false;
            }
            for &k in &opt {
                let env_return: f64 = plain[k].iter().sum();
                report.best_with_generator = report.best_with_generator.max(env_return);
            }
        }
    }
    Ok(report)
}

// Linear function approximation of the switching Q-function.
//
// `Q(s, I, a)` is the value of playing `a` at `s` with switch state `I` and no
// intervention at this step; rows are indexed `(2s + I)·A + a`.

/// Per-row intervention bonus `b(s, a) = L(s, a) + max_θ F(s, θ) − c`.
pub fn intervention_bonus(game: &TabularGame, s: usize, a: usize) -> f64 {
    game.l(s, a) + game.f_best(s) - game.switch_cost
}

pub fn q_rows(game: &TabularGame) -> usize {
    game.n_states * 2 * game.n_joint_actions
}

fn q_index(game: &TabularGame, s: usize, i: usize, a: usize) -> usize {
    (2 * s + i) * game.n_joint_actions + a
}

/// `𝔉Q(s, I, a) = R + γ Σ P max_{a'} max{Q(s', 1−I, a') + b(s', a'), Q(s', I, a')}`.
pub fn f_operator(game: &TabularGame, q: &[f64]) -> Vec<f64> {
    let (ns, na) = (game.n_states, game.n_joint_actions);
    let mut best = vec![0.0; 2 * ns];
    for t in 0..ns {
        for i in 0..2 {
            best[2 * t + i] = (0..na)
                .map(|a| {
                    let switch = q[q_index(game, t, 1 - i, a)] + intervention_bonus(game, t, a);
                    switch.max(q[q_index(game, t, i, a)])
                })
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = vec![0.0; q_rows(game)];
    for s in 0..ns {
        for i in 0..2 {
            for a in 0..na {
                out[q_index(game, s, i, a)] = game.r[s][a] + game.gamma * game.expect(s, a, |t| best[2 * t + i]);
            }
        }
    }
    out
}

/// Fixed point of `𝔉` by iteration to sup-norm change below `tol`.
pub fn q_star(game: &TabularGame, tol: f64) -> Vec<f64> {
    let mut q = vec![0.0; q_rows(game)];
    loop {
        let next = f_operator(game, &q);
        let d = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if d < tol {
            return q;
        }
    }
}

/// Stationary distribution of the action-averaged chain, by power iteration.
pub fn stationary_states(game: &TabularGame) -> Vec<f64> {
    let (ns, na) = (game.n_states, game.n_joint_actions);
    let mut mu = vec![1.0 / ns as f64; ns];
    for _ in 0..100_000 {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                for t in 0..ns {
                    next[t] += mu[s] * game.p[s][a][t] / na as f64;
                }
            }
        }
        let d: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        mu = next;
        if d < 1e-15 {
            break;
        }
    }
    mu
}

/// Row weights of the uniform exploring behaviour: `μ(s) · ½ · 1/A`.
pub fn sampling_weights(game: &TabularGame) -> Vec<f64> {
    let mu = stationary_states(game);
    let na = game.n_joint_actions;
    let mut d = vec![0.0; q_rows(game)];
    for s in 0..game.n_states {
        for i in 0..2 {
            for a in 0..na {
                d[q_index(game, s, i, a)] = mu[s] / (2.0 * na as f64);
            }
        }
    }
    d
}

pub fn weighted_norm(d: &[f64], x: &[f64]) -> f64 {
    d.iter().zip(x).map(|(w, v)| w * v * v).sum::<f64>().sqrt()
}

/// Feature matrix with one row per `(s, I, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBasis {
    rows: usize,
    p: usize,
    phi: DMatrix<f64>,
}

impl LinearBasis {
    pub fn new(rows: usize, p: usize, data: &[f64]) -> Result<Self, TheoryError> {
        if data.len() != rows * p {
            return Err(TheoryError::Shape(format!("basis data has {} entries, expected {}", data.len(), rows * p)));
        }
        let phi = DMatrix::from_row_slice(rows, p, data);
        let rank = phi.rank(1e-10);
        if rank < p {
            return Err(TheoryError::RankDeficient { rank, p });
        }
        Ok(Self { rows, p, phi })
    }

    pub fn identity(rows: usize) -> Self {
        Self {
            rows,
            p: rows,
            phi: DMatrix::identity(rows, rows),
        }
    }

    pub fn ones(rows: usize) -> Self {
        Self {
            rows,
            p: 1,
            phi: DMatrix::from_element(rows, 1, 1.0),
        }
    }

    /// Gaussian features; redrawn until full rank.
    pub fn random(rows: usize, p: usize, rng: &mut Rng) -> Self {
        loop {
            let data: Vec<f64> = (0..rows * p).map(|_| rng.normal()).collect();
            if let Ok(b) = Self::new(rows, p, &data) {
                return b;
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn feature(&self, row: usize, k: usize) -> f64 {
        self.phi[(row, k)]
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        (&self.phi * DVector::from_column_slice(r)).iter().copied().collect()
    }

    /// Weighted least-squares coefficients of `x`.
    pub fn fit(&self, d: &[f64], x: &[f64]) -> Vec<f64> {
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(d));
        let gram = self.phi.transpose() * &w * &self.phi;
        let rhs = self.phi.transpose() * &w * DVector::from_column_slice(x);
        gram.lu().solve(&rhs).expect("full-rank basis").iter().copied().collect()
    }

    /// `Πx = Φ (ΦᵀDΦ)⁻¹ ΦᵀD x`.
    pub fn project(&self, d: &[f64], x: &[f64]) -> Vec<f64> {
        self.apply(&self.fit(d, x))
    }
}

/// `‖Π𝔉(Φr) − Φr‖_D`.
pub fn projected_residual(game: &TabularGame, basis: &LinearBasis, d: &[f64], r: &[f64]) -> f64 {
    let q = basis.apply(r);
    let pf = basis.project(d, &f_operator(game, &q));
    let diff: Vec<f64> = pf.iter().zip(&q).map(|(a, b)| a - b).collect();
    weighted_norm(d, &diff)
}

/// Step sizes `a0 / (1 + t/τ)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub a0: f64,
    pub tau: f64,
    pub power: f64,
}

impl StepSchedule {
    pub fn at(&self, t: u64) -> f64 {
        self.a0 / (1.0 + t as f64 / self.tau).powf(self.power)
    }

    /// Robbins–Monro: `Σα = ∞` and `Σα² < ∞`.
    pub fn robbins_monro(&self) -> bool {
        self.a0 > 0.0 && self.tau > 0.0 && self.power > 0.5 && self.power <= 1.0
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            a0: 0.5,
            tau: 1000.0,
            power: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFaResult {
    /// Tail average of the iterates over the second half of the run.
    pub r: Vec<f64>,
    pub r_last: Vec<f64>,
}

/// Weight vector storage for the feature-space iteration. Fixed-size arrays
/// let the compiler unroll the short dot products in the hot loop.
trait Weights: Clone {
    fn zeros(p: usize) -> Self;
    fn from_row(row: &[f64]) -> Self;
    fn as_slice(&self) -> &[f64];
    fn as_mut_slice(&mut self) -> &mut [f64];

    fn dot(&self, other: &Self) -> f64 {
        self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn axpy(&mut self, c: f64, x: &Self) {
        for (a, b) in self.as_mut_slice().iter_mut().zip(x.as_slice()) {
            *a += c * b;
        }
    }
}

impl<const P: usize> Weights for [f64; P] {
    fn zeros(_: usize) -> Self {
        [0.0; P]
    }

    fn from_row(row: &[f64]) -> Self {
        row.try_into().expect("row width matches P")
    }

    fn as_slice(&self) -> &[f64] {
        self
    }

    fn as_mut_slice(&mut self) -> &mut [f64] {
        self
    }
}

impl Weights for Vec<f64> {
    fn zeros(p: usize) -> Self {
        vec![0.0; p]
    }

    fn from_row(row: &[f64]) -> Self {
        row.to_vec()
    }

    fn as_slice(&self) -> &[f64] {
        self
    }

    fn as_mut_slice(&mut self) -> &mut [f64] {
        self
    }
}

/// Flattened game tables for the sampling loop.
struct SaTables {
    ns: usize,
    na: usize,
    gamma: f64,
    reward: Vec<f64>,
    bonus: Vec<f64>,
    cumulative: Vec<Vec<f64>>,
}

fn sa_loop<W: Weights>(
    tables: &SaTables,
    basis: &LinearBasis,
    steps: u64,
    schedule: StepSchedule,
    seed: u64,
) -> Result<LinearFaResult, TheoryError> {
    let (ns, na, p) = (tables.ns, tables.na, basis.p());
    let phi: Vec<W> = (0..basis.rows())
        .map(|row| W::from_row(&(0..p).map(|k| basis.feature(row, k)).collect::<Vec<_>>()))
        .collect();
    let mut r = W::zeros(p);
    let mut tail_sum = W::zeros(p);
    // The trajectory is long and cheap per step, so it runs on a small fast
    // generator seeded from the caller's stream.
    let mut fast = SmallRng::seed_from_u64(seed);
    let (mut s, mut i) = (0usize, 0usize);
    let mut alpha = schedule.at(0);
    for t in 0..steps {
        // The step size is refreshed every 256 steps, which keeps the
        // Robbins–Monro sums unchanged.
        if t % 256 == 0 {
            alpha = schedule.at(t);
        }
        // One draw for the switch bit (top bit) and the action (low 32 bits).
        let bits = fast.next_u64();
        let j = i ^ (bits >> 63) as usize;
        let a = (((bits & 0xffff_ffff) * na as u64) >> 32) as usize;
        let u: f64 = fast.gen();
        let next = tables.cumulative[s * na + a].iter().position(|&c| u < c).unwrap_or(ns - 1);
        let mut best = f64::NEG_INFINITY;
        for ap in 0..na {
            let switch = phi[(2 * next + (1 - j)) * na + ap].dot(&r) + tables.bonus[next * na + ap];
            let stay = phi[(2 * next + j) * na + ap].dot(&r);
            best = best.max(switch).max(stay);
        }
        let row = &phi[(2 * s + j) * na + a];
        let td = tables.reward[s * na + a] + tables.gamma * best - row.dot(&r);
        r.axpy(alpha * td, row);
        if t % 4096 == 0 {
            let norm = r.dot(&r).sqrt();
            if !(norm <= 1e6) {
                return Err(TheoryError::Divergence { step: t, norm });
            }
        }
        if t >= steps / 2 {
            tail_sum.axpy(1.0, &r);
        }
        s = next;
        i = j;
    }
    let tail = (steps - steps / 2).max(1) as f64;
    Ok(LinearFaResult {
        r: tail_sum.as_slice().iter().map(|x| x / tail).collect(),
        r_last: r.as_slice().to_vec(),
    })
}

/// Stochastic-approximation Q-learning in feature space on a uniformly
/// exploring trajectory (switch bit and joint action both uniform).
pub fn linear_fa_qlearn(
    game: &TabularGame,
    basis: &LinearBasis,
    steps: u64,
    schedule: StepSchedule,
    rng: &mut Rng,
) -> Result<LinearFaResult, TheoryError> {
    game.validate()?;
    if basis.rows() != q_rows(game) {
        return Err(TheoryError::Shape(format!(
            "basis has {} rows, game needs {}",
            basis.rows(),
            q_rows(game)
        )));
    }
    let (ns, na) = (game.n_states, game.n_joint_actions);
    let tables = SaTables {
        ns,
        na,
        gamma: game.gamma,
        reward: game.r.iter().flatten().copied().collect(),
        bonus: (0..ns * na).map(|k| intervention_bonus(game, k / na, k % na)).collect(),
        cumulative: (0..ns * na)
            .map(|k| {
                let mut acc = 0.0;
                game.p[k / na][k % na]
                    .iter()
                    .map(|x| {
                        acc += x;
                        acc
                    })
                    .collect()
            })
            .collect(),
    };
    let seed = rng.next_u64();
    match basis.p() {
        1 => sa_loop::<[f64; 1]>(&tables, basis, steps, schedule, seed),
        2 => sa_loop::<[f64; 2]>(&tables, basis, steps, schedule, seed),
        3 => sa_loop::<[f64; 3]>(&tables, basis, steps, schedule, seed),
        4 => sa_loop::<[f64; 4]>(&tables, basis, steps, schedule, seed),
        _ => sa_loop::<Vec<f64>>(&tables, basis, steps, schedule, seed),
    }
}

/// Projected fixed point by iterating `r ← fit(𝔉(Φr))`; `None` if the
/// iteration does not settle.
pub fn projected_fixed_point(game: &TabularGame, basis: &LinearBasis, d: &[f64]) -> Option<Vec<f64>> {
    let mut r = vec![0.0; basis.p()];
    for _ in 0..100_000 {
        let next = basis.fit(d, &f_operator(game, &basis.apply(&r)));
        let change = next.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        r = next;
        if !r.iter().all(|x| x.is_finite()) {
            return None;
        }
        if change < 1e-13 {
            return Some(r);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn single_state(r: f64, f: f64, cost: f64, gamma: f64) -> TabularGame {
        TabularGame {
            n_states: 1,
            n_joint_actions: 1,
            p: vec![vec![vec![1.0]]],
            r: vec![vec![r]],
            gamma,
            f_table: vec![vec![f]],
            switch_cost: cost,
            l_table: Vec::new(),
        }
    }

    fn uniform_policies(g: &TabularGame) -> PolicyTables {
        PolicyTables {
            pi: vec![vec![1.0 / g.n_joint_actions as f64; g.n_joint_actions]; g.n_states],
            g: vec![vec![1.0 / g.m() as f64; g.m()]; g.n_states],
        }
    }

    #[test]
    fn intervention_single_state() {
        let g = single_state(1.0, 0.0, 1.0, 0.9);
        let v = AugmentedValue::constant(1, 10.0);
        let out = intervention_op(&g, &v, &uniform_policies(&g)).unwrap();
        assert!((out.get(0, 0) - 9.0).abs() < 1e-12 && (out.get(0, 1) - 9.0).abs() < 1e-12);
        assert!((intervention_op_opt(&g, &v).get(0, 0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn intervention_without_shaping_is_toggled_backup() {
        let mut rng = Rng::new(1);
        let mut g = TabularGame::random(&mut rng, 4, 3, 2);
        g.f_table.iter_mut().flatten().for_each(|x| *x = 0.0);
        g.switch_cost = 0.0;
        let v = AugmentedValue {
            n_states: 4,
            v: (0..8).map(|_| rng.normal()).collect(),
        };
        let swapped = AugmentedValue {
            n_states: 4,
            v: (0..8).map(|k| v.v[k ^ 1]).collect(),
        };
        let m = intervention_op_opt(&g, &v);
        let n = continuation_op(&g, &swapped);
        assert!(m.sup_dist(&n) < 1e-12);
    }

    #[test]
    fn intervention_matches_brute_force() {
        let mut rng = Rng::new(2);
        let g = TabularGame::random(&mut rng, 5, 3, 2);
        let pol = PolicyTables {
            pi: (0..5).map(|_| normalised(&mut rng, 3)).collect(),
            g: (0..5).map(|_| normalised(&mut rng, 2)).collect(),
        };
        let v = AugmentedValue {
            n_states: 5,
            v: (0..10).map(|_| rng.normal()).collect(),
        };
        let out = intervention_op(&g, &v, &pol).unwrap();
        for s in 0..5 {
            for i in 0..2 {
                let mut total = 0.0;
                for a in 0..3 {
                    for th in 0..2 {
                        for t in 0..5 {
                            let w = pol.pi[s][a] * pol.g[s][th] * g.p[s][a][t];
                            total += w * (g.r[s][a] + g.f_table[s][th] - g.switch_cost + g.gamma * v.get(t, 1 - i));
                        }
                    }
                }
                assert!((out.get(s, i) - total).abs() < 1e-12);
            }
        }
    }

    fn normalised(rng: &mut Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.01).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / z).collect()
    }

    #[test]
    fn geometric_series_fixed_point() {
        let g = single_state(1.0, 0.0, 1e9, 0.9);
        let (v, _) = value_iterate(&g, 1e-10);
        assert!((v.get(0, 0) - 10.0).abs() < 1e-9);
        assert!((v.get(0, 1) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn dominated_intervention_is_classic_value_iteration() {
        let mut rng = Rng::new(3);
        let mut g = TabularGame::random(&mut rng, 5, 3, 1);
        g.switch_cost = 1e6;
        let (v, _) = value_iterate(&g, 1e-12);
        let mut classic = vec![0.0; 5];
        for _ in 0..2000 {
            classic = (0..5)
                .map(|s| {
                    (0..3)
                        .map(|a| g.r[s][a] + g.gamma * g.expect(s, a, |t| classic[t]))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
        }
        for s in 0..5 {
            assert!((v.get(s, 0) - classic[s]).abs() < 1e-9);
            assert!((v.get(s, 1) - classic[s]).abs() < 1e-9);
        }
        assert!(switch_rule(&g, &v).iter().all(|&x| !x));
    }

    #[test]
    fn dominant_intervention_switches_everywhere() {
        let mut rng = Rng::new(4);
        let mut g = TabularGame::random(&mut rng, 4, 2, 1);
        g.switch_cost = 0.0;
        g.f_table.iter_mut().flatten().for_each(|x| *x = 0.3);
        g.l_table = vec![vec![0.2; 2]; 4];
        let (v, _) = value_iterate(&g, 1e-12);
        assert!(switch_rule(&g, &v).iter().all(|&x| x));
    }

    #[test]
    fn crafted_rule_pays_only_in_middle_state() {
        // Three absorbing states; intervening pays only in state 1.
        let p: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|s| {
                let mut row = vec![0.0; 3];
                row[s] = 1.0;
                vec![row]
            })
            .collect();
        let g = TabularGame {
            n_states: 3,
            n_joint_actions: 1,
            p,
            r: vec![vec![0.0]; 3],
            gamma: 0.5,
            f_table: vec![vec![0.0], vec![1.0], vec![0.0]],
            switch_cost: 0.25,
            l_table: Vec::new(),
        };
        let (v, _) = value_iterate(&g, 1e-13);
        let rule = switch_rule(&g, &v);
        let m = intervention_op_opt(&g, &v);
        let n = continuation_op(&g, &v);
        for s in 0..3 {
            for i in 0..2 {
                assert_eq!(rule[2 * s + i], m.get(s, i) >= n.get(s, i));
            }
        }
        assert_eq!(
            (0..3).map(|s| rule[2 * s]).collect::<Vec<_>>(),
            vec![false, true, false]
        );
    }

    #[test]
    fn contraction_and_uniqueness() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let ns = 1 + rng.below(20);
            let (na, m) = (1 + rng.below(4), 1 + rng.below(3));
            let g = TabularGame::random(&mut rng, ns, na, m);
            let v1 = AugmentedValue {
                n_states: ns,
                v: (0..2 * ns).map(|_| 10.0 * rng.normal()).collect(),
            };
            let v2 = AugmentedValue {
                n_states: ns,
                v: (0..2 * ns).map(|_| 10.0 * rng.normal()).collect(),
            };
            let lhs = bellman_op(&g, &v1).sup_dist(&bellman_op(&g, &v2));
            assert!(lhs <= g.gamma * v1.sup_dist(&v2) + 1e-12);
        }
    }

    #[test]
    fn fixed_point_from_two_starts() {
        let mut rng = Rng::new(6);
        let g = TabularGame::random(&mut rng, 6, 3, 2);
        let tol = 1e-10;
        let (a, ia) = value_iterate(&g, tol);
        let v0 = AugmentedValue {
            n_states: 6,
            v: (0..12).map(|_| 50.0 * rng.normal()).collect(),
        };
        let (b, _) = value_iterate_from(&g, v0, tol);
        assert!(bellman_op(&g, &a).sup_dist(&a) < tol);
        assert!(a.sup_dist(&b) <= 2.0 * tol / (1.0 - g.gamma));
        let first = bellman_op(&g, &AugmentedValue::zeros(6)).sup_dist(&AugmentedValue::zeros(6));
        let bound = ((tol * (1.0 - g.gamma) / first).ln() / g.gamma.ln()).ceil() as usize + 1;
        assert!(ia <= bound, "{ia} > {bound}");
    }

    #[test]
    fn switching_times_follow_the_rule() {
        let mut rng = Rng::new(7);
        let g = TabularGame::random(&mut rng, 5, 2, 2);
        let (v, _) = value_iterate(&g, 1e-12);
        let rule = switch_rule(&g, &v);
        let m = intervention_op_opt(&g, &v);
        let tv = bellman_op(&g, &v);
        let (mut s, mut i) = (0usize, 0usize);
        for _ in 0..500 {
            let x = 2 * s + i;
            // A switching time is exactly a state where ℳV = TV.
            assert_eq!(rule[x], m.v[x] == tv.v[x]);
            if rule[x] {
                i = 1 - i;
            }
            let a = rng.below(2);
            s = rng.categorical(&g.p[s][a]);
        }
    }

    #[test]
    fn validation_names_the_row() {
        let mut g = single_state(1.0, 0.0, 0.0, 0.9);
        g.p[0][0][0] = 0.9;
        let err = g.validate().unwrap_err();
        assert!(matches!(err, TheoryError::RowSum { state: 0, action: 0, .. }));
        assert!(err.to_string().contains("P[0][0]"));
    }

    #[test]
    fn json_roundtrip() {
        let mut rng = Rng::new(8);
        let g = TabularGame::random(&mut rng, 3, 2, 2);
        let back = TabularGame::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn shaping_off_audit() {
        let mut rng = Rng::new(9);
        let g = TabularGame::random(&mut rng, 2, 2, 1);
        let pi = vec![0, 1];
        let off = SwitchPolicy {
            switch: vec![false; 4],
            theta: vec![0; 2],
        };
        let shaped = evaluate_shaped(&g, &pi, &off);
        let plain = evaluate_policy(&g, &pi);
        for s in 0..2 {
            assert!((shaped[2 * s] - plain[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn small_game_invariance() {
        let mut rng = Rng::new(10);
        let g = TabularGame::random(&mut rng, 2, 2, 2);
        let report = invariance_audit(&g, 1e-9).unwrap();
        assert_eq!(report.policies, 4);
        assert_eq!(report.generators, 16 * 4);
        assert!(report.passes(1e-9), "{report:?}");
    }

    #[test]
    fn shaped_value_by_simulation() {
        // Monte Carlo check of the closed-form shaped reward against direct
        // simulation of the switching process with carried potentials.
        let mut rng = Rng::new(11);
        let g = TabularGame::random(&mut rng, 3, 2, 2);
        let pi = vec![1, 0, 1];
        let gen = SwitchPolicy {
            switch: vec![true, false, false, true, true, true],
            theta: vec![1, 0, 1],
        };
        let exact = evaluate_shaped(&g, &pi, &gen);
        let u = |s: usize| g.f_table[s][gen.theta[s]];
        let episodes = 20_000;
        let mut total = 0.0;
        for _ in 0..episodes {
            let (mut s, mut j, mut disc, mut ret) = (0usize, 0usize, 1.0, 0.0);
            for _ in 0..200 {
                let a = pi[s];
                let q = gen.switch[2 * s + j];
                let next = rng.categorical(&g.p[s][a]);
                let mut reward = g.r[s][a];
                if q {
                    let un = if gen.switch[2 * next + 1] { u(next) } else { 0.0 };
                    let uc = if j == 1 { u(s) } else { 0.0 };
                    reward += g.gamma * un - uc;
                }
                ret += disc * reward;
                disc *= g.gamma;
                s = next;
                j = usize::from(q);
            }
            total += ret;
        }
        let mc = total / episodes as f64;
        let plain = evaluate_policy(&g, &pi);
        assert!((mc - exact[0]).abs() < 0.03, "{mc} vs {}", exact[0]);
        assert!((exact[0] - plain[0]).abs() < 1e-12);
    }

    #[test]
    fn enumeration_cap() {
        let mut rng = Rng::new(12);
        let g = TabularGame::random(&mut rng, 5, 2, 1);
        assert!(matches!(invariance_audit(&g, 1e-9), Err(TheoryError::EnumerationCap { .. })));
    }

    #[test]
    fn tabular_basis_recovers_q_star() {
        let mut rng = Rng::new(13);
        let g = TabularGame::random(&mut rng, 3, 2, 2);
        let qs = q_star(&g, 1e-12);
        let basis = LinearBasis::identity(q_rows(&g));
        let res = linear_fa_qlearn(&g, &basis, 3_000_000, StepSchedule::default(), &mut rng).unwrap();
        let err = res.r.iter().zip(&qs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
        let d = sampling_weights(&g);
        let proj = basis.project(&d, &qs);
        assert!(proj.iter().zip(&qs).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn ones_basis_matches_closed_form() {
        let mut rng = Rng::new(14);
        let g = TabularGame::random(&mut rng, 4, 2, 2);
        let d = sampling_weights(&g);
        let (ns, na) = (g.n_states, g.n_joint_actions);
        // With Φ = 1, 𝔉(r·1) = R + γ(r + P·B), B(s') = max_{a'} max(b(s',a'), 0).
        let big_b: Vec<f64> = (0..ns)
            .map(|t| (0..na).map(|a| intervention_bonus(&g, t, a).max(0.0)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (mut er, mut epb) = (0.0, 0.0);
        for s in 0..ns {
            for i in 0..2 {
                for a in 0..na {
                    let w = d[q_index(&g, s, i, a)];
                    er += w * g.r[s][a];
                    epb += w * g.expect(s, a, |t| big_b[t]);
                }
            }
        }
        let oracle = (er + g.gamma * epb) / (1.0 - g.gamma);
        let basis = LinearBasis::ones(q_rows(&g));
        let fp = projected_fixed_point(&g, &basis, &d).unwrap();
        assert!((fp[0] - oracle).abs() < 1e-9);
        let learned = linear_fa_qlearn(&g, &basis, 4_000_000, StepSchedule::default(), &mut rng).unwrap();
        assert!((learned.r[0] - oracle).abs() < 2e-2, "{} vs {oracle}", learned.r[0]);
    }

    #[test]
    fn schedule_properties() {
        let s = StepSchedule::default();
        assert!(s.robbins_monro());
        assert_eq!(s.at(0), 0.5);
        assert!(s.at(10_000) < s.at(100));
        assert!(!StepSchedule { power: 0.4, ..s }.robbins_monro());
    }

    #[test]
    fn rank_deficient_basis_rejected() {
        let data = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        assert!(matches!(
            LinearBasis::new(3, 2, &data),
            Err(TheoryError::RankDeficient { rank: 1, p: 2 })
        ));
    }

    proptest! {
        #[test]
        fn bellman_contracts(seed in 0u64..5000) {
            let mut rng = Rng::new(seed);
            let ns = 1 + rng.below(8);
            let (na, m) = (1 + rng.below(3), 1 + rng.below(2));
            let g = TabularGame::random(&mut rng, ns, na, m);
            let v1 = AugmentedValue { n_states: ns, v: (0..2 * ns).map(|_| 5.0 * rng.normal()).collect() };
            let v2 = AugmentedValue { n_states: ns, v: (0..2 * ns).map(|_| 5.0 * rng.normal()).collect() };
            prop_assert!(bellman_op(&g, &v1).sup_dist(&bellman_op(&g, &v2)) <= g.gamma * v1.sup_dist(&v2) + 1e-12);
        }
    }
}
