//! Property suites over generated tabular games and random Generator
//! episodes. Each check reports a margin: the distance to its threshold,
//! positive when the check passes.

use std::fmt;
use std::path::PathBuf;

use ligs_core::envs::{EnvKind, GridEnv, NUM_ACTIONS};
use ligs_core::generator::{telescoping_audit, GeneratorPolicies, PotentialNet, SwitchMode, SwitchState};
use ligs_core::rng::Rng;
use ligs_core::theory::{
    bellman_op, continuation_op, intervention_op_opt, invariance_audit, linear_fa_qlearn, projected_residual, q_rows,
    q_star, sampling_weights, switch_rule, value_iterate, value_iterate_from, weighted_norm, AugmentedValue,
    LinearBasis, StepSchedule, TabularGame,
};
use ndarray::ArrayView2;

use crate::error::HarnessError;

/// Built-in slack of the contraction inequality; never loosened or tightened.
pub const CONTRACTION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub margin: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, margin: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: margin >= 0.0 && margin.is_finite(),
            margin,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} margin {:>11.3e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.margin,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Tolerances for the suites. `None` keeps each check's default.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub tol: Option<f64>,
    pub seed: u64,
    pub contraction_games: usize,
    pub games: usize,
    pub telescoping_episodes: usize,
    pub sa_steps: u64,
    pub fixtures: Vec<PathBuf>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            tol: None,
            seed: 0,
            contraction_games: 100,
            games: 20,
            telescoping_episodes: 1000,
            sa_steps: 120_000_000,
            fixtures: Vec::new(),
        }
    }
}

impl SuiteOptions {
    fn tol_or(&self, default: f64) -> f64 {
        self.tol.unwrap_or(default)
    }
}

/// Maps `f` over `0..n` on scoped worker threads, keeping index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index filled")).collect()
}

fn game_rng(seed: u64, suite: u64, index: usize) -> Rng {
    Rng::new(seed).fork(suite).fork(index as u64)
}

fn random_value(rng: &mut Rng, n_states: usize, scale: f64) -> AugmentedValue {
    AugmentedValue {
        n_states,
        v: (0..2 * n_states).map(|_| scale * rng.normal()).collect(),
    }
}

fn contraction_on(game: &TabularGame, rng: &mut Rng, pairs: usize) -> f64 {
    let mut margin = f64::INFINITY;
    for _ in 0..pairs {
        let v1 = random_value(rng, game.n_states, 10.0);
        let v2 = random_value(rng, game.n_states, 10.0);
        let lhs = bellman_op(game, &v1).sup_dist(&bellman_op(game, &v2));
        margin = margin.min(game.gamma * v1.sup_dist(&v2) + CONTRACTION_SLACK - lhs);
    }
    margin
}

/// `‖TV₁ − TV₂‖∞ ≤ γ‖V₁ − V₂‖∞ + 1e-12` on random games with up to 20 states.
pub fn contraction_check(opts: &SuiteOptions) -> CheckResult {
    let margins = par_map(opts.contraction_games, |i| {
        let mut rng = game_rng(opts.seed, 1, i);
        let ns = 1 + rng.below(20);
        let na = 1 + rng.below(4);
        let m = 1 + rng.below(3);
        let game = TabularGame::random(&mut rng, ns, na, m);
        contraction_on(&game, &mut rng, 20)
    });
    let margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    CheckResult::new(
        "contraction",
        margin,
        format!("{} games × 20 value pairs", opts.contraction_games),
    )
}

fn fixed_point_on(game: &TabularGame, rng: &mut Rng, tol: f64) -> (f64, f64) {
    let (a, _) = value_iterate(game, 1e-10);
    let (b, _) = value_iterate_from(game, random_value(rng, game.n_states, 100.0), 1e-10);
    let residual = bellman_op(game, &a).sup_dist(&a).max(bellman_op(game, &b).sup_dist(&b));
    (tol - residual, tol - a.sup_dist(&b))
}

/// `‖TV* − V*‖∞ < tol` and agreement of the limits from two starting points.
pub fn fixed_point_check(opts: &SuiteOptions) -> CheckResult {
    let tol = opts.tol_or(1e-8);
    let margins = par_map(opts.games, |i| {
        let mut rng = game_rng(opts.seed, 2, i);
        let ns = 2 + rng.below(19);
        let na = 1 + rng.below(4);
        let game = TabularGame::random(&mut rng, ns, na, 2);
        fixed_point_on(&game, &mut rng, tol)
    });
    let residual = margins.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
    let agreement = margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    // A zero tolerance cannot be met by a strict inequality.
    let margin = if residual > 0.0 && agreement >= 0.0 {
        residual.min(agreement)
    } else {
        residual.min(agreement).min(-f64::MIN_POSITIVE)
    };
    CheckResult::new(
        "fixed point",
        margin,
        format!("{} games, residual and init-independence within {tol:e}", opts.games),
    )
}

/// Simulated switching times coincide with the states where `ℳV* = V*`.
pub fn switch_rule_check(opts: &SuiteOptions) -> CheckResult {
    let mismatches: usize = par_map(opts.games, |i| {
        let mut rng = game_rng(opts.seed, 3, i);
        let ns = 2 + rng.below(6);
        let na = 1 + rng.below(3);
        let game = TabularGame::random(&mut rng, ns, na, 2);
        switch_rule_on(&game, &mut rng)
    })
    .into_iter()
    .sum();
    CheckResult::new(
        "switching rule",
        -(mismatches as f64),
        format!("{} games × 500 simulated steps, {mismatches} mismatches", opts.games),
    )
}

fn switch_rule_on(game: &TabularGame, rng: &mut Rng) -> usize {
    let (v, _) = value_iterate(game, 1e-12);
    let rule = switch_rule(game, &v);
    let m = intervention_op_opt(game, &v);
    let n = continuation_op(game, &v);
    let tv = bellman_op(game, &v);
    let (mut s, mut i) = (0usize, 0usize);
    let mut mismatches = 0;
    for _ in 0..500 {
        let x = 2 * s + i;
        let first_hit = m.v[x] == tv.v[x];
        if rule[x] != first_hit || rule[x] != (m.v[x] >= n.v[x]) {
            mismatches += 1;
        }
        if rule[x] {
            i = 1 - i;
        }
        let a = rng.below(game.n_joint_actions);
        s = rng.categorical(&game.p[s][a]);
    }
    mismatches
}

/// Exhaustive policy enumeration: optimal sets unchanged by shaping, values
/// equal, and the best return with a Generator no lower than without.
pub fn invariance_check(opts: &SuiteOptions) -> Result<Vec<CheckResult>, HarnessError> {
    let tol = opts.tol_or(1e-9);
    let reports = par_map(opts.games, |i| {
        let mut rng = game_rng(opts.seed, 4, i);
        let ns = 2 + rng.below(3);
        let na = 2 + rng.below(2);
        let game = TabularGame::random(&mut rng, ns, na, 2);
        invariance_audit(&game, tol)
    });
    let mut value_margin = f64::INFINITY;
    let mut sets_equal = 0;
    let mut improvement = f64::INFINITY;
    let mut generators = 0;
    for r in reports {
        let r = r?;
        value_margin = value_margin.min(tol - r.max_value_gap);
        sets_equal += usize::from(r.argmax_sets_equal);
        improvement = improvement.min(r.best_with_generator - r.best_plain + tol);
        generators += r.generators;
    }
    Ok(vec![
        CheckResult::new(
            "invariance (values)",
            value_margin,
            format!("{} games, {generators} generators", opts.games),
        ),
        CheckResult::new(
            "invariance (optimal sets)",
            sets_equal as f64 - opts.games as f64,
            format!("{sets_equal}/{} games with identical optimal sets", opts.games),
        ),
        CheckResult::new("weak improvement", improvement, format!("tolerance {tol:e}")),
    ])
}

/// Per-game outcome of the linear-approximation check.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundOutcome {
    pub residual: f64,
    pub error: f64,
    pub bound: f64,
}

fn bound_on(game: &TabularGame, basis: &LinearBasis, steps: u64, rng: &mut Rng) -> Result<BoundOutcome, HarnessError> {
    let d = sampling_weights(game);
    let qs = q_star(game, 1e-13);
    let learned = linear_fa_qlearn(game, basis, steps, StepSchedule::default(), rng)?;
    let residual = projected_residual(game, basis, &d, &learned.r);
    let phi_r = basis.apply(&learned.r);
    let error = weighted_norm(&d, &phi_r.iter().zip(&qs).map(|(a, b)| a - b).collect::<Vec<_>>());
    let proj = basis.project(&d, &qs);
    let proj_err = weighted_norm(&d, &proj.iter().zip(&qs).map(|(a, b)| a - b).collect::<Vec<_>>());
    Ok(BoundOutcome {
        residual,
        error,
        bound: proj_err / (1.0 - game.gamma * game.gamma).sqrt(),
    })
}

/// Learned weights on random games with random rank-2 bases: projected
/// residual below 1e-3 and `‖Φr − Q*‖ ≤ (1−γ²)^{-1/2}‖ΠQ* − Q*‖ + 1e-6`.
pub fn bound_check(opts: &SuiteOptions) -> Result<Vec<CheckResult>, HarnessError> {
    let residual_tol = opts.tol.map_or(1e-3, |t| t.max(0.0));
    let slack = opts.tol_or(1e-6);
    let outcomes = par_map(opts.games, |i| {
        let mut rng = game_rng(opts.seed, 5, i);
        let ns = 2 + rng.below(4);
        let na = 2 + rng.below(2);
        let game = TabularGame::random(&mut rng, ns, na, 2);
        let basis = LinearBasis::random(q_rows(&game), 2, &mut rng);
        bound_on(&game, &basis, opts.sa_steps, &mut rng)
    });
    let mut residual_margin = f64::INFINITY;
    let mut bound_margin = f64::INFINITY;
    let mut worst_ratio = 0.0f64;
    for o in outcomes {
        let o = o?;
        residual_margin = residual_margin.min(residual_tol - o.residual);
        bound_margin = bound_margin.min(o.bound + slack - o.error);
        worst_ratio = worst_ratio.max(o.error / o.bound);
    }
    Ok(vec![
        CheckResult::new(
            "projected residual",
            residual_margin,
            format!("{} games × {} steps, threshold {residual_tol:e}", opts.games, opts.sa_steps),
        ),
        CheckResult::new(
            "approximation bound",
            bound_margin,
            format!("worst error/bound ratio {worst_ratio:.3}"),
        ),
    ])
}

/// Random-action episodes with untrained Generators in every switching
/// mode: the discounted intrinsic sum of each episode must vanish.
pub fn telescoping_check(opts: &SuiteOptions) -> CheckResult {
    let tol = opts.tol_or(1e-9);
    let gamma = 0.99;
    let kinds = [EnvKind::JointForage, EnvKind::ThreeSection, EnvKind::SparseVersus, EnvKind::Corridor];
    let modes = [
        SwitchMode::Option { terminate_prob: 0.3 },
        SwitchMode::Policy,
        SwitchMode::Random,
        SwitchMode::AlwaysOn,
    ];
    let mut worst = 0.0f64;
    let mut episodes = 0;
    for (ki, &kind) in kinds.iter().enumerate() {
        let mut rng = game_rng(opts.seed, 6, ki);
        let probe = GridEnv::new(kind, rng.fork(0));
        let d = probe.state_dim();
        let pot = PotentialNet::new(d, &[16], 3, &mut rng);
        let gen = GeneratorPolicies::new(d, 3, &[16], &mut rng);
        for ep in 0..opts.telescoping_episodes {
            let mode = modes[ep % modes.len()];
            let mut env = GridEnv::new(kind, rng.fork(1000 + ep as u64));
            let mut state = env.encode_state();
            let mut switch = SwitchState::default();
            let (mut f, mut q) = (Vec::new(), Vec::new());
            loop {
                let joint: Vec<usize> = (0..env.num_agents()).map(|_| rng.below(NUM_ACTIONS)).collect();
                let r = env.step(&joint).expect("live episode");
                let now = gen
                    .evaluate(&pot, ArrayView2::from_shape((1, d), &state).expect("row"))
                    .expect("finite nets")
                    .remove(0);
                let next = gen
                    .evaluate(&pot, ArrayView2::from_shape((1, d), &r.next_state).expect("row"))
                    .expect("finite nets")
                    .remove(0);
                let dec = switch.decide(mode, &now, &next, r.done, gamma, 0.1, &mut rng);
                f.push(dec.intrinsic_f);
                q.push(dec.q);
                state = r.next_state;
                if r.done {
                    break;
                }
            }
            worst = worst.max(telescoping_audit(&f, &q, gamma).abs());
            episodes += 1;
        }
    }
    CheckResult::new(
        "telescoping",
        tol - worst,
        format!("{episodes} episodes, max |Σγ^t F_t q_t| = {worst:.2e}"),
    )
}

/// Checks on user-supplied fixture games. Invalid fixtures are rejected
/// with the offending row named.
pub fn fixture_checks(opts: &SuiteOptions) -> Result<Vec<CheckResult>, HarnessError> {
    let mut out = Vec::new();
    for (i, path) in opts.fixtures.iter().enumerate() {
        let game = TabularGame::load(path)?;
        let mut rng = game_rng(opts.seed, 7, i);
        let label = path.display();
        out.push(CheckResult::new(
            format!("contraction [{label}]"),
            contraction_on(&game, &mut rng, 20),
            "20 value pairs",
        ));
        let tol = opts.tol_or(1e-8);
        let (res, agree) = fixed_point_on(&game, &mut rng, tol);
        out.push(CheckResult::new(format!("fixed point [{label}]"), res.min(agree), format!("tolerance {tol:e}")));
        if game.n_states <= 4 && game.n_joint_actions <= 3 && game.m() <= 2 {
            let itol = opts.tol_or(1e-9);
            let r = invariance_audit(&game, itol)?;
            out.push(CheckResult::new(
                format!("invariance [{label}]"),
                if r.passes(itol) { itol - r.max_value_gap } else { -1.0 },
                format!("{} generators", r.generators),
            ));
        }
    }
    Ok(out)
}

/// Runs every theory and telescoping suite plus any fixtures.
pub fn run_theory_suite(opts: &SuiteOptions) -> Result<SuiteReport, HarnessError> {
    let mut report = SuiteReport::default();
    report.checks.extend(fixture_checks(opts)?);
    report.checks.push(telescoping_check(opts));
    report.checks.push(contraction_check(opts));
    report.checks.push(fixed_point_check(opts));
    report.checks.push(switch_rule_check(opts));
    report.checks.extend(invariance_check(opts)?);
    report.checks.extend(bound_check(opts)?);
    Ok(report)
}
