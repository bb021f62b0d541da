//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. `ACCEPTANCE_ONLY=1,5,12` restricts the run to a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use ligs_core::config::RunConfig;
use ligs_core::funcapprox::ParamStore;
use ligs_core::learners::compute_gae;
use ligs_core::novelty::{RndPair, VisitCounter};
use ligs_core::{Algorithm, ExperimentId, Rng};
use ligs_harness::verify::{
    bound_check, contraction_check, fixed_point_check, invariance_check, telescoping_check, CheckResult,
};
use ligs_harness::{compare_runs, run_experiment, ExperimentSpec, HarnessError, RunSummary, SuiteOptions};
use ndarray::{Array2, ArrayView2};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    fn from_checks(checks: &[CheckResult]) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        let detail = checks
            .iter()
            .map(|c| format!("{} [{}] {}", c.name, if c.passed { "ok" } else { "FAIL" }, c.detail))
            .collect::<Vec<_>>()
            .join("; ");
        Self { passed, detail }
    }
}

struct Ctx {
    runs: PathBuf,
    opts: SuiteOptions,
    summaries: Vec<(String, RunSummary)>,
}

impl Ctx {
    /// Trains `algorithm` on `experiment` for every seed unless the metrics
    /// file already exists from an earlier criterion.
    fn train(&mut self, experiment: ExperimentId, algorithm: Algorithm, base: Option<&str>) -> Result<(), HarnessError> {
        for seed in SEEDS {
            let mut cfg = RunConfig::defaults_for(experiment);
            cfg.set("algorithm", algorithm.token())?;
            if let Some(b) = base {
                cfg.set("base_learner", b)?;
            }
            cfg.seed = seed;
            cfg.validate()?;
            let spec = ExperimentSpec::new(cfg, &self.runs);
            let key = spec.metrics_path().display().to_string();
            if self.summaries.iter().any(|(k, _)| *k == key) {
                continue;
            }
            let t = Instant::now();
            let summary = run_experiment(&spec)?;
            println!(
                "    trained {} {} seed {seed}: {} episodes in {:.0}s",
                experiment.token(),
                algorithm.token(),
                summary.episodes,
                t.elapsed().as_secs_f64()
            );
            self.summaries.push((key, summary));
        }
        Ok(())
    }

    fn summaries_for(&self, experiment: ExperimentId, algorithm: Algorithm) -> Vec<&RunSummary> {
        let dir = self.runs.join(experiment.token()).join(algorithm.token());
        self.summaries
            .iter()
            .filter(|(k, _)| Path::new(k).parent() == Some(dir.as_path()))
            .map(|(_, s)| s)
            .collect()
    }
}

fn telescoping(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    Ok(Outcome::from_checks(&[telescoping_check(&ctx.opts)]))
}

fn contraction(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    Ok(Outcome::from_checks(&[contraction_check(&ctx.opts)]))
}

fn fixed_point(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    Ok(Outcome::from_checks(&[fixed_point_check(&ctx.opts)]))
}

fn invariance(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    Ok(Outcome::from_checks(&invariance_check(&ctx.opts)?))
}

fn approximation_bound(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    Ok(Outcome::from_checks(&bound_check(&ctx.opts)?))
}

fn weighted_loss(p: &ParamStore, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (p.predict(x.view()).expect("shapes") * c).sum()
}

fn gradients(_: &mut Ctx) -> Result<Outcome, HarnessError> {
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut params = 0;
    for net in 0..50u64 {
        let mut rng = Rng::new(10_000 + net);
        let d = 1 + rng.below(6);
        let depth = 1 + rng.below(2);
        let hidden: Vec<usize> = (0..depth).map(|_| 1 + rng.below(8)).collect();
        let m = 1 + rng.below(4);
        let batch = 1 + rng.below(5);
        let mut p = ParamStore::mlp(d, &hidden, m, &mut rng);
        for w in p.params_mut().iter_mut() {
            *w += 0.1 * rng.normal();
        }
        let x = Array2::from_shape_fn((batch, d), |_| rng.normal());
        let c = Array2::from_shape_fn((batch, m), |_| rng.normal());
        let (_, tape) = p.forward(x.view()).expect("shapes");
        p.zero_grads();
        p.backward(&tape, c.view()).expect("shapes");
        let analytic = p.grads().to_vec();
        for (k, &g) in analytic.iter().enumerate() {
            let orig = p.params()[k];
            p.params_mut()[k] = orig + eps;
            let up = weighted_loss(&p, &x, &c);
            p.params_mut()[k] = orig - eps;
            let down = weighted_loss(&p, &x, &c);
            p.params_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let scale = g.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((g - numeric).abs() / scale);
            params += 1;
        }
    }
    Ok(Outcome::new(
        worst < 1e-4,
        format!("50 nets, {params} parameters, max relative error {worst:.2e}"),
    ))
}

fn gae_oracle(_: &mut Ctx) -> Result<Outcome, HarnessError> {
    let mut rng = Rng::new(77);
    let mut worst = 0.0f64;
    let mut episodes = 0;
    for len in 1..=8usize {
        for _ in 0..500 {
            let gamma = rng.uniform_range(0.5, 1.0);
            let rewards: Vec<f64> = (0..len).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
            let values: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
            let mut dones = vec![false; len];
            dones[len - 1] = true;
            let g = compute_gae(&rewards, &values, &dones, rng.normal(), gamma, 1.0)
                .map_err(|e| HarnessError::Invalid(e.to_string()))?;
            for t in 0..len {
                let mut ret = 0.0;
                let mut disc = 1.0;
                for r in &rewards[t..] {
                    ret += disc * r;
                    disc *= gamma;
                }
                worst = worst.max((g.advantages[t] - (ret - values[t])).abs());
                worst = worst.max((g.value_targets[t] - ret).abs());
            }
            episodes += 1;
        }
    }
    Ok(Outcome::new(
        worst < 1e-10,
        format!("{episodes} episodes of 1..=8 steps, max deviation {worst:.2e}"),
    ))
}

fn corridor_plug_in(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    ctx.train(ExperimentId::Corridor, Algorithm::Ligs, Some("ippo"))?;
    ctx.train(ExperimentId::Corridor, Algorithm::Ippo, None)?;
    let report = compare_runs(&ctx.runs.join("corridor"), "ligs", "ippo", "ret_ext")?;
    let passed = report.a.median > 0.0 && report.b.median <= 0.0;
    Ok(Outcome::new(
        passed,
        format!(
            "ligs median {:.3} {:?}, ippo median {:.3} {:?}",
            report.a.median, report.a.per_seed, report.b.median, report.b.per_seed
        ),
    ))
}

fn switching_ablation(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    ctx.train(ExperimentId::Corridor, Algorithm::Ligs, Some("ippo"))?;
    ctx.train(ExperimentId::Corridor, Algorithm::LigsAlwaysOn, Some("ippo"))?;
    ctx.train(ExperimentId::Corridor, Algorithm::LigsRandomSwitch, Some("ippo"))?;
    let dir = ctx.runs.join("corridor");
    let top = compare_runs(&dir, "ligs", "ligs_always_on", "ret_ext")?;
    let low = compare_runs(&dir, "ligs_always_on", "ligs_random_switch", "ret_ext")?;
    let fractions: Vec<f64> = ctx
        .summaries_for(ExperimentId::Corridor, Algorithm::LigsRandomSwitch)
        .iter()
        .map(|s| s.switch_fraction())
        .collect();
    let fractions_ok = !fractions.is_empty() && fractions.iter().all(|f| (f - 0.5).abs() <= 0.02);
    let passed = top.difference >= 0.0 && low.difference >= 0.0 && fractions_ok;
    Ok(Outcome::new(
        passed,
        format!(
            "medians ligs {:.3}, always_on {:.3}, random_switch {:.3}; random switch fractions {:?}",
            top.a.median, top.b.median, low.b.median, fractions
        ),
    ))
}

fn sparse_reward(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    ctx.train(ExperimentId::Foraging3, Algorithm::Ligs, None)?;
    ctx.train(ExperimentId::Foraging3, Algorithm::Mappo, None)?;
    let report = compare_runs(&ctx.runs.join("foraging3"), "ligs", "mappo", "success")?;
    let passed = report.a.median > 0.5 && report.b.median > 0.0;
    Ok(Outcome::new(
        passed,
        format!(
            "success medians ligs {:.3} {:?}, mappo {:.3} {:?}",
            report.a.median, report.a.per_seed, report.b.median, report.b.per_seed
        ),
    ))
}

fn novelty_decay(_: &mut Ctx) -> Result<Outcome, HarnessError> {
    let mut counter = VisitCounter::default();
    let mut exact = true;
    let keys: [&[u32]; 3] = [&[0, 0], &[3, 1], &[0, 0, 1]];
    for round in 0..200u64 {
        for key in keys {
            let expected = 1.0 / (round as f64 + 1.0);
            exact &= counter.novelty(key) == expected;
        }
    }
    let mut rng = Rng::new(21);
    let mut pair = RndPair::new(8, &[32, 32], 8, &mut rng);
    let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let view = ArrayView2::from_shape((1, 8), &x).expect("row");
    let before = pair.novelty(&x).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    for _ in 0..500 {
        pair.update(view, 1e-3, 1.0).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    }
    let after = pair.novelty(&x).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let ratio = before / after;
    Ok(Outcome::new(
        exact && ratio >= 10.0,
        format!("count values exact: {exact}; distillation error {before:.3e} -> {after:.3e} ({ratio:.1}x)"),
    ))
}

fn determinism(ctx: &mut Ctx) -> Result<Outcome, HarnessError> {
    let bin = env!("CARGO_BIN_EXE_ligs");
    let cases = [
        ("foraging1", "ligs", "novelty_kind=rnd"),
        ("foraging2", "mappo_rnd", "novelty_kind=rnd"),
        ("foraging3", "ligs_random_switch", "novelty_kind=count"),
        ("corridor", "ligs", "base_learner=ippo"),
    ];
    let root = ctx.runs.join("determinism");
    let mut details = Vec::new();
    let mut passed = true;
    for (exp, alg, extra) in cases {
        let cfg_path = root.join(format!("{exp}_{alg}.cfg"));
        fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
        fs::write(&cfg_path, format!("experiment_id={exp}\nalgorithm={alg}\n{extra}\nseed=9\n"))
            .map_err(|e| HarnessError::io(&cfg_path, e))?;
        let mut bytes = Vec::new();
        for copy in ["a", "b"] {
            let out = root.join(copy);
            let status = Command::new(bin)
                .args(["train", "--steps", "6000", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .output()
                .map_err(|e| HarnessError::io(bin, e))?;
            if !status.status.success() {
                return Err(HarnessError::Invalid(format!(
                    "train {exp} {alg} failed: {}",
                    String::from_utf8_lossy(&status.stderr)
                )));
            }
            let csv = out.join(exp).join(alg).join("9.csv");
            bytes.push(fs::read(&csv).map_err(|e| HarnessError::io(&csv, e))?);
        }
        let same = bytes[0] == bytes[1];
        passed &= same;
        details.push(format!("{exp}/{alg}: {} bytes {}", bytes[0].len(), if same { "identical" } else { "DIFFER" }));
    }
    Ok(Outcome::new(passed, details.join(", ")))
}

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Result<Outcome, HarnessError>);

const CRITERIA: &[Criterion] = &[
    (1, "telescoping invariance", telescoping),
    (2, "operator contraction", contraction),
    (3, "fixed point", fixed_point),
    (4, "policy invariance and weak improvement", invariance),
    (5, "linear approximation bound", approximation_bound),
    (6, "gradient correctness", gradients),
    (7, "GAE oracle equivalence", gae_oracle),
    (8, "corridor plug-in ordering", corridor_plug_in),
    (9, "switching ablation ordering", switching_ablation),
    (10, "sparse-reward sanity", sparse_reward),
    (11, "novelty decay", novelty_decay),
    (12, "determinism", determinism),
];

fn selected() -> Option<Vec<u32>> {
    let raw = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(raw.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary run directory");
    let mut ctx = Ctx {
        runs: dir.path().to_path_buf(),
        opts: SuiteOptions::default(),
        summaries: Vec::new(),
    };
    let only = selected();
    let mut failed = Vec::new();
    let total = Instant::now();
    for &(id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = run(&mut ctx).unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let secs = t.elapsed().as_secs_f64();
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2} ({name}, {secs:.1}s): {}", outcome.detail);
        if !outcome.passed {
            failed.push(id);
        }
    }
    println!("acceptance finished in {:.0}s", total.elapsed().as_secs_f64());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
