//! Seeded training runs: rollout collection across parallel environment
//! copies, then novelty, Generator and agent updates, repeated until the
//! step budget is spent.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ligs_core::config::{Algorithm, BaseLearner, CountKey, NoveltyKind, RunConfig};
use ligs_core::envs::{EnvKind, GridEnv, NUM_ACTIONS};
use ligs_core::generator::{GenEval, GeneratorPolicies, PotentialNet, SwitchMode, SwitchState};
use ligs_core::learners::{assemble_shaped_reward, AgentLearners, AgentRow, GeneratorRow, PpoParams, RolloutBuffer};
use ligs_core::metrics::{metrics_path, MetricsRow, MetricsWriter};
use ligs_core::novelty::{state_action_input, RndPair, VisitCounter};
use ligs_core::rng::{streams, Rng};
use ndarray::ArrayView2;

use crate::error::HarnessError;

/// One training run: configuration plus where its artifacts go.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    /// Dump a JSON-lines trace of the first environment copy.
    pub trace: bool,
}

impl ExperimentSpec {
    pub fn new(config: RunConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out_dir: out_dir.into(),
            trace: false,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir
            .join(self.config.experiment_id.token())
            .join(self.config.algorithm.token())
    }

    pub fn metrics_path(&self) -> PathBuf {
        metrics_path(
            &self.out_dir,
            self.config.experiment_id.token(),
            self.config.algorithm.token(),
            self.config.seed,
        )
    }

    pub fn heatmap_path(&self) -> PathBuf {
        self.run_dir().join(format!("{}_heatmap.csv", self.config.seed))
    }

    pub fn trace_path(&self) -> PathBuf {
        self.run_dir().join(format!("{}_trace.jsonl", self.config.seed))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir().join(format!("{}_checkpoints", self.config.seed))
    }
}

/// Which optional modules a run constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleAudit {
    pub generator: bool,
    pub novelty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub metrics_path: PathBuf,
    pub heatmap_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub episodes: u64,
    pub env_steps: u64,
    /// Steps on which intrinsic rewards were active.
    pub active_steps: u64,
    /// Number of switch-on events.
    pub switch_ons: u64,
    pub modules: ModuleAudit,
}

impl RunSummary {
    pub fn switch_fraction(&self) -> f64 {
        if self.env_steps == 0 {
            return 0.0;
        }
        self.active_steps as f64 / self.env_steps as f64
    }
}

enum Novelty {
    Rnd(RndPair),
    Count(VisitCounter, CountKey),
}

struct GeneratorStack {
    mode: SwitchMode,
    potentials: PotentialNet,
    policies: GeneratorPolicies,
    switches: Vec<SwitchState>,
    rng: Rng,
}

#[derive(Debug, Clone, Default)]
struct EpisodeTally {
    ret_ext: f64,
    ret_int: f64,
    active: u64,
    success: bool,
}

fn matrix(rows: &[Vec<f64>]) -> ndarray::Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    ndarray::Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("rectangular states")
}

fn single(state: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, state.len()), state).expect("row view")
}

fn base_wiring(cfg: &RunConfig) -> BaseLearner {
    match cfg.algorithm {
        Algorithm::Mappo | Algorithm::MappoRnd => BaseLearner::Mappo,
        Algorithm::Ippo => BaseLearner::Ippo,
        _ => cfg.base_learner,
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| HarnessError::io(path, e))?))
}

/// Runs one experiment to its step budget and writes metrics, heatmap,
/// checkpoints and (optionally) a trace.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunSummary, HarnessError> {
    let cfg = &spec.config;
    cfg.validate()?;
    let kind = EnvKind::from(cfg.experiment_id);
    let k = cfg.num_actors;
    let root = Rng::new(cfg.seed);
    let env_root = root.fork(streams::ENV);
    let mut envs: Vec<GridEnv> = (0..k).map(|j| GridEnv::new(kind, env_root.fork(j as u64))).collect();
    let mut states: Vec<Vec<f64>> = envs.iter().map(GridEnv::encode_state).collect();
    let n = envs[0].num_agents();
    let d = envs[0].state_dim();
    let (width, height) = (envs[0].width(), envs[0].height());

    let mut init = root.fork(streams::INIT);
    let mut act_rng = root.fork(streams::AGENTS);
    let mut update_rng = root.fork(streams::MINIBATCH);
    let mut agents = AgentLearners::new(base_wiring(cfg), n, d, NUM_ACTIONS, &cfg.hidden, cfg.share_params, &mut init);
    let mut generator = cfg.algorithm.uses_generator().then(|| {
        let mut g_init = root.fork(streams::GENERATOR).fork(0);
        GeneratorStack {
            mode: SwitchMode::from_config(cfg),
            potentials: PotentialNet::new(d, &cfg.hidden, cfg.generator_action_count, &mut g_init),
            policies: GeneratorPolicies::new(d, cfg.generator_action_count, &cfg.hidden, &mut g_init),
            switches: vec![SwitchState::default(); k],
            rng: root.fork(streams::GENERATOR).fork(1),
        }
    });
    let mut novelty = cfg.algorithm.uses_novelty().then(|| {
        let kind = if cfg.algorithm == Algorithm::MappoRnd {
            NoveltyKind::Rnd
        } else {
            cfg.novelty_kind
        };
        match kind {
            NoveltyKind::Rnd => {
                let mut n_init = root.fork(streams::NOVELTY);
                Novelty::Rnd(RndPair::new(d + n * NUM_ACTIONS, &cfg.hidden, cfg.l_output_size, &mut n_init))
            }
            NoveltyKind::Count => Novelty::Count(VisitCounter::default(), cfg.count_key),
        }
    });
    let modules = ModuleAudit {
        generator: generator.is_some(),
        novelty: novelty.is_some(),
    };

    let mut metrics = MetricsWriter::create(spec.metrics_path())?;
    let mut trace = if spec.trace {
        Some(create_file(&spec.trace_path())?)
    } else {
        None
    };
    let mut heatmap = vec![0u64; width * height];
    let hp = PpoParams::from_config(cfg);
    let mut buf = RolloutBuffer::new(k, n, d);
    let mut tallies = vec![EpisodeTally::default(); k];
    let mut summary = RunSummary {
        metrics_path: spec.metrics_path(),
        heatmap_path: spec.heatmap_path(),
        checkpoint_dir: spec.checkpoint_dir(),
        episodes: 0,
        env_steps: 0,
        active_steps: 0,
        switch_ons: 0,
        modules,
    };

    let mut now_evals: Vec<GenEval> = match &generator {
        Some(g) => g
            .policies
            .evaluate(&g.potentials, matrix(&states).view())
            .map_err(|e| HarnessError::runtime("generator", 0, e))?,
        None => Vec::new(),
    };

    while summary.env_steps < cfg.total_env_steps {
        buf.clear();
        let mut shaped: Vec<f64> = Vec::with_capacity(cfg.rollout_length * k * n);
        let mut novelty_inputs: Vec<f64> = Vec::new();
        for _ in 0..cfg.rollout_length {
            let step = summary.env_steps;
            let current = matrix(&states);
            let acts = agents
                .act_batch(current.view(), &mut act_rng)
                .map_err(|e| HarnessError::runtime("rollout", step, e))?;
            let switch_in: Vec<bool> = match &generator {
                Some(g) => g.switches.iter().map(SwitchState::active).collect(),
                None => vec![false; k],
            };
            let gen_values = match &generator {
                Some(g) => g
                    .policies
                    .values(current.view(), &switch_in)
                    .map_err(|e| HarnessError::runtime("generator", step, e))?,
                None => vec![0.0; k],
            };

            let mut results = Vec::with_capacity(k);
            let mut cells = Vec::with_capacity(k);
            let mut keys = Vec::with_capacity(k);
            for (j, env) in envs.iter_mut().enumerate() {
                cells.push(env.agents().to_vec());
                if matches!(novelty, Some(Novelty::Count(..))) {
                    keys.push(env.grid_key());
                }
                let joint = &acts.actions[j * n..(j + 1) * n];
                let r = env.step(joint).map_err(|e| HarnessError::runtime("env", step, e))?;
                if j == 0 {
                    if let Some(w) = trace.as_mut() {
                        let line = serde_json::to_string(&env.trace_record(joint, &r.per_agent_reward))
                            .map_err(|e| HarnessError::runtime("trace", step, e))?;
                        writeln!(w, "{line}").map_err(|e| HarnessError::io(spec.trace_path(), e))?;
                    }
                }
                results.push(r);
            }

            let bonus: Vec<f64> = match novelty.as_mut() {
                Some(Novelty::Rnd(pair)) => {
                    let mut x = Vec::with_capacity(k * pair.input_dim());
                    for j in 0..k {
                        x.extend(state_action_input(&states[j], &acts.actions[j * n..(j + 1) * n], NUM_ACTIONS));
                    }
                    let view = ArrayView2::from_shape((k, pair.input_dim()), &x).expect("novelty inputs");
                    let raw = pair
                        .novelty_batch(view)
                        .map_err(|e| HarnessError::runtime("novelty", step, e))?;
                    pair.observe(&raw);
                    novelty_inputs.extend_from_slice(&x);
                    raw.iter().map(|&r| pair.normalize(r)).collect()
                }
                Some(Novelty::Count(counter, key)) => (0..k)
                    .map(|j| {
                        let mut key_vec = std::mem::take(&mut keys[j]);
                        if *key == CountKey::StateAction {
                            key_vec.extend(acts.actions[j * n..(j + 1) * n].iter().map(|&a| a as u32));
                        }
                        counter.novelty(&key_vec)
                    })
                    .collect(),
                None => vec![0.0; k],
            };

            let next_states: Vec<Vec<f64>> = results.iter().map(|r| r.next_state.clone()).collect();
            let next_evals = match &generator {
                Some(g) => g
                    .policies
                    .evaluate(&g.potentials, matrix(&next_states).view())
                    .map_err(|e| HarnessError::runtime("generator", step, e))?,
                None => Vec::new(),
            };

            for (j, r) in results.iter().enumerate() {
                let decision = match generator.as_mut() {
                    Some(g) => Some(g.switches[j].decide(
                        g.mode,
                        &now_evals[j],
                        &next_evals[j],
                        r.done,
                        cfg.gamma,
                        cfg.switch_cost,
                        &mut g.rng,
                    )),
                    None => None,
                };
                let dec = decision.unwrap_or_default();
                for i in 0..n {
                    let ext = r.per_agent_reward[i];
                    let reward = if cfg.algorithm == Algorithm::MappoRnd {
                        cfg.extrinsic_coef * ext + cfg.intrinsic_coef * bonus[j]
                    } else {
                        assemble_shaped_reward(ext, dec.intrinsic_f, dec.q, cfg)
                    };
                    shaped.push(reward);
                }
                buf.push(
                    AgentRow {
                        state: &states[j],
                        actions: &acts.actions[j * n..(j + 1) * n],
                        log_probs: &acts.log_probs[j * n..(j + 1) * n],
                        values: &acts.values[j * n..(j + 1) * n],
                        rewards: &r.per_agent_reward,
                        team_reward: r.team_reward,
                        done: r.done,
                    },
                    GeneratorRow {
                        q: dec.q,
                        switch_consulted: dec.switch_consulted,
                        switch_in: switch_in[j],
                        switch_log_prob: dec.switch_log_prob,
                        theta: dec.theta,
                        theta_log_prob: dec.theta_log_prob,
                        value: gen_values[j],
                        intrinsic: dec.intrinsic_f,
                        switch_cost: dec.switch_cost_charge,
                        novelty: if generator.is_some() { bonus[j] } else { 0.0 },
                    },
                );

                if dec.switch_on {
                    summary.switch_ons += 1;
                    for p in &cells[j] {
                        heatmap[p.y * width + p.x] += 1;
                    }
                }
                summary.env_steps += 1;
                let tally = &mut tallies[j];
                tally.ret_ext += r.team_reward;
                if dec.q {
                    tally.ret_int += dec.intrinsic_f;
                    tally.active += 1;
                    summary.active_steps += 1;
                }
                tally.success |= r.info.success;
                if r.done {
                    metrics.emit(&MetricsRow {
                        step: summary.env_steps,
                        episode_return_extrinsic: tally.ret_ext,
                        episode_return_intrinsic: tally.ret_int,
                        switch_activations: tally.active,
                        win_or_success: tally.success,
                        wall_seed: cfg.seed,
                    })?;
                    summary.episodes += 1;
                    *tally = EpisodeTally::default();
                    states[j] = envs[j].reset();
                    if let Some(g) = &generator {
                        now_evals[j] = g
                            .policies
                            .evaluate(&g.potentials, single(&states[j]))
                            .map_err(|e| HarnessError::runtime("generator", summary.env_steps, e))?
                            .remove(0);
                    }
                } else {
                    states[j] = next_states[j].clone();
                    if generator.is_some() {
                        now_evals[j] = next_evals[j].clone();
                    }
                }
            }
        }
        buf.last_states = states.concat();

        let step = summary.env_steps;
        if let Some(Novelty::Rnd(pair)) = novelty.as_mut() {
            let width = pair.input_dim();
            let rows = novelty_inputs.len() / width;
            let mut order: Vec<usize> = (0..rows).collect();
            update_rng.shuffle(&mut order);
            let per = rows.div_ceil(cfg.num_minibatches);
            for chunk in order.chunks(per) {
                let mut x = Vec::with_capacity(chunk.len() * width);
                for &r in chunk {
                    x.extend_from_slice(&novelty_inputs[r * width..(r + 1) * width]);
                }
                let view = ArrayView2::from_shape((chunk.len(), width), &x).expect("novelty batch");
                pair.update(view, cfg.learning_rate, cfg.grad_clip_norm)
                    .map_err(|e| HarnessError::runtime("novelty update", step, e))?;
            }
        }
        if let Some(g) = generator.as_mut() {
            let flags: Vec<bool> = g.switches.iter().map(SwitchState::active).collect();
            g.policies
                .update(&buf, &flags, cfg, &hp, &mut update_rng)
                .map_err(|e| HarnessError::runtime("generator update", step, e))?;
        }
        agents
            .update(&buf, &shaped, cfg.gamma, cfg.gae_lambda, &hp, &mut update_rng)
            .map_err(|e| HarnessError::runtime("agent update", step, e))?;
    }

    if let Some(w) = trace.as_mut() {
        w.flush().map_err(|e| HarnessError::io(spec.trace_path(), e))?;
    }
    write_heatmap(&spec.heatmap_path(), &heatmap, width)?;
    let mut nets = agents.networks();
    if let Some(g) = &generator {
        nets.extend(g.policies.networks());
    }
    if let Some(Novelty::Rnd(pair)) = &novelty {
        nets.push(("rnd_predictor".into(), pair.predictor()));
    }
    write_checkpoints(&spec.checkpoint_dir(), &nets)?;
    Ok(summary)
}

fn write_heatmap(path: &Path, counts: &[u64], width: usize) -> Result<(), HarnessError> {
    let mut w = create_file(path)?;
    for row in counts.chunks(width) {
        let line: Vec<String> = row.iter().map(u64::to_string).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_checkpoints(dir: &Path, nets: &[(String, &ligs_core::funcapprox::ParamStore)]) -> Result<(), HarnessError> {
    for (label, net) in nets {
        let path = dir.join(format!("{label}.bin"));
        let mut w = create_file(&path)?;
        net.write_checkpoint(&mut w)
            .map_err(|e| HarnessError::runtime("checkpoint", 0, e))?;
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}
