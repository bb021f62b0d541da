//! Actor-critic learners for the task agents: clipped-surrogate policy
//! optimisation with generalised advantage estimation.
//!
//! The same PPO routines train the Generator's two policies; see
//! [`crate::generator`].

use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::config::{BaseLearner, RunConfig};
use crate::funcapprox::{FaError, ParamStore};
use crate::rng::Rng;

pub const ADV_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite logits for input row {row}")]
    NonFiniteLogits { row: usize },
    #[error("non-finite {what} loss ({value}) in epoch {epoch}, minibatch {minibatch}")]
    NonFiniteLoss {
        what: &'static str,
        value: f64,
        epoch: usize,
        minibatch: usize,
    },
    #[error(transparent)]
    Net(#[from] FaError),
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Samples from `softmax(logits)`; returns the action and its log-probability.
pub fn sample_logits(logits: &[f64], rng: &mut Rng) -> (usize, f64) {
    let logp = log_softmax(logits);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let a = rng.categorical(&probs);
    (a, logp[a])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaeOutput {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// GAE over one trajectory segment; `bootstrap` is the value of the state
/// after the last step (ignored when that step is terminal).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<GaeOutput, LearnerError> {
    compute_gae_batched(rewards, values, dones, &[bootstrap], gamma, lambda)
}

/// GAE over `k` interleaved segments stored time-major (`row = t·k + j`),
/// with one bootstrap value per segment.
pub fn compute_gae_batched(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<GaeOutput, LearnerError> {
    let n = rewards.len();
    for (what, got) in [("values", values.len()), ("dones", dones.len())] {
        if got != n {
            return Err(LearnerError::Length { what, got, expected: n });
        }
    }
    let k = bootstrap.len();
    if k == 0 || n % k != 0 {
        return Err(LearnerError::Length {
            what: "bootstrap",
            got: k,
            expected: n.max(1),
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = vec![0.0; k];
    let mut next_value = bootstrap.to_vec();
    for row in (0..n).rev() {
        let j = row % k;
        let live = if dones[row] { 0.0 } else { 1.0 };
        let delta = rewards[row] + gamma * next_value[j] * live - values[row];
        adv[row] = delta + gamma * lambda * live * next_adv[j];
        next_adv[j] = adv[row];
        next_value[j] = values[row];
    }
    let value_targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(GaeOutput {
        advantages: adv,
        value_targets,
    })
}

/// Optimiser and loss settings shared by every PPO-trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoParams {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub minibatches: usize,
}

impl PpoParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            clip_eps: cfg.clip_eps,
            value_coef: cfg.value_coef,
            entropy_coef: cfg.entropy_coef,
            lr: cfg.learning_rate,
            max_grad_norm: cfg.grad_clip_norm,
            epochs: cfg.num_epochs,
            minibatches: cfg.num_minibatches,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub updates: usize,
}

fn minibatch_indices(n: usize, minibatches: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let size = n.div_ceil(minibatches.max(1)).max(1);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

/// Clipped-surrogate update of one actor. Returns the mean policy loss,
/// entropy and clip fraction; the actor is untouched when `n == 0`.
pub fn ppo_actor_update(
    actor: &mut ParamStore,
    inputs: ArrayView2<f64>,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    hp: &PpoParams,
    rng: &mut Rng,
) -> Result<LossStats, LearnerError> {
    let n = inputs.nrows();
    for (what, got) in [
        ("actions", actions.len()),
        ("old_log_probs", old_log_probs.len()),
        ("advantages", advantages.len()),
    ] {
        if got != n {
            return Err(LearnerError::Length { what, got, expected: n });
        }
    }
    let mut stats = LossStats::default();
    if n == 0 {
        return Ok(stats);
    }
    let k = actor.out_dim();
    for epoch in 0..hp.epochs {
        for (mb, idx) in minibatch_indices(n, hp.minibatches, rng).into_iter().enumerate() {
            let x = inputs.select(Axis(0), &idx);
            let (logits, tape) = actor.forward(x.view())?;
            let b = idx.len() as f64;
            let mean = idx.iter().map(|&i| advantages[i]).sum::<f64>() / b;
            let var = idx.iter().map(|&i| (advantages[i] - mean).powi(2)).sum::<f64>() / b;
            let std = var.sqrt();
            let mut dlogits = Array2::<f64>::zeros((idx.len(), k));
            let (mut pl, mut ent, mut clipped) = (0.0, 0.0, 0.0);
            for (r, &i) in idx.iter().enumerate() {
                let row = logits.row(r);
                let row = row.as_slice().expect("contiguous logits");
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(LearnerError::NonFiniteLogits { row: i });
                }
                let logp = log_softmax(row);
                let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                let h = entropy(&probs);
                let adv = (advantages[i] - mean) / (std + ADV_EPS);
                let a = actions[i];
                let ratio = (logp[a] - old_log_probs[i]).exp();
                let clipped_ratio = ratio.clamp(1.0 - hp.clip_eps, 1.0 + hp.clip_eps);
                let unclipped_obj = ratio * adv;
                let clipped_obj = clipped_ratio * adv;
                pl -= unclipped_obj.min(clipped_obj);
                ent += h;
                if clipped_ratio != ratio {
                    clipped += 1.0;
                }
                // d(-min(ρA, clip(ρ)A))/d logp_a is -ρA when the unclipped term is active.
                let g_logp = if unclipped_obj <= clipped_obj { -ratio * adv / b } else { 0.0 };
                for j in 0..k {
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    let policy = g_logp * (onehot - probs[j]);
                    let ent_grad = if probs[j] > 0.0 {
                        hp.entropy_coef * probs[j] * (logp[j] + h) / b
                    } else {
                        0.0
                    };
                    dlogits[[r, j]] = policy + ent_grad;
                }
            }
            let loss = pl / b - hp.entropy_coef * ent / b;
            if !loss.is_finite() {
                return Err(LearnerError::NonFiniteLoss {
                    what: "policy",
                    value: loss,
                    epoch,
                    minibatch: mb,
                });
            }
            actor.backward(&tape, dlogits.view())?;
            actor.adam_step(hp.lr, hp.max_grad_norm)?;
            stats.policy_loss += pl / b;
            stats.entropy += ent / b;
            stats.clip_fraction += clipped / b;
            stats.updates += 1;
        }
    }
    let u = stats.updates.max(1) as f64;
    stats.policy_loss /= u;
    stats.entropy /= u;
    stats.clip_fraction /= u;
    Ok(stats)
}

/// Squared-error regression of a scalar critic onto `targets`, weighted by
/// `value_coef`. Returns the mean unweighted squared error.
pub fn value_update(
    critic: &mut ParamStore,
    inputs: ArrayView2<f64>,
    targets: &[f64],
    hp: &PpoParams,
    rng: &mut Rng,
) -> Result<f64, LearnerError> {
    let n = inputs.nrows();
    if targets.len() != n {
        return Err(LearnerError::Length {
            what: "targets",
            got: targets.len(),
            expected: n,
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let (mut total, mut updates) = (0.0, 0usize);
    for epoch in 0..hp.epochs {
        for (mb, idx) in minibatch_indices(n, hp.minibatches, rng).into_iter().enumerate() {
            let x = inputs.select(Axis(0), &idx);
            let (v, tape) = critic.forward(x.view())?;
            let b = idx.len() as f64;
            let mut dv = Array2::<f64>::zeros((idx.len(), 1));
            let mut se = 0.0;
            for (r, &i) in idx.iter().enumerate() {
                let err = v[[r, 0]] - targets[i];
                se += err * err;
                dv[[r, 0]] = 2.0 * hp.value_coef * err / b;
            }
            if !se.is_finite() {
                return Err(LearnerError::NonFiniteLoss {
                    what: "value",
                    value: se,
                    epoch,
                    minibatch: mb,
                });
            }
            critic.backward(&tape, dv.view())?;
            critic.adam_step(hp.lr, hp.max_grad_norm)?;
            total += se / b;
            updates += 1;
        }
    }
    Ok(total / updates as f64)
}

/// Rows gathered for one actor/critic pair.
#[derive(Debug, Clone, Default)]
pub struct PpoSamples {
    pub actor_inputs: Vec<f64>,
    pub critic_inputs: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl PpoSamples {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn matrix(data: &[f64], rows: usize) -> ArrayView2<'_, f64> {
        let cols = if rows == 0 { 0 } else { data.len() / rows };
        ArrayView2::from_shape((rows, cols), data).expect("sample matrix")
    }

    pub fn actor_view(&self) -> ArrayView2<'_, f64> {
        Self::matrix(&self.actor_inputs, self.len())
    }

    pub fn critic_view(&self) -> ArrayView2<'_, f64> {
        Self::matrix(&self.critic_inputs, self.value_targets.len())
    }
}

/// Policy and value update for an actor/critic pair on the same rows.
pub fn ppo_update(
    actor: &mut ParamStore,
    critic: &mut ParamStore,
    samples: &PpoSamples,
    hp: &PpoParams,
    rng: &mut Rng,
) -> Result<LossStats, LearnerError> {
    let mut stats = ppo_actor_update(
        actor,
        samples.actor_view(),
        &samples.actions,
        &samples.old_log_probs,
        &samples.advantages,
        hp,
        rng,
    )?;
    stats.value_loss = value_update(critic, samples.critic_view(), &samples.value_targets, hp, rng)?;
    Ok(stats)
}

/// Training reward for the task agents: the extrinsic reward plus the
/// intrinsic term while the switch is on. The novelty bonus never enters here.
pub fn assemble_shaped_reward(extrinsic: f64, intrinsic: f64, q: bool, cfg: &RunConfig) -> f64 {
    let shaped = if q { cfg.intrinsic_coef * intrinsic } else { 0.0 };
    cfg.extrinsic_coef * extrinsic + shaped
}

/// Column store for one rollout phase, rows ordered time-major
/// (`row = t·num_actors + actor`).
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub num_actors: usize,
    pub n_agents: usize,
    pub state_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub team_rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub q: Vec<bool>,
    /// Whether the switching policy was consulted at this row.
    pub switch_consulted: Vec<bool>,
    /// Switch state entering the row (input flag of the Generator critic).
    pub switch_in: Vec<bool>,
    pub switch_log_probs: Vec<f64>,
    pub theta: Vec<usize>,
    pub theta_log_probs: Vec<f64>,
    pub generator_values: Vec<f64>,
    pub intrinsic: Vec<f64>,
    pub switch_cost: Vec<f64>,
    pub novelty: Vec<f64>,
    /// States after the final row of each actor, for bootstrapping.
    pub last_states: Vec<f64>,
}

/// Agent-side columns of one row.
#[derive(Debug, Clone, Copy)]
pub struct AgentRow<'a> {
    pub state: &'a [f64],
    pub actions: &'a [usize],
    pub log_probs: &'a [f64],
    pub values: &'a [f64],
    pub rewards: &'a [f64],
    pub team_reward: f64,
    pub done: bool,
}

/// Generator-side columns of one row. All zero for plain baselines.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorRow {
    pub q: bool,
    pub switch_consulted: bool,
    pub switch_in: bool,
    pub switch_log_prob: f64,
    pub theta: usize,
    pub theta_log_prob: f64,
    pub value: f64,
    pub intrinsic: f64,
    pub switch_cost: f64,
    pub novelty: f64,
}

impl RolloutBuffer {
    pub fn new(num_actors: usize, n_agents: usize, state_dim: usize) -> Self {
        Self {
            num_actors,
            n_agents,
            state_dim,
            states: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            values: Vec::new(),
            rewards: Vec::new(),
            team_rewards: Vec::new(),
            dones: Vec::new(),
            q: Vec::new(),
            switch_consulted: Vec::new(),
            switch_in: Vec::new(),
            switch_log_probs: Vec::new(),
            theta: Vec::new(),
            theta_log_probs: Vec::new(),
            generator_values: Vec::new(),
            intrinsic: Vec::new(),
            switch_cost: Vec::new(),
            novelty: Vec::new(),
            last_states: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        let (a, n, d) = (self.num_actors, self.n_agents, self.state_dim);
        *self = Self::new(a, n, d);
    }

    pub fn rows(&self) -> usize {
        self.dones.len()
    }

    pub fn push(&mut self, agent: AgentRow<'_>, generator: GeneratorRow) {
        debug_assert_eq!(agent.state.len(), self.state_dim);
        debug_assert_eq!(agent.actions.len(), self.n_agents);
        self.states.extend_from_slice(agent.state);
        self.actions.extend_from_slice(agent.actions);
        self.log_probs.extend_from_slice(agent.log_probs);
        self.values.extend_from_slice(agent.values);
        self.rewards.extend_from_slice(agent.rewards);
        self.team_rewards.push(agent.team_reward);
        self.dones.push(agent.done);
        self.q.push(generator.q);
        self.switch_consulted.push(generator.switch_consulted);
        self.switch_in.push(generator.switch_in);
        self.switch_log_probs.push(generator.switch_log_prob);
        self.theta.push(generator.theta);
        self.theta_log_probs.push(generator.theta_log_prob);
        self.generator_values.push(generator.value);
        self.intrinsic.push(generator.intrinsic);
        self.switch_cost.push(generator.switch_cost);
        self.novelty.push(generator.novelty);
    }

    pub fn state(&self, row: usize) -> &[f64] {
        &self.states[row * self.state_dim..(row + 1) * self.state_dim]
    }

    pub fn states_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.state_dim), &self.states).expect("state matrix")
    }

    pub fn last_states_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.num_actors, self.state_dim), &self.last_states).expect("last states")
    }

    /// Checks that every column has one entry per row (per agent where applicable).
    pub fn check(&self) -> Result<(), LearnerError> {
        let rows = self.rows();
        let n = self.n_agents;
        let cols: [(&'static str, usize, usize); 17] = [
            ("states", self.states.len(), rows * self.state_dim),
            ("actions", self.actions.len(), rows * n),
            ("log_probs", self.log_probs.len(), rows * n),
            ("values", self.values.len(), rows * n),
            ("rewards", self.rewards.len(), rows * n),
            ("team_rewards", self.team_rewards.len(), rows),
            ("q", self.q.len(), rows),
            ("switch_consulted", self.switch_consulted.len(), rows),
            ("switch_in", self.switch_in.len(), rows),
            ("switch_log_probs", self.switch_log_probs.len(), rows),
            ("theta", self.theta.len(), rows),
            ("theta_log_probs", self.theta_log_probs.len(), rows),
            ("generator_values", self.generator_values.len(), rows),
            ("intrinsic", self.intrinsic.len(), rows),
            ("switch_cost", self.switch_cost.len(), rows),
            ("novelty", self.novelty.len(), rows),
            ("last_states", self.last_states.len(), self.num_actors * self.state_dim),
        ];
        for (what, got, expected) in cols {
            if got != expected {
                return Err(LearnerError::Length { what, got, expected });
            }
        }
        if rows % self.num_actors != 0 {
            return Err(LearnerError::Length {
                what: "rows",
                got: rows,
                expected: rows.next_multiple_of(self.num_actors),
            });
        }
        Ok(())
    }
}

/// Per-row outputs of a batched acting pass, laid out `[row · N + agent]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActBatch {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

/// Actor-critic networks for the N task agents.
///
/// MAPPO: one centralised critic on the global state with an agent one-hot;
/// the actor is shared (agent one-hot appended) unless sharing is disabled.
/// IPPO: an independent actor and critic per agent on the plain state.
#[derive(Debug, Clone)]
pub struct AgentLearners {
    wiring: BaseLearner,
    n_agents: usize,
    state_dim: usize,
    shared_actor: bool,
    actors: Vec<ParamStore>,
    critics: Vec<ParamStore>,
}

impl AgentLearners {
    pub fn new(
        wiring: BaseLearner,
        n_agents: usize,
        state_dim: usize,
        n_actions: usize,
        hidden: &[usize],
        share_params: bool,
        rng: &mut Rng,
    ) -> Self {
        let shared_actor = wiring == BaseLearner::Mappo && share_params;
        let actor_in = state_dim + if shared_actor { n_agents } else { 0 };
        let actors = (0..if shared_actor { 1 } else { n_agents })
            .map(|_| ParamStore::mlp(actor_in, hidden, n_actions, rng))
            .collect();
        let critics = match wiring {
            BaseLearner::Mappo => vec![ParamStore::mlp(state_dim + n_agents, hidden, 1, rng)],
            BaseLearner::Ippo => (0..n_agents)
                .map(|_| ParamStore::mlp(state_dim, hidden, 1, rng))
                .collect(),
        };
        Self {
            wiring,
            n_agents,
            state_dim,
            shared_actor,
            actors,
            critics,
        }
    }

    pub fn wiring(&self) -> BaseLearner {
        self.wiring
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn actors(&self) -> &[ParamStore] {
        &self.actors
    }

    pub fn critics(&self) -> &[ParamStore] {
        &self.critics
    }

    fn actor_index(&self, agent: usize) -> usize {
        if self.shared_actor {
            0
        } else {
            agent
        }
    }

    fn critic_index(&self, agent: usize) -> usize {
        match self.wiring {
            BaseLearner::Mappo => 0,
            BaseLearner::Ippo => agent,
        }
    }

    fn with_agent_id(&self, states: ArrayView2<f64>, agent: usize, append: bool) -> Array2<f64> {
        let extra = if append { self.n_agents } else { 0 };
        let mut x = Array2::<f64>::zeros((states.nrows(), self.state_dim + extra));
        x.slice_mut(ndarray::s![.., ..self.state_dim]).assign(&states);
        if append {
            x.column_mut(self.state_dim + agent).fill(1.0);
        }
        x
    }

    pub fn actor_inputs(&self, states: ArrayView2<f64>, agent: usize) -> Array2<f64> {
        self.with_agent_id(states, agent, self.shared_actor)
    }

    pub fn critic_inputs(&self, states: ArrayView2<f64>, agent: usize) -> Array2<f64> {
        self.with_agent_id(states, agent, self.wiring == BaseLearner::Mappo)
    }

    /// Critic values for every (row, agent), laid out `[row · N + agent]`.
    pub fn values(&self, states: ArrayView2<f64>) -> Result<Vec<f64>, LearnerError> {
        let rows = states.nrows();
        let mut out = vec![0.0; rows * self.n_agents];
        for agent in 0..self.n_agents {
            let v = self.critics[self.critic_index(agent)].predict(self.critic_inputs(states, agent).view())?;
            for r in 0..rows {
                out[r * self.n_agents + agent] = v[[r, 0]];
            }
        }
        Ok(out)
    }

    /// Samples every agent's action for each state row.
    pub fn act_batch(&self, states: ArrayView2<f64>, rng: &mut Rng) -> Result<ActBatch, LearnerError> {
        let rows = states.nrows();
        let n = self.n_agents;
        let mut out = ActBatch {
            actions: vec![0; rows * n],
            log_probs: vec![0.0; rows * n],
            values: self.values(states)?,
        };
        let mut logits = Vec::with_capacity(n);
        for agent in 0..n {
            logits.push(self.actors[self.actor_index(agent)].predict(self.actor_inputs(states, agent).view())?);
        }
        for r in 0..rows {
            for (agent, l) in logits.iter().enumerate() {
                let row = l.row(r);
                let row = row.as_slice().expect("contiguous logits");
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(LearnerError::NonFiniteLogits { row: r });
                }
                let (a, lp) = sample_logits(row, rng);
                out.actions[r * n + agent] = a;
                out.log_probs[r * n + agent] = lp;
            }
        }
        Ok(out)
    }

    /// Single-state convenience wrapper: `(action, log_prob, value)` per agent.
    pub fn act(&self, state: &[f64], rng: &mut Rng) -> Result<Vec<(usize, f64, f64)>, LearnerError> {
        let view = ArrayView2::from_shape((1, state.len()), state).map_err(|_| LearnerError::Length {
            what: "state",
            got: state.len(),
            expected: self.state_dim,
        })?;
        if state.len() != self.state_dim {
            return Err(LearnerError::Length {
                what: "state",
                got: state.len(),
                expected: self.state_dim,
            });
        }
        let b = self.act_batch(view, rng)?;
        Ok((0..self.n_agents)
            .map(|i| (b.actions[i], b.log_probs[i], b.values[i]))
            .collect())
    }

    /// PPO update from a full buffer. `shaped` holds the training reward per
    /// `[row · N + agent]`.
    pub fn update(
        &mut self,
        buf: &RolloutBuffer,
        shaped: &[f64],
        gamma: f64,
        lambda: f64,
        hp: &PpoParams,
        rng: &mut Rng,
    ) -> Result<LossStats, LearnerError> {
        buf.check()?;
        let n = self.n_agents;
        let rows = buf.rows();
        if shaped.len() != rows * n {
            return Err(LearnerError::Length {
                what: "shaped rewards",
                got: shaped.len(),
                expected: rows * n,
            });
        }
        let states = buf.states_view();
        let bootstrap = self.values(buf.last_states_view())?;
        let mut per_agent = Vec::with_capacity(n);
        for agent in 0..n {
            let col = |v: &[f64]| -> Vec<f64> { (0..rows).map(|r| v[r * n + agent]).collect() };
            let boot: Vec<f64> = (0..buf.num_actors).map(|j| bootstrap[j * n + agent]).collect();
            let gae = compute_gae_batched(&col(shaped), &col(&buf.values), &buf.dones, &boot, gamma, lambda)?;
            let actor_x = self.actor_inputs(states, agent);
            let critic_x = self.critic_inputs(states, agent);
            per_agent.push(PpoSamples {
                actor_inputs: actor_x.into_raw_vec_and_offset().0,
                critic_inputs: critic_x.into_raw_vec_and_offset().0,
                actions: (0..rows).map(|r| buf.actions[r * n + agent]).collect(),
                old_log_probs: col(&buf.log_probs),
                advantages: gae.advantages,
                value_targets: gae.value_targets,
            });
        }

        let mut stats = LossStats::default();
        let merge = |groups: Vec<usize>| -> PpoSamples {
            let mut s = PpoSamples::default();
            for g in groups {
                let p = &per_agent[g];
                s.actor_inputs.extend_from_slice(&p.actor_inputs);
                s.critic_inputs.extend_from_slice(&p.critic_inputs);
                s.actions.extend_from_slice(&p.actions);
                s.old_log_probs.extend_from_slice(&p.old_log_probs);
                s.advantages.extend_from_slice(&p.advantages);
                s.value_targets.extend_from_slice(&p.value_targets);
            }
            s
        };
        let actor_count = self.actors.len() as f64;
        for (k, actor) in self.actors.iter_mut().enumerate() {
            let groups: Vec<usize> = if self.shared_actor { (0..n).collect() } else { vec![k] };
            let s = merge(groups);
            let st = ppo_actor_update(
                actor,
                s.actor_view(),
                &s.actions,
                &s.old_log_probs,
                &s.advantages,
                hp,
                rng,
            )?;
            stats.policy_loss += st.policy_loss / actor_count;
            stats.entropy += st.entropy / actor_count;
            stats.clip_fraction += st.clip_fraction / actor_count;
            stats.updates += st.updates;
        }
        let critic_count = self.critics.len();
        for (k, critic) in self.critics.iter_mut().enumerate() {
            let groups: Vec<usize> = if critic_count == 1 { (0..n).collect() } else { vec![k] };
            let s = merge(groups);
            stats.value_loss += value_update(critic, s.critic_view(), &s.value_targets, hp, rng)? / critic_count as f64;
        }
        Ok(stats)
    }

    /// `(label, network)` pairs for checkpointing.
    pub fn networks(&self) -> Vec<(String, &ParamStore)> {
        let mut out = Vec::new();
        for (i, a) in self.actors.iter().enumerate() {
            out.push((format!("actor{i}"), a));
        }
        for (i, c) in self.critics.iter().enumerate() {
            out.push((format!("critic{i}"), c));
        }
        out
    }
}
