//! The Generator: a switching policy deciding where intrinsic rewards are
//! active, a policy choosing the potential channel θ, and the
//! potential-difference reward `F = γ·u_{t+1} − u_t` it hands to the agents.
//!
//! The scalar potential is `u = f(s)[θ]` for a fixed random network `f`.
//! Potentials are zero at every switch-on, switch-off and episode end, so the
//! discounted sum of `F` over any episode vanishes.

use ndarray::{Array2, ArrayView2};

use crate::config::{Algorithm, RunConfig, SwitchOff};
use crate::funcapprox::ParamStore;
use crate::learners::{
    compute_gae_batched, ppo_actor_update, sample_logits, softmax, value_update, LearnerError, LossStats, PpoParams,
    RolloutBuffer,
};
use crate::rng::Rng;

/// How the switch value `q` is produced at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SwitchMode {
    /// Consult the switching policy while off; once on, persist and terminate
    /// with the given probability at each step end.
    Option { terminate_prob: f64 },
    /// Consult the switching policy at every state.
    Policy,
    /// Fair coin at every state.
    Random,
    /// Always on.
    AlwaysOn,
}

impl SwitchMode {
    pub fn from_config(cfg: &RunConfig) -> Self {
        match cfg.algorithm {
            Algorithm::LigsRandomSwitch => SwitchMode::Random,
            Algorithm::LigsAlwaysOn => SwitchMode::AlwaysOn,
            _ => match cfg.switch_off {
                SwitchOff::Option => SwitchMode::Option {
                    terminate_prob: cfg.option_terminate_prob,
                },
                SwitchOff::Policy => SwitchMode::Policy,
            },
        }
    }

    /// Whether the switching policy is ever consulted (and therefore trained).
    pub fn learned(self) -> bool {
        matches!(self, SwitchMode::Option { .. } | SwitchMode::Policy)
    }
}

/// Fixed random network producing the `m` candidate potentials of a state.
#[derive(Debug, Clone)]
pub struct PotentialNet {
    net: ParamStore,
}

impl PotentialNet {
    pub fn new(state_dim: usize, hidden: &[usize], m: usize, rng: &mut Rng) -> Self {
        Self {
            net: ParamStore::mlp(state_dim, hidden, m, rng),
        }
    }

    pub fn net(&self) -> &ParamStore {
        &self.net
    }

    pub fn potentials(&self, states: ArrayView2<f64>) -> Result<Array2<f64>, LearnerError> {
        Ok(self.net.predict(states)?)
    }
}

/// Switching actor, reward actor and the shared Generator critic. The critic
/// sees the state plus the incoming switch flag.
#[derive(Debug, Clone)]
pub struct GeneratorPolicies {
    pub switch_actor: ParamStore,
    pub reward_actor: ParamStore,
    pub critic: ParamStore,
}

/// Generator network outputs for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct GenEval {
    pub switch_logits: [f64; 2],
    pub reward_logits: Vec<f64>,
    pub potentials: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorLoss {
    pub switch: LossStats,
    pub reward: LossStats,
    pub value_loss: f64,
}

impl GeneratorPolicies {
    pub fn new(state_dim: usize, m: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        Self {
            switch_actor: ParamStore::mlp(state_dim, hidden, 2, rng),
            reward_actor: ParamStore::mlp(state_dim, hidden, m, rng),
            critic: ParamStore::mlp(state_dim + 1, hidden, 1, rng),
        }
    }

    pub fn m(&self) -> usize {
        self.reward_actor.out_dim()
    }

    /// Actor and potential outputs for every state row.
    pub fn evaluate(&self, pot: &PotentialNet, states: ArrayView2<f64>) -> Result<Vec<GenEval>, LearnerError> {
        let sw = self.switch_actor.predict(states)?;
        let rw = self.reward_actor.predict(states)?;
        let pv = pot.potentials(states)?;
        Ok((0..states.nrows())
            .map(|r| GenEval {
                switch_logits: [sw[[r, 0]], sw[[r, 1]]],
                reward_logits: rw.row(r).to_vec(),
                potentials: pv.row(r).to_vec(),
            })
            .collect())
    }

    fn critic_inputs(states: ArrayView2<f64>, flags: &[bool]) -> Array2<f64> {
        let d = states.ncols();
        let mut x = Array2::<f64>::zeros((states.nrows(), d + 1));
        x.slice_mut(ndarray::s![.., ..d]).assign(&states);
        for (r, &f) in flags.iter().enumerate() {
            x[[r, d]] = f64::from(u8::from(f));
        }
        x
    }

    pub fn values(&self, states: ArrayView2<f64>, flags: &[bool]) -> Result<Vec<f64>, LearnerError> {
        let v = self.critic.predict(Self::critic_inputs(states, flags).view())?;
        Ok(v.column(0).to_vec())
    }

    /// Two PPO updates on the Generator reward stream: the switching actor on
    /// rows where it was consulted, the reward actor on rows with `q = 1`.
    pub fn update(
        &mut self,
        buf: &RolloutBuffer,
        bootstrap_flags: &[bool],
        cfg: &RunConfig,
        hp: &PpoParams,
        rng: &mut Rng,
    ) -> Result<GeneratorLoss, LearnerError> {
        buf.check()?;
        let rows = buf.rows();
        let rewards: Vec<f64> = (0..rows)
            .map(|r| {
                generator_reward(
                    buf.team_rewards[r],
                    buf.intrinsic[r],
                    buf.q[r],
                    buf.switch_cost[r],
                    buf.novelty[r],
                )
            })
            .collect();
        let bootstrap = self.values(buf.last_states_view(), bootstrap_flags)?;
        let gae = compute_gae_batched(
            &rewards,
            &buf.generator_values,
            &buf.dones,
            &bootstrap,
            cfg.generator_gamma,
            cfg.gae_lambda,
        )?;
        let states = buf.states_view();

        let pick = |mask: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..rows).filter(|&r| mask(r)).collect() };
        let switch_rows = pick(&|r| buf.switch_consulted[r]);
        let reward_rows = pick(&|r| buf.q[r]);

        let mut loss = GeneratorLoss::default();
        let sx = states.select(ndarray::Axis(0), &switch_rows);
        loss.switch = ppo_actor_update(
            &mut self.switch_actor,
            sx.view(),
            &switch_rows.iter().map(|&r| usize::from(buf.q[r])).collect::<Vec<_>>(),
            &switch_rows.iter().map(|&r| buf.switch_log_probs[r]).collect::<Vec<_>>(),
            &switch_rows.iter().map(|&r| gae.advantages[r]).collect::<Vec<_>>(),
            hp,
            rng,
        )?;
        // A single channel has a constant log-probability; nothing to learn.
        if self.m() > 1 {
            let rx = states.select(ndarray::Axis(0), &reward_rows);
            loss.reward = ppo_actor_update(
                &mut self.reward_actor,
                rx.view(),
                &reward_rows.iter().map(|&r| buf.theta[r]).collect::<Vec<_>>(),
                &reward_rows.iter().map(|&r| buf.theta_log_probs[r]).collect::<Vec<_>>(),
                &reward_rows.iter().map(|&r| gae.advantages[r]).collect::<Vec<_>>(),
                hp,
                rng,
            )?;
        }
        let cx = Self::critic_inputs(states, &buf.switch_in);
        loss.value_loss = value_update(&mut self.critic, cx.view(), &gae.value_targets, hp, rng)?;
        Ok(loss)
    }

    pub fn networks(&self) -> Vec<(String, &ParamStore)> {
        vec![
            ("switch_actor".into(), &self.switch_actor),
            ("reward_actor".into(), &self.reward_actor),
            ("generator_critic".into(), &self.critic),
        ]
    }
}

/// Generator per-step reward: team reward plus the active intrinsic term,
/// minus the switch-on charge, plus the novelty bonus.
pub fn generator_reward(team: f64, intrinsic: f64, q: bool, switch_cost: f64, novelty: f64) -> f64 {
    let f = if q { intrinsic } else { 0.0 };
    team + f - switch_cost + novelty
}

/// Discounted sum `Σ γ^t F_t q_t` over one episode.
pub fn telescoping_audit(intrinsic: &[f64], q: &[bool], gamma: f64) -> f64 {
    let mut disc = 1.0;
    let mut total = 0.0;
    for (f, &on) in intrinsic.iter().zip(q) {
        if on {
            total += disc * f;
        }
        disc *= gamma;
    }
    total
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorDecision {
    pub q: bool,
    pub theta: usize,
    pub intrinsic_f: f64,
    pub switch_cost_charge: f64,
    pub switch_on: bool,
    pub switch_consulted: bool,
    pub switch_log_prob: f64,
    pub theta_log_prob: f64,
    /// Potentials entering `F`: `u_t` and `u_{t+1}` after boundary zeroing.
    pub potential: f64,
    pub next_potential: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Carried {
    theta: usize,
    log_prob: f64,
    potential: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    q: bool,
    log_prob: f64,
    consulted: bool,
}

/// Per-environment switching state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwitchState {
    active: bool,
    carried: Option<Carried>,
    pending: Option<Pending>,
    tick: u32,
    switch_times: Vec<u32>,
    activations: u64,
}

impl SwitchState {
    /// Whether intrinsic rewards are active entering the next step.
    pub fn active(&self) -> bool {
        self.active
    }

    /// Ticks (within the current episode) at which the switch turned on.
    pub fn switch_times(&self) -> &[u32] {
        &self.switch_times
    }

    /// Total number of 0→1 transitions since construction.
    pub fn activations(&self) -> u64 {
        self.activations
    }

    fn sample_switch(mode: SwitchMode, eval: &GenEval, rng: &mut Rng) -> Pending {
        match mode {
            SwitchMode::Random => Pending {
                q: rng.bernoulli(0.5),
                log_prob: 0.5f64.ln(),
                consulted: false,
            },
            SwitchMode::AlwaysOn => Pending {
                q: true,
                log_prob: 0.0,
                consulted: false,
            },
            _ => {
                let (a, lp) = sample_logits(&eval.switch_logits, rng);
                Pending {
                    q: a == 1,
                    log_prob: lp,
                    consulted: true,
                }
            }
        }
    }

    fn sample_theta(eval: &GenEval, rng: &mut Rng) -> Carried {
        let (theta, log_prob) = sample_logits(&eval.reward_logits, rng);
        Carried {
            theta,
            log_prob,
            potential: eval.potentials[theta],
        }
    }

    /// Switching and intrinsic-reward decision for the step `s_t → s_{t+1}`.
    /// `now` evaluates `s_t`; `next` evaluates `s_{t+1}` and is ignored when
    /// the step ended the episode.
    pub fn decide(
        &mut self,
        mode: SwitchMode,
        now: &GenEval,
        next: &GenEval,
        done: bool,
        gamma: f64,
        switch_cost: f64,
        rng: &mut Rng,
    ) -> GeneratorDecision {
        let per_state = !matches!(mode, SwitchMode::Option { .. });
        let pending = match mode {
            SwitchMode::Option { .. } if self.active => Pending {
                q: true,
                log_prob: 0.0,
                consulted: false,
            },
            _ => self
                .pending
                .take()
                .unwrap_or_else(|| Self::sample_switch(mode, now, rng)),
        };
        let mut d = GeneratorDecision {
            q: pending.q,
            switch_consulted: pending.consulted,
            switch_log_prob: pending.log_prob,
            ..GeneratorDecision::default()
        };

        if !pending.q {
            self.active = false;
            self.carried = None;
            if per_state && !done {
                let p = Self::sample_switch(mode, next, rng);
                self.active = p.q;
                self.pending = Some(p);
            }
            self.end_step(done);
            return d;
        }

        d.switch_on = !self.active || self.carried.is_none();
        let current = match self.carried.take() {
            Some(c) if !d.switch_on => c,
            _ => Self::sample_theta(now, rng),
        };
        d.theta = current.theta;
        d.theta_log_prob = current.log_prob;
        d.potential = if d.switch_on { 0.0 } else { current.potential };

        let continues = !done
            && match mode {
                SwitchMode::Option { terminate_prob } => !rng.bernoulli(terminate_prob),
                SwitchMode::AlwaysOn => true,
                _ => {
                    let p = Self::sample_switch(mode, next, rng);
                    self.pending = Some(p);
                    p.q
                }
            };
        if continues {
            let c = Self::sample_theta(next, rng);
            d.next_potential = c.potential;
            self.carried = Some(c);
        }
        self.active = continues;
        d.intrinsic_f = gamma * d.next_potential - d.potential;
        if d.switch_on {
            d.switch_cost_charge = switch_cost;
            self.switch_times.push(self.tick);
            self.activations += 1;
        }
        self.end_step(done);
        d
    }

    fn end_step(&mut self, done: bool) {
        self.tick += 1;
        if done {
            self.active = false;
            self.carried = None;
            self.pending = None;
            self.tick = 0;
            self.switch_times.clear();
        }
    }
}

/// Probability that the switching policy turns on at a state.
pub fn switch_probability(eval: &GenEval) -> f64 {
    softmax(&eval.switch_logits)[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentId;
    use crate::learners::{AgentRow, GeneratorRow};

    fn eval(switch_on_logit: f64, potential: f64) -> GenEval {
        GenEval {
            switch_logits: [0.0, switch_on_logit],
            reward_logits: vec![0.0],
            potentials: vec![potential],
        }
    }

    #[test]
    fn switch_off_gives_dummy_zeros() {
        let mut ss = SwitchState::default();
        let mut rng = Rng::new(0);
        let d = ss.decide(
            SwitchMode::Policy,
            &eval(-50.0, 0.4),
            &eval(-50.0, 0.4),
            false,
            0.99,
            0.1,
            &mut rng,
        );
        assert!(!d.q);
        assert_eq!((d.theta, d.intrinsic_f, d.switch_cost_charge), (0, 0.0, 0.0));
    }

    #[test]
    fn constant_potential_continuation() {
        // Mid-segment with u_t = u_{t+1} = 0.4 gives F = 0.99·0.4 − 0.4.
        let mut ss = SwitchState::default();
        let mut rng = Rng::new(0);
        let e = eval(50.0, 0.4);
        let mode = SwitchMode::AlwaysOn;
        let first = ss.decide(mode, &e, &e, false, 0.99, 0.1, &mut rng);
        assert!(first.switch_on && first.potential == 0.0);
        let d = ss.decide(mode, &e, &e, false, 0.99, 0.1, &mut rng);
        assert!(!d.switch_on);
        assert!((d.intrinsic_f - (-0.004)).abs() < 1e-12);
        assert_eq!(d.switch_cost_charge, 0.0);
    }

    #[test]
    fn one_charge_per_activation() {
        // On from t=3 to t=7, off otherwise.
        let mut ss = SwitchState::default();
        let mut rng = Rng::new(1);
        let mode = SwitchMode::Policy;
        let on = |t: usize| (3..=7).contains(&t);
        let evals: Vec<GenEval> = (0..12).map(|t| eval(if on(t) { 60.0 } else { -60.0 }, 0.3)).collect();
        let mut charges = Vec::new();
        for t in 0..11 {
            let d = ss.decide(mode, &evals[t], &evals[t + 1], false, 0.9, 0.1, &mut rng);
            assert_eq!(d.q, on(t));
            if d.switch_cost_charge > 0.0 {
                charges.push(t);
            }
        }
        assert_eq!(charges, vec![3]);
        assert_eq!(ss.switch_times(), &[3]);
    }

    #[test]
    fn generator_reward_cases() {
        assert!((generator_reward(1.0, 0.2, true, 0.0, 0.05) - 1.25).abs() < 1e-15);
        assert_eq!(generator_reward(0.0, 0.0, false, 0.0, 0.0), 0.0);
        assert!((generator_reward(0.0, 0.1, true, 0.1, 0.0)).abs() < 1e-15);
        assert_eq!(generator_reward(0.0, 9.0, false, 0.0, 0.0), 0.0);
    }

    #[test]
    fn audit_hand_example() {
        let f: [f64; 3] = [0.5 * 0.3 - 0.0, 0.5 * -0.2 - 0.3, 0.5 * 0.0 + 0.2];
        assert!((f[0] - 0.15).abs() < 1e-15 && (f[1] + 0.4).abs() < 1e-15);
        assert!(telescoping_audit(&f, &[true; 3], 0.5).abs() < 1e-15);
        assert_eq!(telescoping_audit(&[0.0; 10], &[false; 10], 0.9), 0.0);
    }

    fn random_episode(mode: SwitchMode, seed: u64, len: usize) -> (Vec<f64>, Vec<bool>, u64, Vec<bool>) {
        let mut rng = Rng::new(seed);
        let evals: Vec<GenEval> = (0..=len)
            .map(|_| GenEval {
                switch_logits: [rng.normal(), rng.normal()],
                reward_logits: vec![rng.normal(), rng.normal(), rng.normal()],
                potentials: vec![rng.normal(), rng.normal(), rng.normal()],
            })
            .collect();
        let mut ss = SwitchState::default();
        let (mut f, mut q, mut charged) = (Vec::new(), Vec::new(), 0);
        for t in 0..len {
            let d = ss.decide(mode, &evals[t], &evals[t + 1], t + 1 == len, 0.97, 0.1, &mut rng);
            f.push(d.intrinsic_f);
            q.push(d.q);
            if d.switch_cost_charge > 0.0 {
                charged += 1;
            }
        }
        (f, q.clone(), charged, q)
    }

    #[test]
    fn random_episodes_telescope() {
        let modes = [
            SwitchMode::Option { terminate_prob: 0.3 },
            SwitchMode::Policy,
            SwitchMode::Random,
            SwitchMode::AlwaysOn,
        ];
        for mode in modes {
            for seed in 0..200 {
                let (f, q, charged, qs) = random_episode(mode, seed, 20);
                assert!(telescoping_audit(&f, &q, 0.97).abs() < 1e-9, "{mode:?} seed {seed}");
                let rising = qs
                    .iter()
                    .enumerate()
                    .filter(|&(t, &on)| on && (t == 0 || !qs[t - 1]))
                    .count();
                // Option mode can terminate and restart on consecutive steps.
                if !matches!(mode, SwitchMode::Option { .. }) {
                    assert_eq!(charged, rising as u64);
                } else {
                    assert!(charged >= rising as u64);
                }
            }
        }
    }

    #[test]
    fn always_on_is_always_on() {
        let (_, q, charged, _) = random_episode(SwitchMode::AlwaysOn, 3, 50);
        assert!(q.iter().all(|&x| x));
        assert_eq!(charged, 1);
    }

    #[test]
    fn random_switch_is_fair() {
        let mut total = 0;
        let mut on = 0;
        for seed in 0..200 {
            let (_, q, _, _) = random_episode(SwitchMode::Random, seed, 50);
            total += q.len();
            on += q.iter().filter(|&&x| x).count();
        }
        let frac = on as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    fn toy_buffer(gp: &GeneratorPolicies, rng: &mut Rng, rows: usize) -> RolloutBuffer {
        // One-step episodes in state A ([1,0]) or B ([0,1]). Switching on pays
        // +1 in A and −1 in B through the novelty column.
        let mut buf = RolloutBuffer::new(1, 1, 2);
        for r in 0..rows {
            let s = if r % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            let e = gp
                .evaluate(
                    &PotentialNet::new(2, &[4], 1, &mut Rng::new(0)),
                    ArrayView2::from_shape((1, 2), &s).unwrap(),
                )
                .unwrap();
            let (a, lp) = sample_logits(&e[0].switch_logits, rng);
            let q = a == 1;
            let bonus = if !q {
                0.0
            } else if r % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            let v = gp.values(ArrayView2::from_shape((1, 2), &s).unwrap(), &[false]).unwrap()[0];
            buf.push(
                AgentRow {
                    state: &s,
                    actions: &[0],
                    log_probs: &[0.0],
                    values: &[0.0],
                    rewards: &[0.0],
                    team_reward: 0.0,
                    done: true,
                },
                GeneratorRow {
                    q,
                    switch_consulted: true,
                    switch_log_prob: lp,
                    value: v,
                    novelty: bonus,
                    ..GeneratorRow::default()
                },
            );
        }
        buf.last_states = vec![0.0; 2];
        buf
    }

    #[test]
    fn switching_toy_converges() {
        let mut cfg = RunConfig::defaults_for(ExperimentId::Foraging1);
        cfg.learning_rate = 3e-3;
        let hp = PpoParams::from_config(&cfg);
        for seed in 1..=3 {
            let mut rng = Rng::new(seed);
            let mut gp = GeneratorPolicies::new(2, 1, &[8], &mut rng);
            let reward_before = gp.reward_actor.clone();
            for _ in 0..300 {
                let buf = toy_buffer(&gp, &mut rng, 16);
                gp.update(&buf, &[false], &cfg, &hp, &mut rng).unwrap();
            }
            let pot = PotentialNet::new(2, &[4], 1, &mut Rng::new(0));
            let s = [1.0, 0.0, 0.0, 1.0];
            let e = gp.evaluate(&pot, ArrayView2::from_shape((2, 2), &s).unwrap()).unwrap();
            let (pa, pb) = (switch_probability(&e[0]), switch_probability(&e[1]));
            assert!(pa > 0.9 && pb < 0.1, "seed {seed}: {pa} {pb}");
            assert_eq!(gp.reward_actor, reward_before, "single channel must not train");
        }
    }

    #[test]
    fn no_switch_rows_leave_reward_actor() {
        let mut rng = Rng::new(4);
        let mut gp = GeneratorPolicies::new(2, 3, &[8], &mut rng);
        let before = gp.reward_actor.clone();
        let switch_before = gp.switch_actor.clone();
        let mut buf = toy_buffer(&gp, &mut rng, 8);
        buf.q.iter_mut().for_each(|q| *q = false);
        let cfg = RunConfig::defaults_for(ExperimentId::Foraging1);
        gp.update(&buf, &[false], &cfg, &PpoParams::from_config(&cfg), &mut rng).unwrap();
        assert_eq!(gp.reward_actor, before);
        assert_ne!(gp.switch_actor, switch_before);
    }

    #[test]
    fn mode_selection() {
        let mut cfg = RunConfig::defaults_for(ExperimentId::Corridor);
        assert_eq!(SwitchMode::from_config(&cfg), SwitchMode::Option { terminate_prob: 0.9 });
        cfg.algorithm = Algorithm::LigsRandomSwitch;
        assert_eq!(SwitchMode::from_config(&cfg), SwitchMode::Random);
        assert!(!SwitchMode::Random.learned());
        cfg.algorithm = Algorithm::LigsAlwaysOn;
        assert_eq!(SwitchMode::from_config(&cfg), SwitchMode::AlwaysOn);
    }
}
