//! Exploration bonus for the Generator: distillation error of a trained
//! predictor against a frozen random target, or inverse visit counts.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::funcapprox::{FaError, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NoveltyError {
    #[error("novelty update needs a nonempty batch")]
    EmptyBatch,
    #[error("non-finite distillation loss {0}")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    Net(#[from] FaError),
}

/// State encoding followed by one one-hot block per agent action.
pub fn state_action_input(state: &[f64], joint_action: &[usize], n_actions: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + joint_action.len() * n_actions);
    x.extend_from_slice(state);
    for &a in joint_action {
        let start = x.len();
        x.resize(start + n_actions, 0.0);
        x[start + a] = 1.0;
    }
    x
}

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn observe(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        (self.m2 / self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct RndPair {
    target: ParamStore,
    predictor: ParamStore,
    scale: RunningStats,
}

impl RndPair {
    pub fn new(input_dim: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Self {
        let target = ParamStore::mlp(input_dim, hidden, output, rng);
        let predictor = ParamStore::mlp(input_dim, hidden, output, rng);
        Self {
            target,
            predictor,
            scale: RunningStats::default(),
        }
    }

    pub fn target(&self) -> &ParamStore {
        &self.target
    }

    pub fn predictor(&self) -> &ParamStore {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut ParamStore {
        &mut self.predictor
    }

    pub fn input_dim(&self) -> usize {
        self.target.in_dim()
    }

    /// Raw squared distillation error `‖predictor(x) − target(x)‖²` per row.
    pub fn novelty_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NoveltyError> {
        let t = self.target.predict(x)?;
        let p = self.predictor.predict(x)?;
        Ok((&p - &t)
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|d| d * d).sum())
            .collect())
    }

    pub fn novelty(&self, x: &[f64]) -> Result<f64, NoveltyError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.novelty_batch(view)?[0])
    }

    /// Folds raw values into the running scale estimate.
    pub fn observe(&mut self, raw: &[f64]) {
        for &r in raw {
            self.scale.observe(r);
        }
    }

    /// Raw value divided by the running standard deviation of raw values.
    pub fn normalize(&self, raw: f64) -> f64 {
        raw / (self.scale.std() + 1e-8)
    }

    /// One gradient step of the predictor on the batch; returns the mean loss
    /// before the step. The target is never modified.
    pub fn update(&mut self, x: ArrayView2<f64>, lr: f64, clip_norm: f64) -> Result<f64, NoveltyError> {
        let b = x.nrows();
        if b == 0 {
            return Err(NoveltyError::EmptyBatch);
        }
        let t = self.target.predict(x)?;
        let (p, tape) = self.predictor.forward(x)?;
        let diff: Array2<f64> = &p - &t;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / b as f64;
        if !loss.is_finite() {
            return Err(NoveltyError::NonFiniteLoss(loss));
        }
        let grad = diff * (2.0 / b as f64);
        self.predictor.backward(&tape, grad.view())?;
        self.predictor.adam_step(lr, clip_norm)?;
        Ok(loss)
    }
}

/// Exact-key visit counts.
#[derive(Debug, Clone, Default)]
pub struct VisitCounter {
    counts: HashMap<Vec<u32>, u64>,
}

impl VisitCounter {
    pub fn count(&self, key: &[u32]) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    /// Returns `1 / (count + 1)` and then records the visit.
    pub fn novelty(&mut self, key: &[u32]) -> f64 {
        let c = self.counts.entry(key.to_vec()).or_insert(0);
        let l = 1.0 / (*c as f64 + 1.0);
        *c += 1;
        l
    }

    pub fn distinct_keys(&self) -> usize {
        self.counts.len()
    }
}
