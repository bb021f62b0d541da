//! Run configuration: a flat `key=value` text format.
//!
//! Items are separated by newlines or commas, `#` starts a comment. Only
//! `experiment_id` is required; everything else falls back to the defaults
//! in [`RunConfig::defaults_for`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed item `{item}` (expected key=value)")]
    Malformed { item: String },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("duplicate key `{key}`")]
    DuplicateKey { key: String },
    #[error("missing required key `{key}`")]
    MissingKey { key: String },
    #[error("cannot parse `{key}` = `{value}`: {reason}")]
    Parse {
        key: String,
        value: String,
        reason: String,
    },
    #[error("`{key}` = {value} is out of range: {reason}")]
    Range {
        key: String,
        value: String,
        reason: String,
    },
}

macro_rules! token_enum {
    ($(#[$meta:meta])* $name:ident { $($(#[$vmeta:meta])* $variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($(#[$vmeta])* $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($token => Ok($name::$variant),)+
                    _ => Err(format!(
                        "expected one of {}",
                        [$($token),+].join(", ")
                    )),
                }
            }
        }
    };
}

token_enum! {
    /// Which gridworld task a run uses.
    ExperimentId {
        Foraging1 => "foraging1",
        Foraging2 => "foraging2",
        Foraging3 => "foraging3",
        Corridor => "corridor",
    }
}

token_enum! {
    /// Algorithm wiring for a run.
    Algorithm {
        Ligs => "ligs",
        Mappo => "mappo",
        Ippo => "ippo",
        MappoRnd => "mappo_rnd",
        LigsRandomSwitch => "ligs_random_switch",
        LigsAlwaysOn => "ligs_always_on",
    }
}

token_enum! {
    NoveltyKind {
        Rnd => "rnd",
        Count => "count",
    }
}

token_enum! {
    /// Base learner for the N agents in the LIGS variants.
    BaseLearner {
        Mappo => "mappo",
        Ippo => "ippo",
    }
}

token_enum! {
    /// How an active switch turns off.
    SwitchOff {
        /// Persist while active, terminate with `option_terminate_prob` per step.
        Option => "option",
        /// Consult the switching policy afresh at every state.
        Policy => "policy",
    }
}

token_enum! {
    /// Key used by the count-based novelty bonus.
    CountKey {
        State => "state",
        StateAction => "state_action",
    }
}

impl Algorithm {
    pub fn uses_generator(self) -> bool {
        matches!(
            self,
            Algorithm::Ligs | Algorithm::LigsRandomSwitch | Algorithm::LigsAlwaysOn
        )
    }

    pub fn uses_novelty(self) -> bool {
        self.uses_generator() || self == Algorithm::MappoRnd
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment_id: ExperimentId,
    pub seed: u64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub rollout_length: usize,
    pub num_actors: usize,
    pub num_minibatches: usize,
    pub num_epochs: usize,
    pub grad_clip_norm: f64,
    pub switch_cost: f64,
    pub intrinsic_coef: f64,
    pub extrinsic_coef: f64,
    pub l_output_size: usize,
    pub generator_action_count: usize,
    pub option_terminate_prob: f64,
    pub novelty_kind: NoveltyKind,
    pub algorithm: Algorithm,
    pub total_env_steps: u64,
    pub base_learner: BaseLearner,
    pub share_params: bool,
    pub hidden: Vec<usize>,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub generator_gamma: f64,
    pub switch_off: SwitchOff,
    pub count_key: CountKey,
}

/// Keys in canonical serialisation order.
pub const KEYS: &[&str] = &[
    "experiment_id",
    "seed",
    "algorithm",
    "base_learner",
    "total_env_steps",
    "gamma",
    "gae_lambda",
    "learning_rate",
    "rollout_length",
    "num_actors",
    "num_minibatches",
    "num_epochs",
    "grad_clip_norm",
    "clip_eps",
    "value_coef",
    "entropy_coef",
    "hidden",
    "share_params",
    "switch_cost",
    "intrinsic_coef",
    "extrinsic_coef",
    "l_output_size",
    "generator_action_count",
    "generator_gamma",
    "option_terminate_prob",
    "switch_off",
    "novelty_kind",
    "count_key",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Parse {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_hidden(value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split('x')
        .map(|w| parse_value::<usize>("hidden", w.trim()))
        .collect()
}

fn range_err(key: &str, value: impl fmt::Display, reason: &str) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

impl RunConfig {
    /// Defaults from the hyperparameter table, plus declared picks for the
    /// values the table only gives as ranges.
    pub fn defaults_for(experiment_id: ExperimentId) -> Self {
        let total_env_steps = match experiment_id {
            ExperimentId::Corridor => 500_000,
            _ => 300_000,
        };
        Self {
            experiment_id,
            seed: 1,
            gamma: 0.99,
            gae_lambda: 0.95,
            learning_rate: 1e-4,
            rollout_length: 128,
            num_actors: 16,
            num_minibatches: 4,
            num_epochs: 4,
            grad_clip_norm: 1.0,
            switch_cost: 0.1,
            intrinsic_coef: 1.0,
            extrinsic_coef: 1.0,
            l_output_size: 32,
            generator_action_count: 1,
            option_terminate_prob: 0.9,
            novelty_kind: NoveltyKind::Rnd,
            algorithm: Algorithm::Ligs,
            total_env_steps,
            base_learner: BaseLearner::Mappo,
            share_params: true,
            hidden: vec![64, 64],
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            generator_gamma: 0.99,
            switch_off: SwitchOff::Option,
            count_key: CountKey::State,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            for item in line.split(',') {
                let item = item.trim();
                if item.is_empty() {
                    continue;
                }
                let (key, value) = item.split_once('=').ok_or_else(|| ConfigError::Malformed {
                    item: item.to_string(),
                })?;
                let key = key.trim().to_string();
                if !KEYS.contains(&key.as_str()) {
                    return Err(ConfigError::UnknownKey { key });
                }
                if pairs.iter().any(|(k, _)| *k == key) {
                    return Err(ConfigError::DuplicateKey { key });
                }
                pairs.push((key, value.trim().to_string()));
            }
        }

        let experiment_id = match pairs.iter().find(|(k, _)| k == "experiment_id") {
            Some((k, v)) => parse_value::<ExperimentId>(k, v)?,
            None => {
                return Err(ConfigError::MissingKey {
                    key: "experiment_id".into(),
                })
            }
        };
        let mut cfg = Self::defaults_for(experiment_id);
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value (no range validation).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "experiment_id" => self.experiment_id = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "algorithm" => self.algorithm = parse_value(key, v)?,
            "base_learner" => self.base_learner = parse_value(key, v)?,
            "total_env_steps" => self.total_env_steps = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "gae_lambda" => self.gae_lambda = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "rollout_length" => self.rollout_length = parse_value(key, v)?,
            "num_actors" => self.num_actors = parse_value(key, v)?,
            "num_minibatches" => self.num_minibatches = parse_value(key, v)?,
            "num_epochs" => self.num_epochs = parse_value(key, v)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_value(key, v)?,
            "clip_eps" => self.clip_eps = parse_value(key, v)?,
            "value_coef" => self.value_coef = parse_value(key, v)?,
            "entropy_coef" => self.entropy_coef = parse_value(key, v)?,
            "hidden" => self.hidden = parse_hidden(v)?,
            "share_params" => self.share_params = parse_value(key, v)?,
            "switch_cost" => self.switch_cost = parse_value(key, v)?,
            "intrinsic_coef" => self.intrinsic_coef = parse_value(key, v)?,
            "extrinsic_coef" => self.extrinsic_coef = parse_value(key, v)?,
            "l_output_size" => self.l_output_size = parse_value(key, v)?,
            "generator_action_count" => self.generator_action_count = parse_value(key, v)?,
            "generator_gamma" => self.generator_gamma = parse_value(key, v)?,
            "option_terminate_prob" => self.option_terminate_prob = parse_value(key, v)?,
            "switch_off" => self.switch_off = parse_value(key, v)?,
            "novelty_kind" => self.novelty_kind = parse_value(key, v)?,
            "count_key" => self.count_key = parse_value(key, v)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let open_unit = |key: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(range_err(key, v, "must lie in (0, 1)"))
            }
        };
        let closed_unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(range_err(key, v, "must lie in [0, 1]"))
            }
        };
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(range_err(key, v, "must be > 0"))
            }
        };
        let nonneg = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(range_err(key, v, "must be >= 0"))
            }
        };
        let count = |key: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(range_err(key, v, "must be >= 1"))
            }
        };

        open_unit("gamma", self.gamma)?;
        open_unit("generator_gamma", self.generator_gamma)?;
        closed_unit("gae_lambda", self.gae_lambda)?;
        closed_unit("option_terminate_prob", self.option_terminate_prob)?;
        positive("learning_rate", self.learning_rate)?;
        positive("grad_clip_norm", self.grad_clip_norm)?;
        nonneg("clip_eps", self.clip_eps)?;
        nonneg("value_coef", self.value_coef)?;
        nonneg("entropy_coef", self.entropy_coef)?;
        nonneg("switch_cost", self.switch_cost)?;
        nonneg("intrinsic_coef", self.intrinsic_coef)?;
        nonneg("extrinsic_coef", self.extrinsic_coef)?;
        count("rollout_length", self.rollout_length)?;
        count("num_actors", self.num_actors)?;
        count("num_minibatches", self.num_minibatches)?;
        count("num_epochs", self.num_epochs)?;
        count("l_output_size", self.l_output_size)?;
        count("generator_action_count", self.generator_action_count)?;
        if let Some(&w) = self.hidden.iter().find(|&&w| w == 0) {
            return Err(range_err("hidden", w, "layer widths must be >= 1"));
        }
        if self.num_minibatches > self.rollout_length * self.num_actors {
            return Err(range_err(
                "num_minibatches",
                self.num_minibatches,
                "exceeds rollout_length * num_actors",
            ));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "experiment_id" => self.experiment_id.to_string(),
            "seed" => self.seed.to_string(),
            "algorithm" => self.algorithm.to_string(),
            "base_learner" => self.base_learner.to_string(),
            "total_env_steps" => self.total_env_steps.to_string(),
            "gamma" => self.gamma.to_string(),
            "gae_lambda" => self.gae_lambda.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "rollout_length" => self.rollout_length.to_string(),
            "num_actors" => self.num_actors.to_string(),
            "num_minibatches" => self.num_minibatches.to_string(),
            "num_epochs" => self.num_epochs.to_string(),
            "grad_clip_norm" => self.grad_clip_norm.to_string(),
            "clip_eps" => self.clip_eps.to_string(),
            "value_coef" => self.value_coef.to_string(),
            "entropy_coef" => self.entropy_coef.to_string(),
            "hidden" => {
                if self.hidden.is_empty() {
                    "none".to_string()
                } else {
                    self.hidden
                        .iter()
                        .map(|w| w.to_string())
                        .collect::<Vec<_>>()
                        .join("x")
                }
            }
            "share_params" => self.share_params.to_string(),
            "switch_cost" => self.switch_cost.to_string(),
            "intrinsic_coef" => self.intrinsic_coef.to_string(),
            "extrinsic_coef" => self.extrinsic_coef.to_string(),
            "l_output_size" => self.l_output_size.to_string(),
            "generator_action_count" => self.generator_action_count.to_string(),
            "generator_gamma" => self.generator_gamma.to_string(),
            "option_terminate_prob" => self.option_terminate_prob.to_string(),
            "switch_off" => self.switch_off.to_string(),
            "novelty_kind" => self.novelty_kind.to_string(),
            "count_key" => self.count_key.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Canonical form: every key, one per line, in [`KEYS`] order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.value_of(key));
            out.push('\n');
        }
        out
    }
}
