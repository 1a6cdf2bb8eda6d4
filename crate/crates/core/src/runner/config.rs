//! Run configuration and its flat `key = value` text form.
//!
//! Keys are dotted paths such as `sac.gamma` or `env.base_bias`; TOML tables
//! are flattened into the same paths, so `[sac]\ngamma = 0.99` and
//! `sac.gamma = 0.99` are equivalent.

use std::path::{Path, PathBuf};

use toml::Value;

use crate::bank::Retention;
use crate::env::TokenWorldConfig;
use crate::error::{Error, Result};
use crate::retrieval::RetrievalConfig;
use crate::reward::{RewardWeights, SimilarityMode};
use crate::sac::SacConfig;
use crate::sinkhorn::SinkhornConfig;

pub const OUTPUT_DIR_ENV: &str = "EFN_OUTPUT_DIR";

/// Which finished evaluation rollouts join the live bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalInsert {
    All,
    SuccessOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: TokenWorldConfig,
    pub retrieval: RetrievalConfig,
    pub reward: RewardWeights,
    pub similarity: SimilarityMode,
    pub sac: SacConfig,
    pub key_dim: usize,
    pub key_seed: u64,
    pub train_bank_capacity: Option<usize>,
    pub train_retention: Retention,
    /// Budget of the live evaluation bank outside a sweep.
    pub eval_volume: usize,
    pub eval_insert: EvalInsert,
    /// Includes the bootstrap episodes.
    pub episodes_train: usize,
    pub episodes_eval: usize,
    pub bootstrap_episodes: usize,
    /// Fraction of post-bootstrap episodes trained on the simple reward.
    pub warmup_fraction: f64,
    pub learning_starts: usize,
    pub updates_per_step: usize,
    pub checkpoint_every: usize,
    pub bank_volume_sweep: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: TokenWorldConfig::default(),
            retrieval: RetrievalConfig { top_n_rollouts: 64, ..RetrievalConfig::default() },
            reward: RewardWeights { beta_map: 1.5, ..RewardWeights::default() },
            similarity: SimilarityMode::PooledCosine,
            sac: SacConfig { action_scale: 0.1, ..SacConfig::default() },
            key_dim: 32,
            key_seed: 7,
            train_bank_capacity: None,
            train_retention: Retention::Unbounded,
            eval_volume: 200,
            eval_insert: EvalInsert::SuccessOnly,
            episodes_train: 300,
            episodes_eval: 200,
            bootstrap_episodes: 20,
            warmup_fraction: 0.1,
            learning_starts: 256,
            updates_per_step: 1,
            checkpoint_every: 0,
            bank_volume_sweep: vec![10, 50, 200],
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("efn-out"),
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a number, got {v}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a nonnegative integer, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).map(|u| u as usize)
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::InvalidConfig(format!("{key}: expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::InvalidConfig(format!("{key}: expected a string, got {v}")))
}

fn as_list<T>(key: &str, v: &Value, f: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    match v {
        Value::Array(a) => a.iter().map(|x| f(key, x)).collect(),
        // "10,50,200" as a convenience for command-line overrides
        Value::String(s) => s
            .split(',')
            .map(|p| {
                let p = p.trim();
                let parsed = p
                    .parse::<i64>()
                    .map(Value::Integer)
                    .or_else(|_| p.parse::<f64>().map(Value::Float))
                    .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse `{p}`")))?;
                f(key, &parsed)
            })
            .collect(),
        other => Ok(vec![f(key, other)?]),
    }
}

/// Optional count where `0` or `"none"` means unbounded.
fn as_capacity(key: &str, v: &Value) -> Result<Option<usize>> {
    match v {
        Value::String(s) if s == "none" || s == "unbounded" => Ok(None),
        _ => as_usize(key, v).map(|c| (c > 0).then_some(c)),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parses a command-line `value` as TOML, falling back to a bare string.
pub fn parse_value(text: &str) -> Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_toml_str(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn merge_toml_str(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        for (k, v) in pairs {
            self.apply(&k, &v)?;
        }
        Ok(())
    }

    /// `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
        self.apply(k.trim(), &parse_value(v.trim()))
    }

    /// `EFN_OUTPUT_DIR`, when set, replaces `output_dir`.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    fn sinkhorn_mut(&mut self) -> &mut SinkhornConfig {
        if !matches!(self.similarity, SimilarityMode::Sinkhorn(_)) {
            self.similarity = SimilarityMode::Sinkhorn(SinkhornConfig::default());
        }
        match &mut self.similarity {
            SimilarityMode::Sinkhorn(c) => c,
            SimilarityMode::PooledCosine => unreachable!(),
        }
    }

    pub fn apply(&mut self, key: &str, v: &Value) -> Result<()> {
        let k = key;
        match key {
            "env.latent_dim" => self.env.latent_dim = as_usize(k, v)?,
            "env.action_dim" => self.env.action_dim = as_usize(k, v)?,
            "env.tokens" => self.env.tokens = as_usize(k, v)?,
            "env.channels" => self.env.channels = as_usize(k, v)?,
            "env.goal_radius" => self.env.goal_radius = as_f64(k, v)?,
            "env.goal_distance" => self.env.goal_distance = as_f64(k, v)?,
            "env.start_half_width" => self.env.start_half_width = as_f64(k, v)?,
            "env.horizon" => self.env.horizon = as_usize(k, v)?,
            "env.a_max" => self.env.a_max = as_f64(k, v)?,
            "env.base_bias" => self.env.base_bias = as_list(k, v, as_f64)?,
            "env.base_noise" => self.env.base_noise = as_f64(k, v)?,
            "env.encoder_seed" => self.env.encoder_seed = as_u64(k, v)?,
            "env.encoder_scale" => self.env.encoder_scale = as_f64(k, v)?,
            "env.n_tasks" => self.env.n_tasks = as_usize(k, v)?,
            "env.instr_dim" => self.env.instr_dim = as_usize(k, v)?,

            "retrieval.top_n_rollouts" => self.retrieval.top_n_rollouts = as_usize(k, v)?,
            "retrieval.top_k_steps" => self.retrieval.top_k_steps = as_usize(k, v)?,
            "retrieval.temperature" => self.retrieval.temperature = as_f64(k, v)?,
            "retrieval.lambda_mix" => self.retrieval.lambda_mix = as_f64(k, v)?,
            "retrieval.beta_len" => self.retrieval.beta_len = as_f64(k, v)?,
            "retrieval.ref_len" => {
                self.retrieval.ref_len = match v {
                    Value::String(s) if s == "auto" || s == "none" => None,
                    _ => Some(as_f64(k, v)?),
                }
            }
            "retrieval.rng_seed" => self.retrieval.rng_seed = as_u64(k, v)?,
            "retrieval.freeze_reference" => self.retrieval.freeze_reference = as_bool(k, v)?,

            "reward.w_abs" => self.reward.w_abs = as_f64(k, v)?,
            "reward.w_prog" => self.reward.w_prog = as_f64(k, v)?,
            "reward.w_mot" => self.reward.w_mot = as_f64(k, v)?,
            "reward.w_lazy" => self.reward.w_lazy = as_f64(k, v)?,
            "reward.lambda_time" => self.reward.lambda_time = as_f64(k, v)?,
            "reward.eps_tol" => self.reward.eps_tol = as_f64(k, v)?,
            "reward.lambda_sem" => self.reward.lambda_sem = as_f64(k, v)?,
            "reward.lambda_res" => self.reward.lambda_res = as_f64(k, v)?,
            "reward.alpha_map" => self.reward.alpha_map = as_f64(k, v)?,
            "reward.beta_map" => self.reward.beta_map = as_f64(k, v)?,
            "reward.similarity" => {
                self.similarity = match as_str(k, v)? {
                    "pooled" | "pooled_cosine" => SimilarityMode::PooledCosine,
                    "sinkhorn" => SimilarityMode::Sinkhorn(SinkhornConfig::default()),
                    other => return Err(Error::InvalidConfig(format!("{k}: unknown similarity `{other}`"))),
                }
            }
            "sinkhorn.epsilon" => self.sinkhorn_mut().epsilon = as_f64(k, v)?,
            "sinkhorn.n_iters" => self.sinkhorn_mut().n_iters = as_usize(k, v)?,

            "sac.gamma" => self.sac.gamma = as_f64(k, v)?,
            "sac.polyak_tau" => self.sac.polyak_tau = as_f64(k, v)?,
            "sac.lr_actor" => self.sac.lr_actor = as_f64(k, v)?,
            "sac.lr_critic" => self.sac.lr_critic = as_f64(k, v)?,
            "sac.lr_alpha" => self.sac.lr_alpha = as_f64(k, v)?,
            "sac.batch_size" => self.sac.batch_size = as_usize(k, v)?,
            "sac.target_entropy" => self.sac.target_entropy = as_f64(k, v)?,
            "sac.init_alpha" => self.sac.init_alpha = as_f64(k, v)?,
            "sac.replay_capacity" => self.sac.replay_capacity = as_usize(k, v)?,
            "sac.hidden_dims" => self.sac.hidden_dims = as_list(k, v, as_usize)?,
            "sac.encoder_dim" => self.sac.encoder_dim = as_usize(k, v)?,
            "sac.r_max" => self.sac.r_max = as_f64(k, v)?,
            "sac.action_scale" => self.sac.action_scale = as_f64(k, v)?,

            "key_dim" => self.key_dim = as_usize(k, v)?,
            "key_seed" => self.key_seed = as_u64(k, v)?,
            "train_bank_capacity" => self.train_bank_capacity = as_capacity(k, v)?,
            "train_retention" => {
                self.train_retention = match as_str(k, v)? {
                    "unbounded" => Retention::Unbounded,
                    "reservoir" => Retention::Reservoir { seed: self.key_seed },
                    "recency" => Retention::Recency,
                    "success_priority" => Retention::SuccessPriority,
                    other => return Err(Error::InvalidConfig(format!("{k}: unknown retention `{other}`"))),
                }
            }
            "eval_volume" => self.eval_volume = as_usize(k, v)?,
            "eval_insert" => {
                self.eval_insert = match as_str(k, v)? {
                    "all" => EvalInsert::All,
                    "success_only" => EvalInsert::SuccessOnly,
                    other => return Err(Error::InvalidConfig(format!("{k}: expected all or success_only, got `{other}`"))),
                }
            }
            "episodes_train" => self.episodes_train = as_usize(k, v)?,
            "episodes_eval" => self.episodes_eval = as_usize(k, v)?,
            "bootstrap_episodes" => self.bootstrap_episodes = as_usize(k, v)?,
            "warmup_fraction" => self.warmup_fraction = as_f64(k, v)?,
            "learning_starts" => self.learning_starts = as_usize(k, v)?,
            "updates_per_step" => self.updates_per_step = as_usize(k, v)?,
            "checkpoint_every" => self.checkpoint_every = as_usize(k, v)?,
            "bank_volume_sweep" => self.bank_volume_sweep = as_list(k, v, as_usize)?,
            "seeds" => self.seeds = as_list(k, v, as_u64)?,
            "output_dir" => self.output_dir = PathBuf::from(as_str(k, v)?),
            _ => return Err(Error::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.retrieval.validate()?;
        self.reward.validate()?;
        self.sac.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sac.residual_dim != self.env.action_dim {
            return bad(format!(
                "sac residual_dim {} must equal env action_dim {}",
                self.sac.residual_dim, self.env.action_dim
            ));
        }
        if self.key_dim == 0 {
            return bad("key_dim must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.bank_volume_sweep.contains(&0) || self.bank_volume_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return bad("bank_volume_sweep must be positive and strictly increasing".into());
        }
        if self.episodes_eval == 0 {
            return bad("episodes_eval must be positive".into());
        }
        if self.eval_volume == 0 || self.updates_per_step == 0 {
            return bad("eval_volume and updates_per_step must be positive".into());
        }
        if self.train_bank_capacity == Some(0) {
            return bad("train_bank_capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must be in [0, 1], got {}", self.warmup_fraction));
        }
        Ok(())
    }

    /// `[key_t; a0; matched key; matched action; instruction]` width.
    pub fn raw_context_dim(&self) -> usize {
        2 * self.key_dim + 2 * self.env.action_dim + self.env.instr_dim
    }
}
