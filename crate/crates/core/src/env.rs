//! Token-world: a point mass observed through a fixed random-feature
//! token encoder, driven by a biased frozen base controller.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{Key, TokenMatrix};
use crate::error::{Error, Result};
use crate::sac::nn::checksum_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenWorldConfig {
    pub latent_dim: usize,
    pub action_dim: usize,
    pub tokens: usize,
    pub channels: usize,
    pub goal_radius: f64,
    pub goal_distance: f64,
    /// Start states are uniform in `[-w, w]^latent_dim`.
    pub start_half_width: f64,
    pub horizon: usize,
    pub a_max: f64,
    pub base_bias: Vec<f64>,
    pub base_noise: f64,
    pub encoder_seed: u64,
    pub encoder_scale: f64,
    pub n_tasks: usize,
    pub instr_dim: usize,
}

impl Default for TokenWorldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            action_dim: 2,
            tokens: 16,
            channels: 64,
            goal_radius: 0.055,
            goal_distance: 1.0,
            start_half_width: 0.25,
            horizon: 64,
            a_max: 0.1,
            base_bias: vec![0.08, 0.04],
            base_noise: 0.02,
            encoder_seed: 17,
            encoder_scale: 1.0,
            n_tasks: 4,
            instr_dim: 8,
        }
    }
}

impl TokenWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2".into());
        }
        if self.action_dim != self.latent_dim {
            return bad(format!("action_dim {} must equal latent_dim {}", self.action_dim, self.latent_dim));
        }
        if self.tokens == 0 || self.channels == 0 || self.n_tasks == 0 || self.instr_dim == 0 {
            return bad("tokens, channels, n_tasks and instr_dim must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.goal_radius > 0.0) || !(self.a_max > 0.0) || !(self.goal_distance >= 0.0) {
            return bad("goal_radius and a_max must be positive".into());
        }
        if !(self.base_noise >= 0.0) || !(self.start_half_width >= 0.0) || !(self.encoder_scale > 0.0) {
            return bad("base_noise, start_half_width must be nonnegative and encoder_scale positive".into());
        }
        if self.base_bias.len() != self.action_dim {
            return bad(format!("base_bias has {} components, expected {}", self.base_bias.len(), self.action_dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub step_index: usize,
    pub observation: TokenMatrix,
    /// What the frozen controller proposes in this state.
    pub base_action: Vec<f64>,
    pub latent_state: Vec<f64>,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone)]
struct Episode {
    task: usize,
    latent: Vec<f64>,
    t: usize,
    rng: ChaCha8Rng,
    done: bool,
}

#[derive(Debug, Clone)]
pub struct TokenWorld {
    cfg: TokenWorldConfig,
    goals: Vec<Vec<f64>>,
    /// `tokens x channels x (latent_dim + n_tasks)`.
    weights: Vec<f64>,
    /// `tokens x channels`.
    biases: Vec<f64>,
    /// Per-task `W_i[task column] + b_i`, `n_tasks x (tokens x channels)`.
    offsets: Vec<f64>,
    instructions: Vec<Key>,
    episode: Option<Episode>,
}

impl TokenWorld {
    pub fn new(cfg: TokenWorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder_seed);
        let fan_in = cfg.latent_dim + cfg.n_tasks;
        let w_dist = Normal::new(0.0, cfg.encoder_scale).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let weights: Vec<f64> = (0..cfg.tokens * cfg.channels * fan_in).map(|_| w_dist.sample(&mut rng)).collect();
        let biases: Vec<f64> = (0..cfg.tokens * cfg.channels).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let instructions = (0..cfg.n_tasks)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.instr_dim).map(|_| rng.sample(StandardNormal)).collect();
                Key::normalized(v, crate::EPS)
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = cfg.tokens * cfg.channels;
        let mut offsets = Vec::with_capacity(cfg.n_tasks * rows);
        for task in 0..cfg.n_tasks {
            offsets.extend((0..rows).map(|r| weights[r * fan_in + cfg.latent_dim + task] + biases[r]));
        }
        let goals = (0..cfg.n_tasks)
            .map(|k| {
                let theta = 2.0 * PI * k as f64 / cfg.n_tasks as f64 + PI / 4.0;
                let mut g = vec![0.0; cfg.latent_dim];
                g[0] = cfg.goal_distance * theta.cos();
                g[1] = cfg.goal_distance * theta.sin();
                g
            })
            .collect();
        Ok(Self { cfg, goals, weights, biases, offsets, instructions, episode: None })
    }

    pub fn config(&self) -> &TokenWorldConfig {
        &self.cfg
    }

    pub fn goal(&self, task: usize) -> Result<&[f64]> {
        self.check_task(task)?;
        Ok(&self.goals[task])
    }

    pub fn instruction(&self, task: usize) -> Result<&Key> {
        self.check_task(task)?;
        Ok(&self.instructions[task])
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.cfg.n_tasks {
            return Err(Error::InvalidInput(format!("task {task} out of range (n_tasks = {})", self.cfg.n_tasks)));
        }
        Ok(())
    }

    /// `row i = tanh(W_i [latent; onehot(task)] + b_i)`.
    pub fn encode(&self, latent: &[f64], task: usize) -> Result<TokenMatrix> {
        self.check_task(task)?;
        if latent.len() != self.cfg.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.cfg.latent_dim, got: latent.len() });
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite latent".into()));
        }
        let ld = self.cfg.latent_dim;
        let fan_in = ld + self.cfg.n_tasks;
        let rows = self.cfg.tokens * self.cfg.channels;
        let offsets = &self.offsets[task * rows..(task + 1) * rows];
        let data = self
            .weights
            .chunks_exact(fan_in)
            .zip(offsets)
            .map(|(w, o)| (w[..ld].iter().zip(latent).map(|(a, b)| a * b).sum::<f64>() + o).tanh())
            .collect();
        TokenMatrix::new(self.cfg.tokens, self.cfg.channels, data)
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action.iter().map(|a| a.clamp(-self.cfg.a_max, self.cfg.a_max)).collect()
    }

    /// `clip(a_max * unit(goal - latent) + bias + noise)`; no trainable parameters.
    pub fn base_policy(&self, latent: &[f64], task: usize, noise: &[f64]) -> Result<Vec<f64>> {
        let goal = self.goal(task)?;
        let diff: Vec<f64> = goal.iter().zip(latent).map(|(g, x)| g - x).collect();
        let n = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let raw: Vec<f64> = diff
            .iter()
            .zip(&self.cfg.base_bias)
            .zip(noise)
            .map(|((d, b), e)| if n > 0.0 { self.cfg.a_max * d / n } else { 0.0 } + b + e)
            .collect();
        Ok(self.clip_action(&raw))
    }

    /// FNV checksum over everything that defines the base controller and encoder.
    pub fn base_policy_checksum(&self) -> u64 {
        let mut v = self.cfg.base_bias.clone();
        v.push(self.cfg.base_noise);
        v.push(self.cfg.a_max);
        v.extend(self.goals.iter().flatten());
        v.extend_from_slice(&self.weights);
        v.extend_from_slice(&self.biases);
        checksum_f64(&v)
    }

    fn draw_noise(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.cfg.action_dim)
            .map(|_| self.cfg.base_noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn snapshot(&mut self) -> Result<EpisodeStep> {
        let mut ep = self.episode.take().expect("active episode");
        let noise = self.draw_noise(&mut ep.rng);
        let base_action = self.base_policy(&ep.latent, ep.task, &noise)?;
        let step = EpisodeStep {
            step_index: ep.t,
            observation: self.encode(&ep.latent, ep.task)?,
            base_action,
            latent_state: ep.latent.clone(),
            done: ep.done,
            success: ep.done && self.reached(&ep.latent, ep.task),
        };
        self.episode = Some(ep);
        Ok(step)
    }

    fn reached(&self, latent: &[f64], task: usize) -> bool {
        let g = &self.goals[task];
        g.iter().zip(latent).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= self.cfg.goal_radius
    }

    pub fn reset(&mut self, task: usize, seed: u64) -> Result<EpisodeStep> {
        self.check_task(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.cfg.start_half_width;
        let latent = (0..self.cfg.latent_dim)
            .map(|_| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 })
            .collect();
        self.episode = Some(Episode { task, latent, t: 0, rng, done: false });
        self.snapshot()
    }

    /// Executes `action` after componentwise clipping to `+-a_max`.
    pub fn step(&mut self, action: &[f64]) -> Result<EpisodeStep> {
        let ep = self.episode.as_mut().ok_or(Error::EpisodeFinished)?;
        if ep.done {
            return Err(Error::EpisodeFinished);
        }
        if action.len() != self.cfg.action_dim {
            return Err(Error::DimensionMismatch { expected: self.cfg.action_dim, got: action.len() });
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite action".into()));
        }
        let a_max = self.cfg.a_max;
        for (x, a) in ep.latent.iter_mut().zip(action) {
            *x += a.clamp(-a_max, a_max);
        }
        ep.t += 1;
        let task = ep.task;
        let latent = ep.latent.clone();
        let success = self.reached(&latent, task);
        let ep = self.episode.as_mut().unwrap();
        ep.done = success || ep.t >= self.cfg.horizon;
        self.snapshot()
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_none_or(|e| e.done)
    }

    pub fn task(&self) -> Option<usize> {
        self.episode.as_ref().map(|e| e.task)
    }
}

/// One line of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub latent: Vec<f64>,
    pub action: Vec<f64>,
    pub success: bool,
}

/// Actions executed in one episode plus the reset arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub task: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeLog {
    pub header: Option<EpisodeHeader>,
    pub records: Vec<LogRecord>,
}

impl EpisodeLog {
    pub fn new(task: usize, seed: u64) -> Self {
        Self { header: Some(EpisodeHeader { task, seed }), records: Vec::new() }
    }

    /// Appends the action taken from `before` and whether the result succeeded.
    pub fn record(&mut self, before: &EpisodeStep, action: &[f64], after: &EpisodeStep) {
        self.records.push(LogRecord {
            step: before.step_index,
            latent: before.latent_state.clone(),
            action: action.to_vec(),
            success: after.success,
        });
    }

    /// Header line then one record per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        if let Some(h) = &self.header {
            writeln!(w, "{}", serde_json::to_string(h).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut log = Self::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                if let Ok(h) = serde_json::from_str::<EpisodeHeader>(&line) {
                    log.header = Some(h);
                    continue;
                }
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            log.records.push(rec);
        }
        Ok(log)
    }

    /// Re-executes the logged actions and returns every observed step.
    pub fn replay(&self, env: &mut TokenWorld) -> Result<Vec<EpisodeStep>> {
        let h = self
            .header
            .as_ref()
            .ok_or_else(|| Error::Format("episode log has no header".into()))?;
        let mut out = vec![env.reset(h.task, h.seed)?];
        for r in &self.records {
            out.push(env.step(&r.action)?);
        }
        Ok(out)
    }
}

/// Base-only success rate over `episodes` resets cycling through the tasks.
pub fn base_success_rate(env: &mut TokenWorld, episodes: usize, seed: u64) -> Result<f64> {
    let mut wins = 0usize;
    for ep in 0..episodes {
        let task = ep % env.config().n_tasks;
        let mut s = env.reset(task, seed.wrapping_mul(1_000_003).wrapping_add(ep as u64))?;
        while !s.done {
            let a = s.base_action.clone();
            s = env.step(&a)?;
        }
        wins += s.success as usize;
    }
    Ok(wins as f64 / episodes.max(1) as f64)
}
