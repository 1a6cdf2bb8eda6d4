//! Soft actor-critic over residual actions.
//!
//! A one-layer tanh encoder maps the raw context
//! `[key_t; a0; matched key; matched action; instruction]` to `c`. Twin
//! critics score `Q(c, a0 + da)`; the encoder is trained through the critic
//! loss only and the actor sees a detached `c`.

mod actor;
pub mod checkpoint;
pub mod nn;
pub mod optim;
pub mod replay;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use actor::{
    log_one_minus_tanh_sq, squashed_log_prob, standard_normal, Actor, ActorObjective, ActorSample, LOG_STD_MAX,
    LOG_STD_MIN,
};
pub use nn::{Activation, Mlp, Trace};
pub use optim::Adam;
pub use replay::{ReplayBuffer, ReplayTransition};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub gamma: f64,
    pub polyak_tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    /// In normalized residual units; defaults to a quarter of `residual_dim`.
    pub target_entropy: f64,
    pub init_alpha: f64,
    pub replay_capacity: usize,
    pub residual_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub encoder_dim: usize,
    pub r_max: f64,
    /// Actions enter the critic divided by this.
    pub action_scale: f64,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self::for_residual_dim(2)
    }
}

impl SacConfig {
    pub fn for_residual_dim(residual_dim: usize) -> Self {
        Self {
            gamma: 0.98,
            polyak_tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            batch_size: 32,
            target_entropy: residual_dim as f64 / 4.0,
            init_alpha: 0.1,
            replay_capacity: 100_000,
            residual_dim,
            hidden_dims: vec![64, 64],
            encoder_dim: 64,
            r_max: 0.2,
            action_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must be in (0, 1)");
        }
        if !(self.polyak_tau > 0.0 && self.polyak_tau <= 1.0) {
            return bad("polyak_tau must be in (0, 1]");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0 && self.lr_alpha > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.residual_dim == 0 || self.encoder_dim == 0 {
            return bad("sizes must be positive");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.init_alpha > 0.0) || !self.target_entropy.is_finite() {
            return bad("init_alpha must be positive and target_entropy finite");
        }
        if !(self.r_max > 0.0) {
            return bad("r_max must be positive");
        }
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            return bad("action_scale must be positive");
        }
        Ok(())
    }
}

/// Encoded context `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

/// Concatenates the raw encoder input.
pub fn raw_context(key_t: &[f64], base_action: &[f64], matched_key: &[f64], matched_action: &[f64], instr: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(key_t.len() + base_action.len() + matched_key.len() + matched_action.len() + instr.len());
    v.extend_from_slice(key_t);
    v.extend_from_slice(base_action);
    v.extend_from_slice(matched_key);
    v.extend_from_slice(matched_action);
    v.extend_from_slice(instr);
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

/// Gradients of the critic loss.
#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub loss: f64,
    pub encoder: Vec<f64>,
    pub critic1: Vec<f64>,
    pub critic2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacState {
    pub cfg: SacConfig,
    pub encoder: Mlp,
    pub target_encoder: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub actor: Actor,
    pub log_alpha: f64,
    pub step: u64,
    pub(crate) opt_encoder: Adam,
    pub(crate) opt_critic1: Adam,
    pub(crate) opt_critic2: Adam,
    pub(crate) opt_actor: Adam,
    pub(crate) opt_alpha: Adam,
    pub(crate) rng: ChaCha8Rng,
}

impl SacState {
    pub fn new(cfg: SacConfig, raw_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if raw_dim == 0 {
            return Err(Error::InvalidConfig("raw context dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = Mlp::new(&[raw_dim, cfg.encoder_dim], Activation::Tanh, 1.0, &mut rng)?;
        let mut critic_sizes = vec![cfg.encoder_dim + cfg.residual_dim];
        critic_sizes.extend_from_slice(&cfg.hidden_dims);
        critic_sizes.push(1);
        let critic1 = Mlp::new(&critic_sizes, Activation::Identity, 1.0, &mut rng)?;
        let critic2 = Mlp::new(&critic_sizes, Activation::Identity, 1.0, &mut rng)?;
        let actor = Actor::new(cfg.encoder_dim, &cfg.hidden_dims, cfg.residual_dim, cfg.r_max, &mut rng)?;
        Ok(Self {
            opt_encoder: Adam::new(encoder.num_params(), cfg.lr_critic),
            opt_critic1: Adam::new(critic1.num_params(), cfg.lr_critic),
            opt_critic2: Adam::new(critic2.num_params(), cfg.lr_critic),
            opt_actor: Adam::new(actor.net().num_params(), cfg.lr_actor),
            opt_alpha: Adam::new(1, cfg.lr_alpha),
            log_alpha: cfg.init_alpha.ln(),
            target_encoder: encoder.clone(),
            target1: critic1.clone(),
            target2: critic2.clone(),
            encoder,
            critic1,
            critic2,
            actor,
            step: 0,
            rng,
            cfg,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn encode(&self, raw: &[f64]) -> Result<ContextVector> {
        Ok(ContextVector(self.encoder.forward(raw)?))
    }

    pub fn encode_context(
        &self,
        key_t: &[f64],
        base_action: &[f64],
        matched_key: &[f64],
        matched_action: &[f64],
        instr: &[f64],
    ) -> Result<ContextVector> {
        self.encode(&raw_context(key_t, base_action, matched_key, matched_action, instr))
    }

    /// Residual for a raw context; the log-probability is omitted in deterministic mode.
    pub fn act(&mut self, raw: &[f64], deterministic: bool) -> Result<(Vec<f64>, Option<f64>)> {
        let c = self.encode(raw)?;
        if deterministic {
            return Ok((self.actor.deterministic(&c.0)?, None));
        }
        let s = self.actor.sample(&c.0, &mut self.rng)?;
        Ok((s.residual, Some(s.log_prob)))
    }

    fn critic_input(&self, c: &[f64], base: &[f64], residual: &[f64]) -> Result<Vec<f64>> {
        if base.len() != residual.len() {
            return Err(Error::DimensionMismatch { expected: residual.len(), got: base.len() });
        }
        let inv = 1.0 / self.cfg.action_scale;
        let mut x = c.to_vec();
        x.extend(base.iter().zip(residual).map(|(a, d)| (a + d) * inv));
        Ok(x)
    }

    /// Online critic values at `a0 + da`.
    pub fn q_values(&self, c: &[f64], base: &[f64], residual: &[f64]) -> Result<(f64, f64)> {
        let x = self.critic_input(c, base, residual)?;
        Ok((self.critic1.forward(&x)?[0], self.critic2.forward(&x)?[0]))
    }

    /// Soft Bellman targets with caller-supplied noise for the next-step draw.
    pub fn critic_targets_with_noise(&self, batch: &[ReplayTransition], noise: &[Vec<f64>]) -> Result<Vec<f64>> {
        if batch.is_empty() || batch.len() != noise.len() {
            return Err(Error::InvalidInput("target batch must be nonempty with one noise row per transition".into()));
        }
        let alpha = self.alpha();
        batch
            .iter()
            .zip(noise)
            .map(|(t, xi)| {
                if t.done {
                    return Ok(t.reward);
                }
                let c_online = self.encoder.forward(&t.next_context)?;
                let s = self.actor.sample_with_noise(&c_online, xi)?;
                let c_target = self.target_encoder.forward(&t.next_context)?;
                let x = self.critic_input(&c_target, &t.next_base_action, &s.residual)?;
                let q = self.target1.forward(&x)?[0].min(self.target2.forward(&x)?[0]);
                Ok(t.reward + self.cfg.gamma * (q - alpha * s.log_prob))
            })
            .collect()
    }

    pub fn critic_targets(&mut self, batch: &[ReplayTransition]) -> Result<Vec<f64>> {
        let noise = self.draw_noise(batch.len());
        self.critic_targets_with_noise(batch, &noise)
    }

    fn draw_noise(&mut self, rows: usize) -> Vec<Vec<f64>> {
        (0..rows).map(|_| standard_normal(self.cfg.residual_dim, &mut self.rng)).collect()
    }

    /// `mean_b sum_i (Q_i - y_b)^2` and its gradients.
    pub fn critic_grads(&self, batch: &[ReplayTransition], targets: &[f64]) -> Result<CriticGrads> {
        if batch.is_empty() || batch.len() != targets.len() {
            return Err(Error::InvalidInput("critic batch must be nonempty with one target per transition".into()));
        }
        let inv_b = 1.0 / batch.len() as f64;
        let enc_dim = self.encoder.output_dim();
        let mut g = CriticGrads {
            loss: 0.0,
            encoder: vec![0.0; self.encoder.num_params()],
            critic1: vec![0.0; self.critic1.num_params()],
            critic2: vec![0.0; self.critic2.num_params()],
        };
        for (t, &y) in batch.iter().zip(targets) {
            let enc_trace = self.encoder.trace(&t.context)?;
            let x = self.critic_input(enc_trace.output(), &t.base_action, &t.residual)?;
            let mut d_c = vec![0.0; enc_dim];
            for (net, grad) in [(&self.critic1, &mut g.critic1), (&self.critic2, &mut g.critic2)] {
                let trace = net.trace(&x)?;
                let err = trace.output()[0] - y;
                g.loss += inv_b * err * err;
                let dx = net.backward(&trace, &[2.0 * inv_b * err], grad);
                for (d, v) in d_c.iter_mut().zip(&dx[..enc_dim]) {
                    *d += v;
                }
            }
            self.encoder.backward(&enc_trace, &d_c, &mut g.encoder);
        }
        Ok(g)
    }

    /// One critic step toward fixed targets.
    pub fn update_critics_toward(&mut self, batch: &[ReplayTransition], targets: &[f64]) -> Result<f64> {
        let g = self.critic_grads(batch, targets)?;
        self.opt_encoder.step(self.encoder.params_mut(), &g.encoder);
        self.opt_critic1.step(self.critic1.params_mut(), &g.critic1);
        self.opt_critic2.step(self.critic2.params_mut(), &g.critic2);
        Ok(g.loss)
    }

    pub fn update_critics(&mut self, batch: &[ReplayTransition]) -> Result<f64> {
        let y = self.critic_targets(batch)?;
        self.update_critics_toward(batch, &y)
    }

    /// Actor objective with `min(Q1, Q2)` on detached contexts.
    pub fn actor_objective(&self, batch: &[ReplayTransition], noise: &[Vec<f64>]) -> Result<ActorObjective> {
        let enc_dim = self.encoder.output_dim();
        let contexts = batch
            .iter()
            .map(|t| self.encoder.forward(&t.context))
            .collect::<Result<Vec<_>>>()?;
        self.actor.objective(&contexts, noise, self.alpha(), |b, residual| {
            let x = self.critic_input(&contexts[b], &batch[b].base_action, residual)?;
            let t1 = self.critic1.trace(&x)?;
            let t2 = self.critic2.trace(&x)?;
            let (net, trace) = if t1.output()[0] <= t2.output()[0] { (&self.critic1, t1) } else { (&self.critic2, t2) };
            let mut scratch = vec![0.0; net.num_params()];
            let dx = net.backward(&trace, &[1.0], &mut scratch);
            let inv = 1.0 / self.cfg.action_scale;
            Ok((trace.output()[0], dx[enc_dim..].iter().map(|d| d * inv).collect()))
        })
    }

    /// `d/d log_alpha` of `-alpha * (log_pi + target_entropy)`.
    pub fn alpha_grad(&self, mean_log_prob: f64) -> f64 {
        -self.alpha() * (mean_log_prob + self.cfg.target_entropy)
    }

    pub fn update_actor_and_alpha(&mut self, batch: &[ReplayTransition]) -> Result<(f64, f64, f64)> {
        let noise = self.draw_noise(batch.len());
        self.actor_alpha_step(batch, &noise)
    }

    /// Returns `(actor_loss, alpha, entropy estimate)`.
    pub fn actor_alpha_step(&mut self, batch: &[ReplayTransition], noise: &[Vec<f64>]) -> Result<(f64, f64, f64)> {
        let obj = self.actor_objective(batch, noise)?;
        self.opt_actor.step(self.actor.net_mut().params_mut(), &obj.grad);
        let g = self.alpha_grad(obj.mean_log_prob);
        let mut la = [self.log_alpha];
        self.opt_alpha.step(&mut la, &[g]);
        self.log_alpha = la[0];
        Ok((obj.loss, self.alpha(), -obj.mean_log_prob))
    }

    pub fn polyak_update(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidConfig(format!("polyak tau must be in (0, 1], got {tau}")));
        }
        self.target_encoder.polyak_from(&self.encoder, tau);
        self.target1.polyak_from(&self.critic1, tau);
        self.target2.polyak_from(&self.critic2, tau);
        Ok(())
    }

    /// Critic step, actor and temperature step, then target update.
    pub fn update(&mut self, batch: &[ReplayTransition]) -> Result<UpdateStats> {
        let critic_loss = self.update_critics(batch)?;
        let (actor_loss, alpha, entropy) = self.update_actor_and_alpha(batch)?;
        self.polyak_update(self.cfg.polyak_tau)?;
        self.step += 1;
        Ok(UpdateStats { critic_loss, actor_loss, alpha, entropy })
    }

    /// Checksum of every trained parameter.
    pub fn checksum(&self) -> u64 {
        let mut all = Vec::new();
        for net in [&self.encoder, &self.critic1, &self.critic2, self.actor.net()] {
            all.extend_from_slice(net.params());
        }
        all.push(self.log_alpha);
        nn::checksum_f64(&all)
    }
}
