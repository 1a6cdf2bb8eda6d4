//! Two-stage retrieval: instruction filter, then step scoring and sampling.

use std::cmp::Ordering;

use rand::Rng;

use crate::bank::{ExperienceBank, Rollout, StepRecord};
use crate::embedding::{cosine, dequantize, TokenMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    pub top_n_rollouts: usize,
    pub top_k_steps: usize,
    pub temperature: f64,
    pub lambda_mix: f64,
    pub beta_len: f64,
    /// `None` uses the mean rollout length of the candidate set.
    pub ref_len: Option<f64>,
    pub rng_seed: u64,
    /// Keep one reference per episode and advance it stepwise.
    pub freeze_reference: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_n_rollouts: 5,
            top_k_steps: 8,
            temperature: 0.1,
            lambda_mix: 0.7,
            beta_len: 1.0,
            ref_len: None,
            rng_seed: 0,
            freeze_reference: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n_rollouts == 0 || self.top_k_steps == 0 {
            return Err(Error::InvalidConfig("top_n_rollouts and top_k_steps must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(Error::InvalidConfig(format!("lambda_mix must be in [0, 1], got {}", self.lambda_mix)));
        }
        if !(self.beta_len >= 0.0) {
            return Err(Error::InvalidConfig("beta_len must be nonnegative".into()));
        }
        if let Some(l) = self.ref_len {
            if !(l > 0.0) {
                return Err(Error::InvalidConfig("ref_len must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A retrieved `(F^, a^, F^+)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedStep {
    pub rollout_id: u32,
    pub step_index: usize,
    pub matched_features: TokenMatrix,
    /// Dequantized stored key.
    pub matched_key: Vec<f64>,
    pub matched_action: Vec<f64>,
    pub successor_features: TokenMatrix,
    pub score: f64,
}

impl RetrievedStep {
    pub fn from_rollout(rollout: &Rollout, step_index: usize, score: f64) -> Result<Self> {
        let successor = rollout.successor(step_index)?.clone();
        let step = &rollout.steps()[step_index];
        Ok(Self {
            rollout_id: rollout.id(),
            step_index,
            matched_features: step.features().clone(),
            matched_key: dequantize(step.key()),
            matched_action: step.base_action().to_vec(),
            successor_features: successor,
            score,
        })
    }

    /// The next step of the same rollout, or `self` when it would be terminal.
    pub fn advanced(&self, bank: &ExperienceBank) -> Result<Self> {
        let rollout = bank.get(self.rollout_id).ok_or(Error::UnknownRollout(self.rollout_id))?;
        if self.step_index + 2 < rollout.len() {
            Self::from_rollout(rollout, self.step_index + 1, self.score)
        } else {
            Ok(self.clone())
        }
    }
}

/// A shortlisted step before sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredStep<'a> {
    pub rollout: &'a Rollout,
    pub step_index: usize,
    pub cosine: f64,
    pub prior: f64,
    pub score: f64,
}

impl ScoredStep<'_> {
    fn order_key(&self) -> (u32, usize) {
        (self.rollout.id(), self.step_index)
    }

    pub fn step(&self) -> &StepRecord {
        &self.rollout.steps()[self.step_index]
    }
}

/// Optional second-stage rescoring of the shortlist.
pub trait Reranker {
    fn rescore(&self, rollout: &Rollout, step: &StepRecord, score: f64) -> Result<f64>;
}

impl<F> Reranker for F
where
    F: Fn(&Rollout, &StepRecord, f64) -> Result<f64>,
{
    fn rescore(&self, rollout: &Rollout, step: &StepRecord, score: f64) -> Result<f64> {
        self(rollout, step, score)
    }
}

/// The `n` rollouts whose instruction embedding is closest to `query_instr`.
pub fn filter_by_instruction<'a>(bank: &'a ExperienceBank, query_instr: &[f64], n: usize) -> Result<Vec<&'a Rollout>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let mut scored = bank
        .rollouts()
        .iter()
        .map(|r| Ok((cosine(query_instr, r.instruction().as_slice())?, r)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id().cmp(&b.1.id())));
    Ok(scored.into_iter().take(n).map(|(_, r)| r).collect())
}

/// `g(L) = exp(-beta * L / ref_len)`.
pub fn efficiency_prior(len: usize, beta_len: f64, ref_len: f64) -> f64 {
    (-beta_len * len as f64 / ref_len).exp()
}

fn by_score_desc(a: &ScoredStep, b: &ScoredStep) -> Ordering {
    b.score.total_cmp(&a.score).then(a.order_key().cmp(&b.order_key()))
}

/// Scores every non-terminal candidate step and keeps the top `k`, best first.
pub fn shortlist<'a>(query: &[f64], candidates: &[&'a Rollout], cfg: &RetrievalConfig) -> Result<Vec<ScoredStep<'a>>> {
    shortlist_with(query, candidates, cfg, None)
}

pub fn shortlist_with<'a>(
    query: &[f64],
    candidates: &[&'a Rollout],
    cfg: &RetrievalConfig,
    reranker: Option<&dyn Reranker>,
) -> Result<Vec<ScoredStep<'a>>> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::NoCandidate);
    }
    let ref_len = cfg
        .ref_len
        .unwrap_or_else(|| candidates.iter().map(|r| r.len() as f64).sum::<f64>() / candidates.len() as f64);
    let lambda = cfg.lambda_mix;
    let mut out = Vec::new();
    for &r in candidates {
        let prior = efficiency_prior(r.len(), cfg.beta_len, ref_len);
        for (i, step) in r.steps().iter().enumerate().take(r.len() - 1) {
            let c = cosine(query, &dequantize(step.key()))?;
            out.push(ScoredStep {
                rollout: r,
                step_index: i,
                cosine: c,
                prior,
                score: lambda * c + (1.0 - lambda) * prior,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::NoCandidate);
    }
    out.sort_by(by_score_desc);
    out.truncate(cfg.top_k_steps);
    if let Some(rr) = reranker {
        for s in &mut out {
            s.score = rr.rescore(s.rollout, s.step(), s.score)?;
        }
        out.sort_by(by_score_desc);
    }
    Ok(out)
}

/// `exp(s_i / tau) / sum_j exp(s_j / tau)`, evaluated with a max shift.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Softmax sample from the top-`k` shortlist.
pub fn score_and_sample(
    query: &[f64],
    candidates: &[&Rollout],
    cfg: &RetrievalConfig,
    rng: &mut impl Rng,
) -> Result<RetrievedStep> {
    score_and_sample_with(query, candidates, cfg, rng, None)
}

pub fn score_and_sample_with(
    query: &[f64],
    candidates: &[&Rollout],
    cfg: &RetrievalConfig,
    rng: &mut impl Rng,
    reranker: Option<&dyn Reranker>,
) -> Result<RetrievedStep> {
    let list = shortlist_with(query, candidates, cfg, reranker)?;
    let scores: Vec<f64> = list.iter().map(|s| s.score).collect();
    let pick = &list[draw(&softmax(&scores, cfg.temperature), rng)];
    RetrievedStep::from_rollout(pick.rollout, pick.step_index, pick.score)
}

/// Argmax of the combined score; lower `(rollout_id, step_index)` wins ties.
pub fn deterministic_retrieve(query: &[f64], candidates: &[&Rollout], cfg: &RetrievalConfig) -> Result<RetrievedStep> {
    let list = shortlist(query, candidates, cfg)?;
    let best = &list[0];
    RetrievedStep::from_rollout(best.rollout, best.step_index, best.score)
}
