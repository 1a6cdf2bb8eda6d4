//! Training and evaluation loops over the token world.
//!
//! Each step pools the observation into a key, retrieves a reference
//! `(F^, a^, F^+)` from the bank, asks the actor for a bounded residual and
//! executes `a0 + da`. Training episodes feed the replay buffer; evaluation
//! episodes are deterministic and grow a live bank.

pub mod config;
pub mod metrics;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{EvalInsert, RunConfig, OUTPUT_DIR_ENV};
pub use metrics::{EpisodeRecord, Metrics, Phase, SeedMetrics, Tally};

use crate::bank::{ExperienceBank, Outcome, Retention, Rollout, StepRecord};
use crate::embedding::KeySpace;
use crate::env::{EpisodeStep, TokenWorld};
use crate::error::{Error, Result};
use crate::retrieval::{deterministic_retrieve, filter_by_instruction, score_and_sample, RetrievedStep};
use crate::reward::{affine_map_reward, semantic_similarity, shaped_reward, simple_reward};
use crate::sac::{checkpoint, raw_context, ReplayBuffer, ReplayTransition, SacState};

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_SAC: u64 = 3;
const STREAM_RETRIEVAL: u64 = 4;
const STREAM_BANK: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent per-purpose seed for `(run seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

pub fn train_episode_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, STREAM_TRAIN, episode as u64)
}

pub fn eval_episode_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, STREAM_EVAL, episode as u64)
}

/// Learner state plus the fixed key space.
#[derive(Debug, Clone)]
pub struct Agent {
    pub sac: SacState,
    pub replay: ReplayBuffer,
    pub keys: KeySpace,
    retrieval_rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let sac_cfg = crate::sac::SacConfig { seed: derive_seed(seed, STREAM_SAC, 0), ..cfg.sac.clone() };
        let sac = SacState::new(sac_cfg, cfg.raw_context_dim())?;
        Self::from_sac(cfg, sac, seed)
    }

    /// Wraps a trained or reloaded learner; the replay buffer starts empty.
    pub fn from_sac(cfg: &RunConfig, sac: SacState, seed: u64) -> Result<Self> {
        if sac.raw_dim() != cfg.raw_context_dim() {
            return Err(Error::DimensionMismatch { expected: cfg.raw_context_dim(), got: sac.raw_dim() });
        }
        Ok(Self {
            replay: ReplayBuffer::new(sac.cfg.replay_capacity)?,
            sac,
            keys: KeySpace::gaussian(cfg.env.channels, cfg.key_dim, cfg.key_seed)?,
            retrieval_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed ^ cfg.retrieval.rng_seed, STREAM_RETRIEVAL, 0)),
        })
    }
}

/// How the residual is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    Zero,
    Sample,
    Deterministic,
}

/// Which reward a training transition carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Simple,
    Shaped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub base_action: Vec<f64>,
    pub residual: Vec<f64>,
    /// Sent to the environment, which clips it to `+-a_max`.
    pub action: Vec<f64>,
    pub reward: f64,
    pub reference: Option<(u32, usize)>,
}

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub record: EpisodeRecord,
    pub rollout: Rollout,
    pub transitions: Vec<ReplayTransition>,
    pub trace: Vec<StepTrace>,
}

/// Identifies one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub phase: Phase,
    pub episode: usize,
    pub seed: u64,
    pub task: usize,
    pub env_seed: u64,
    pub volume: Option<usize>,
    pub rollout_id: u32,
}

fn retrieve(
    bank: &ExperienceBank,
    instr: &[f64],
    key: &[f64],
    cfg: &RunConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<RetrievedStep>> {
    if bank.is_empty() {
        return Ok(None);
    }
    let cands = filter_by_instruction(bank, instr, cfg.retrieval.top_n_rollouts)?;
    let picked = match rng {
        Some(rng) => score_and_sample(key, &cands, &cfg.retrieval, rng),
        None => deterministic_retrieve(key, &cands, &cfg.retrieval),
    };
    match picked {
        Ok(s) => Ok(Some(s)),
        Err(Error::NoCandidate) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Raw encoder input; actions are divided by `scale`.
fn context(key: &[f64], base: &[f64], reference: Option<&RetrievedStep>, instr: &[f64], scale: f64) -> Vec<f64> {
    let base: Vec<f64> = base.iter().map(|a| a / scale).collect();
    match reference {
        Some(r) => {
            let matched: Vec<f64> = r.matched_action.iter().map(|a| a / scale).collect();
            raw_context(key, &base, &r.matched_key, &matched, instr)
        }
        None => raw_context(key, &base, &vec![0.0; key.len()], &vec![0.0; base.len()], instr),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs one episode. `reward_kind` is `None` outside training; rewards are
/// still computed for the metrics, and transitions are only emitted in
/// training when a reference exists.
pub fn run_episode(
    env: &mut TokenWorld,
    bank: &ExperienceBank,
    agent: &mut Agent,
    cfg: &RunConfig,
    spec: EpisodeSpec,
    mode: ResidualMode,
    reward_kind: Option<RewardKind>,
) -> Result<EpisodeRun> {
    let sampled = mode == ResidualMode::Sample;
    let instr = env.instruction(spec.task)?.as_slice().to_vec();
    let instr_key = env.instruction(spec.task)?.clone();
    let mut cur: EpisodeStep = env.reset(spec.task, spec.env_seed)?;
    let mut key = agent.keys.key(&cur.observation)?.into_vec();
    let mut reference = {
        let rng = sampled.then_some(&mut agent.retrieval_rng);
        retrieve(bank, &instr, &key, cfg, rng)?
    };

    let mut steps = Vec::new();
    let mut transitions = Vec::new();
    let mut trace = Vec::new();
    let mut reward_sum = 0.0;
    let mut residual_norm_sum = 0.0;
    loop {
        let scale = cfg.sac.action_scale;
        let raw = context(&key, &cur.base_action, reference.as_ref(), &instr, scale);
        let residual = match (mode, reference.is_some()) {
            (ResidualMode::Zero, _) | (_, false) => vec![0.0; cur.base_action.len()],
            (ResidualMode::Sample, true) => agent.sac.act(&raw, false)?.0,
            (ResidualMode::Deterministic, true) => agent.sac.act(&raw, true)?.0,
        };
        let action: Vec<f64> = cur.base_action.iter().zip(&residual).map(|(a, d)| a + d).collect();
        let next = env.step(&action)?;
        let next_key = agent.keys.key(&next.observation)?.into_vec();

        let reward = match &reference {
            Some(r) => {
                let score = match reward_kind.unwrap_or(RewardKind::Shaped) {
                    RewardKind::Shaped => {
                        shaped_reward(
                            &cur.observation,
                            &next.observation,
                            &r.matched_features,
                            &r.successor_features,
                            &cfg.reward,
                            &cfg.similarity,
                        )?
                        .total
                    }
                    RewardKind::Simple => {
                        let s_next = semantic_similarity(&next.observation, &r.successor_features, &cfg.similarity)?;
                        simple_reward(s_next, &residual, &cfg.reward)
                    }
                };
                affine_map_reward(score, cfg.reward.alpha_map, cfg.reward.beta_map)
            }
            None => 0.0,
        };

        let next_reference = match &reference {
            Some(r) if cfg.retrieval.freeze_reference => Some(r.advanced(bank)?),
            _ if next.done => None,
            _ => {
                let rng = sampled.then_some(&mut agent.retrieval_rng);
                retrieve(bank, &instr, &next_key, cfg, rng)?
            }
        };

        if reward_kind.is_some() && reference.is_some() {
            let next_ref = next_reference.as_ref().or(reference.as_ref());
            let next_raw = context(&next_key, &next.base_action, next_ref, &instr, scale);
            transitions.push(ReplayTransition {
                context: raw,
                next_context: next_raw,
                residual: residual.clone(),
                base_action: cur.base_action.clone(),
                next_base_action: next.base_action.clone(),
                reward,
                done: next.done,
            });
        }

        steps.push(StepRecord::from_features(&agent.keys, &cur.observation, &env.clip_action(&action), cur.step_index)?);
        reward_sum += reward;
        residual_norm_sum += norm(&residual);
        trace.push(StepTrace {
            base_action: cur.base_action.clone(),
            residual,
            action,
            reward,
            reference: reference.as_ref().map(|r| (r.rollout_id, r.step_index)),
        });

        cur = next;
        key = next_key;
        reference = next_reference;
        if cur.done {
            break;
        }
    }
    let zero = vec![0.0; cur.base_action.len()];
    steps.push(StepRecord::from_features(&agent.keys, &cur.observation, &zero, cur.step_index)?);
    let outcome = if cur.success { Outcome::Success } else { Outcome::Failure };
    let rollout = Rollout::new(spec.rollout_id, &instr_key, steps, outcome)?;
    let n = trace.len();
    Ok(EpisodeRun {
        record: EpisodeRecord {
            phase: spec.phase,
            episode: spec.episode,
            seed: spec.seed,
            volume: spec.volume,
            success: cur.success,
            steps: n,
            mean_residual_norm: residual_norm_sum / n as f64,
            reward_sum,
        },
        rollout,
        transitions,
        trace,
    })
}

/// Training-phase episode: sampled retrieval and residual; zero residual
/// while the bank is empty or during bootstrap.
pub fn run_episode_train(
    env: &mut TokenWorld,
    bank: &ExperienceBank,
    agent: &mut Agent,
    cfg: &RunConfig,
    spec: EpisodeSpec,
    reward_kind: RewardKind,
) -> Result<EpisodeRun> {
    let bootstrap = spec.phase == Phase::Bootstrap || bank.is_empty();
    let mode = if bootstrap { ResidualMode::Zero } else { ResidualMode::Sample };
    let kind = if bootstrap { None } else { Some(reward_kind) };
    let spec = EpisodeSpec { phase: if bootstrap { Phase::Bootstrap } else { spec.phase }, ..spec };
    run_episode(env, bank, agent, cfg, spec, mode, kind)
}

/// Evaluation episode with deterministic retrieval and residual; the rollout
/// joins `bank` according to `eval_insert`.
pub fn run_episode_eval(
    env: &mut TokenWorld,
    bank: &mut ExperienceBank,
    agent: &mut Agent,
    cfg: &RunConfig,
    spec: EpisodeSpec,
    zero_residual: bool,
) -> Result<EpisodeRun> {
    let mode = if zero_residual { ResidualMode::Zero } else { ResidualMode::Deterministic };
    let run = run_episode(env, bank, agent, cfg, spec, mode, None)?;
    if cfg.eval_insert == EvalInsert::All || run.record.success {
        bank.insert(run.rollout.clone())?;
    }
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub agent: Agent,
    pub bank: ExperienceBank,
    pub records: Vec<EpisodeRecord>,
    pub updates: u64,
}

fn training_bank(cfg: &RunConfig, seed: u64) -> Result<ExperienceBank> {
    match cfg.train_bank_capacity {
        Some(c) => {
            let retention = match cfg.train_retention {
                Retention::Reservoir { seed: s } => Retention::Reservoir { seed: derive_seed(seed ^ s, STREAM_BANK, 0) },
                r => r,
            };
            ExperienceBank::with_capacity(c, retention)
        }
        None => Ok(ExperienceBank::new()),
    }
}

pub fn train(cfg: &RunConfig, seed: u64) -> Result<TrainOutput> {
    train_with(cfg, seed, |_, _| Ok(()))
}

/// `after_episode(index, agent)` runs after every episode's updates.
pub fn train_with(
    cfg: &RunConfig,
    seed: u64,
    mut after_episode: impl FnMut(usize, &Agent) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut env = TokenWorld::new(cfg.env.clone())?;
    let mut agent = Agent::new(cfg, seed)?;
    let mut bank = training_bank(cfg, seed)?;
    let mut records = Vec::with_capacity(cfg.episodes_train);
    let mut updates = 0u64;
    let post = cfg.episodes_train.saturating_sub(cfg.bootstrap_episodes);
    let warmup = (cfg.warmup_fraction * post as f64).round() as usize;
    let ready = cfg.learning_starts.max(cfg.sac.batch_size);
    for e in 0..cfg.episodes_train {
        let phase = if e < cfg.bootstrap_episodes { Phase::Bootstrap } else { Phase::Train };
        let kind = if e < cfg.bootstrap_episodes + warmup { RewardKind::Simple } else { RewardKind::Shaped };
        let spec = EpisodeSpec {
            phase,
            episode: e,
            seed,
            task: e % cfg.env.n_tasks,
            env_seed: train_episode_seed(seed, e),
            volume: None,
            rollout_id: e as u32,
        };
        let run = run_episode_train(&mut env, &bank, &mut agent, cfg, spec, kind)?;
        let n_updates = run.transitions.len() * cfg.updates_per_step;
        for t in run.transitions {
            agent.replay.push(t);
        }
        for _ in 0..n_updates {
            if agent.replay.len() < ready {
                break;
            }
            let batch = agent
                .replay
                .sample(cfg.sac.batch_size, agent.sac.rng_mut())
                .expect("replay holds at least one batch");
            agent.sac.update(&batch)?;
            updates += 1;
        }
        bank.insert(run.rollout)?;
        records.push(run.record);
        after_episode(e, &agent)?;
    }
    Ok(TrainOutput { agent, bank, records, updates })
}

/// The most recent `volume` rollouts of `source` in a success-priority bank
/// of that budget.
pub fn seed_eval_bank(source: &ExperienceBank, volume: usize) -> Result<ExperienceBank> {
    let mut bank = ExperienceBank::with_capacity(volume, Retention::SuccessPriority)?;
    let rs = source.rollouts();
    for r in &rs[rs.len().saturating_sub(volume)..] {
        bank.insert(r.clone())?;
    }
    Ok(bank)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub records: Vec<EpisodeRecord>,
    pub bank: ExperienceBank,
    pub traces: Vec<Vec<StepTrace>>,
}

/// `episodes_eval` deterministic episodes growing `bank`.
pub fn evaluate(
    cfg: &RunConfig,
    agent: &mut Agent,
    mut bank: ExperienceBank,
    seed: u64,
    volume: Option<usize>,
    zero_residual: bool,
) -> Result<EvalOutput> {
    cfg.validate()?;
    let mut env = TokenWorld::new(cfg.env.clone())?;
    let mut next_id = bank.next_id();
    let mut records = Vec::with_capacity(cfg.episodes_eval);
    let mut traces = Vec::with_capacity(cfg.episodes_eval);
    for e in 0..cfg.episodes_eval {
        let spec = EpisodeSpec {
            phase: if zero_residual { Phase::Base } else { Phase::Eval },
            episode: e,
            seed,
            task: e % cfg.env.n_tasks,
            env_seed: eval_episode_seed(seed, e),
            volume,
            rollout_id: next_id,
        };
        let run = run_episode_eval(&mut env, &mut bank, agent, cfg, spec, zero_residual)?;
        next_id = next_id.max(bank.next_id()).max(spec.rollout_id + 1);
        records.push(run.record);
        traces.push(run.trace);
    }
    Ok(EvalOutput { records, bank, traces })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRow {
    pub volume: usize,
    pub metrics: Metrics,
    pub records: Vec<EpisodeRecord>,
}

/// Evaluates one trained agent per seed at every volume in `bank_volume_sweep`.
pub fn volume_sweep(cfg: &RunConfig, trained: &mut [(u64, Agent, ExperienceBank)]) -> Result<Vec<VolumeRow>> {
    let mut rows = Vec::with_capacity(cfg.bank_volume_sweep.len());
    for &volume in &cfg.bank_volume_sweep {
        let mut records = Vec::new();
        for (seed, agent, bank) in trained.iter_mut() {
            let live = seed_eval_bank(bank, volume)?;
            records.extend(evaluate(cfg, agent, live, *seed, Some(volume), false)?.records);
        }
        rows.push(VolumeRow { volume, metrics: Metrics::from_records(&records), records });
    }
    Ok(rows)
}

/// What `run_experiment` does after training each seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plan {
    pub eval: bool,
    pub base: bool,
    pub sweep: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<EpisodeRecord>,
    pub train: Metrics,
    pub eval: Option<Metrics>,
    pub base: Option<Metrics>,
    pub sweep: Vec<VolumeRow>,
    pub base_checksum_before: u64,
    pub base_checksum_after: u64,
    pub files: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint-seed{seed}.efns"))
}

pub fn bank_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("bank-seed{seed}.efnb"))
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.jsonl")
}

pub fn write_metrics(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let f = fs::File::create(path)?;
    metrics::write_jsonl(records, BufWriter::new(f))
}

/// Trains every seed, writes checkpoints, banks and metrics into
/// `output_dir`, then runs the requested evaluations.
pub fn run_experiment(cfg: &RunConfig, plan: Plan) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let checksum = |cfg: &RunConfig| TokenWorld::new(cfg.env.clone()).map(|e| e.base_policy_checksum());
    let before = checksum(cfg)?;
    let mut files = Vec::new();
    let mut train_records = Vec::new();
    let mut trained = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let ckpt = checkpoint_path(&dir, seed);
        let every = cfg.checkpoint_every;
        let out = train_with(cfg, seed, |e, agent| {
            if every > 0 && (e + 1) % every == 0 {
                checkpoint::save(&agent.sac, &ckpt)?;
            }
            Ok(())
        })?;
        checkpoint::save(&out.agent.sac, &ckpt)?;
        out.bank.save(bank_path(&dir, seed))?;
        files.push(ckpt);
        files.push(bank_path(&dir, seed));
        train_records.extend(out.records);
        trained.push((seed, out.agent, out.bank));
    }
    let mut records = train_records.clone();
    let mut eval_records = Vec::new();
    let mut base_records = Vec::new();
    for (seed, agent, bank) in trained.iter_mut() {
        if plan.base {
            let live = seed_eval_bank(bank, cfg.eval_volume)?;
            base_records.extend(evaluate(cfg, agent, live, *seed, Some(cfg.eval_volume), true)?.records);
        }
        if plan.eval {
            let live = seed_eval_bank(bank, cfg.eval_volume)?;
            eval_records.extend(evaluate(cfg, agent, live, *seed, Some(cfg.eval_volume), false)?.records);
        }
    }
    records.extend(base_records.iter().cloned());
    records.extend(eval_records.iter().cloned());
    let sweep = if plan.sweep { volume_sweep(cfg, &mut trained)? } else { Vec::new() };
    for row in &sweep {
        records.extend(row.records.iter().cloned());
    }
    let mpath = metrics_path(&dir);
    write_metrics(&mpath, &records)?;
    files.push(mpath);
    Ok(ExperimentOutput {
        train: Metrics::from_records(&train_records),
        eval: plan.eval.then(|| Metrics::from_records(&eval_records)),
        base: plan.base.then(|| Metrics::from_records(&base_records)),
        sweep,
        base_checksum_before: before,
        base_checksum_after: checksum(cfg)?,
        records,
        files,
    })
}
