//! Rollout-organized experience memory with retention and binary persistence.

use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{Key, KeySpace, QuantizedKey, TokenMatrix};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EFNB";
pub const VERSION: u16 = 1;

/// L-infinity threshold below which a base action counts as the no-op.
pub const BLANK_TOL: f64 = 1e-9;

pub fn is_blank_action(a: &[f64]) -> bool {
    a.iter().all(|v| v.abs() <= BLANK_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Failure,
    Success,
    Unknown,
}

impl Outcome {
    pub fn to_byte(self) -> u8 {
        match self {
            Outcome::Failure => 0,
            Outcome::Success => 1,
            Outcome::Unknown => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Outcome::Failure),
            1 => Ok(Outcome::Success),
            2 => Ok(Outcome::Unknown),
            _ => Err(Error::Format(format!("unknown outcome byte {b}"))),
        }
    }

    pub fn is_success(self) -> bool {
        self == Outcome::Success
    }
}

/// One stored step `(F_t, k_t, a_t)`.
///
/// Features and the base action are held at `f32` precision so a saved bank
/// reloads bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    features: TokenMatrix,
    key: QuantizedKey,
    base_action: Vec<f64>,
    step_index: usize,
}

impl StepRecord {
    pub fn new(features: &TokenMatrix, key: QuantizedKey, base_action: &[f64], step_index: usize) -> Result<Self> {
        if base_action.iter().any(|v| !v.is_finite()) || features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite step data".into()));
        }
        Ok(Self {
            features: features.to_f32_precision(),
            key,
            base_action: base_action.iter().map(|&v| v as f32 as f64).collect(),
            step_index,
        })
    }

    /// Builds the record and its key from the `f32`-rounded features.
    pub fn from_features(
        space: &KeySpace,
        features: &TokenMatrix,
        base_action: &[f64],
        step_index: usize,
    ) -> Result<Self> {
        let rounded = features.to_f32_precision();
        let key = space.quantized_key(&rounded)?;
        Self::new(&rounded, key, base_action, step_index)
    }

    pub fn features(&self) -> &TokenMatrix {
        &self.features
    }

    pub fn key(&self) -> &QuantizedKey {
        &self.key
    }

    pub fn base_action(&self) -> &[f64] {
        &self.base_action
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    id: u32,
    instruction: Key,
    steps: Vec<StepRecord>,
    outcome: Outcome,
}

impl Rollout {
    /// Steps must be indexed `0, 1, ..., L-1` and share one key dimension.
    pub fn new(id: u32, instruction: &Key, steps: Vec<StepRecord>, outcome: Outcome) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidInput(format!("rollout {id} has no steps")));
        }
        for (i, s) in steps.iter().enumerate() {
            if s.step_index != i {
                return Err(Error::InvalidInput(format!(
                    "rollout {id}: step at position {i} has index {}",
                    s.step_index
                )));
            }
        }
        let d = steps[0].key.dim();
        if let Some(s) = steps.iter().find(|s| s.key.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: s.key.dim() });
        }
        Ok(Self {
            id,
            instruction: instruction.to_f32_precision(),
            steps,
            outcome,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn instruction(&self) -> &Key {
        &self.instruction
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn step(&self, index: usize) -> Option<&StepRecord> {
        self.steps.get(index)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    /// Always false; a rollout holds at least one step.
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn key_dim(&self) -> usize {
        self.steps[0].key.dim()
    }

    pub fn successor(&self, step_index: usize) -> Result<&TokenMatrix> {
        if step_index + 1 >= self.steps.len() {
            return Err(Error::NoSuccessor { rollout_id: self.id, step_index });
        }
        Ok(&self.steps[step_index + 1].features)
    }
}

/// What happens once a bounded bank is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    /// Capacity is ignored.
    Unbounded,
    /// Reservoir sampling (Algorithm R): the n-th offered rollout is kept with
    /// probability K/n, replacing a uniformly chosen resident.
    Reservoir { seed: u64 },
    /// Evict the oldest resident.
    Recency,
    /// Evict failed or unknown rollouts first, then the longest; oldest on ties.
    SuccessPriority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Evicted(u32),
    /// The reservoir declined the offered rollout.
    Discarded,
}

#[derive(Debug, Clone)]
pub struct ExperienceBank {
    rollouts: Vec<Rollout>,
    capacity: Option<usize>,
    retention: Retention,
    offered: u64,
    rng: ChaCha8Rng,
}

pub type SharedBank = Arc<RwLock<ExperienceBank>>;

impl Default for ExperienceBank {
    fn default() -> Self {
        Self::new()
    }
}

impl ExperienceBank {
    pub fn new() -> Self {
        Self {
            rollouts: Vec::new(),
            capacity: None,
            retention: Retention::Unbounded,
            offered: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_capacity(capacity: usize, retention: Retention) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("bank capacity must be positive".into()));
        }
        let seed = match retention {
            Retention::Reservoir { seed } => seed,
            _ => 0,
        };
        Ok(Self {
            capacity: Some(capacity),
            retention,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        })
    }

    pub fn into_shared(self) -> SharedBank {
        Arc::new(RwLock::new(self))
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    /// Residents in insertion order.
    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn get(&self, id: u32) -> Option<&Rollout> {
        self.rollouts.iter().find(|r| r.id == id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.get(id).is_some()
    }

    pub fn total_steps(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }

    /// One past the largest resident id.
    pub fn next_id(&self) -> u32 {
        self.rollouts.iter().map(|r| r.id + 1).max().unwrap_or(0)
    }

    fn check_dims(&self, r: &Rollout) -> Result<()> {
        if let Some(first) = self.rollouts.first() {
            if first.key_dim() != r.key_dim() {
                return Err(Error::DimensionMismatch { expected: first.key_dim(), got: r.key_dim() });
            }
            if first.instruction.dim() != r.instruction.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.instruction.dim(),
                    got: r.instruction.dim(),
                });
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, rollout: Rollout) -> Result<InsertOutcome> {
        if self.contains(rollout.id) {
            return Err(Error::DuplicateRollout(rollout.id));
        }
        self.check_dims(&rollout)?;
        self.offered += 1;
        let cap = match (self.capacity, self.retention) {
            (Some(c), r) if r != Retention::Unbounded && self.rollouts.len() >= c => c,
            _ => {
                self.rollouts.push(rollout);
                return Ok(InsertOutcome::Inserted);
            }
        };
        let victim = match self.retention {
            Retention::Reservoir { .. } => {
                let j = self.rng.random_range(0..self.offered);
                if j >= cap as u64 {
                    return Ok(InsertOutcome::Discarded);
                }
                j as usize
            }
            Retention::Recency => 0,
            Retention::SuccessPriority => self.priority_victim(),
            Retention::Unbounded => unreachable!(),
        };
        let evicted = self.rollouts.remove(victim).id;
        self.rollouts.push(rollout);
        Ok(InsertOutcome::Evicted(evicted))
    }

    fn priority_victim(&self) -> usize {
        // max by (not success, length); first index wins ties
        let mut best = 0;
        for (i, r) in self.rollouts.iter().enumerate() {
            let b = &self.rollouts[best];
            let rank = (!r.outcome.is_success(), r.len());
            let best_rank = (!b.outcome.is_success(), b.len());
            if rank > best_rank {
                best = i;
            }
        }
        best
    }

    pub fn remove(&mut self, id: u32) -> Result<Rollout> {
        let i = self
            .rollouts
            .iter()
            .position(|r| r.id == id)
            .ok_or(Error::UnknownRollout(id))?;
        Ok(self.rollouts.remove(i))
    }

    /// Features of step `step_index + 1` in the same rollout.
    pub fn successor_features(&self, rollout_id: u32, step_index: usize) -> Result<&TokenMatrix> {
        self.get(rollout_id)
            .ok_or(Error::UnknownRollout(rollout_id))?
            .successor(step_index)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.rollouts.len());
        for r in &self.rollouts {
            out.extend_from_slice(&r.id.to_le_bytes());
            out.push(r.outcome.to_byte());
            put_u32(&mut out, r.steps.len());
            put_u32(&mut out, r.instruction.dim());
            put_f32s(&mut out, r.instruction.as_slice());
            for s in &r.steps {
                put_u32(&mut out, s.features.rows());
                put_u32(&mut out, s.features.cols());
                put_f32s(&mut out, s.features.as_slice());
                s.key.write_to(&mut out);
                put_u32(&mut out, s.base_action.len());
                put_f32s(&mut out, &s.base_action);
            }
        }
        out
    }

    /// Decodes into an unbounded bank.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        let magic = rd.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:02x?}")));
        }
        let version = rd.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let count = rd.u32()?;
        let mut bank = Self::new();
        for _ in 0..count {
            let id = rd.u32()? as u32;
            let outcome = Outcome::from_byte(rd.u8()?)?;
            let len = rd.u32()?;
            let d_instr = rd.u32()?;
            let instr = Key::from_unit(rd.f32s(d_instr)?)
                .map_err(|_| Error::Format(format!("rollout {id}: instruction embedding is not unit norm")))?;
            let mut steps = Vec::with_capacity(len.min(1 << 16));
            for index in 0..len {
                let t = rd.u32()?;
                let d = rd.u32()?;
                let n = t
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format("feature shape overflows".into()))?;
                let features = TokenMatrix::new(t, d, rd.f32s(n)?)?;
                let key_dim = rd.u32()?;
                let codes: Vec<i8> = rd.take(key_dim)?.iter().map(|&b| b as i8).collect();
                let scale = rd.f32()?;
                let key = QuantizedKey::from_parts(codes, scale)?;
                let action_dim = rd.u32()?;
                let action = rd.f32s(action_dim)?;
                steps.push(StepRecord { features, key, base_action: action, step_index: index });
            }
            let rollout = Rollout::new(id, &instr, steps, outcome)?;
            match bank.insert(rollout) {
                Ok(_) => {}
                Err(Error::DuplicateRollout(id)) => {
                    return Err(Error::Format(format!("rollout id {id} appears twice")));
                }
                Err(e) => return Err(e),
            }
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        bank.offered = 0;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format("length overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}
