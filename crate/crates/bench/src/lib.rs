//! Seeded inputs shared by the benchmarks.

use efn_core::bank::{ExperienceBank, Outcome, Rollout, StepRecord};
use efn_core::embedding::{Key, KeySpace, TokenMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn token_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> TokenMatrix {
    TokenMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `rollouts` random rollouts of length `len` over `rows x space.channels()` features.
pub fn bank(rng: &mut impl Rng, space: &KeySpace, rollouts: usize, len: usize, rows: usize) -> ExperienceBank {
    let mut bank = ExperienceBank::new();
    for id in 0..rollouts as u32 {
        let steps = (0..len)
            .map(|i| {
                let f = token_matrix(rng, rows, space.channels());
                let a = if i + 1 == len { [0.0, 0.0] } else { [0.05, -0.02] };
                StepRecord::from_features(space, &f, &a, i).unwrap()
            })
            .collect();
        let instr = Key::from_unit(unit(rng, 8)).unwrap();
        bank.insert(Rollout::new(id, &instr, steps, Outcome::Success).unwrap()).unwrap();
    }
    bank
}
