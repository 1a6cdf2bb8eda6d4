//! Semantic rewards: the simple residual-penalized reward, the shaped
//! anti-idling reward, and the affine score map.
//!
//! No running normalization is applied anywhere; every reward is a pure
//! function of its inputs.

use crate::embedding::{cosine, mean_max_key, TokenMatrix};
use crate::error::{Error, Result};
use crate::sinkhorn::{sinkhorn_similarity, SinkhornConfig};

#[derive(Debug, Clone, PartialEq, Default)]
pub enum SimilarityMode {
    /// `0.5 * (1 + cos)` of the mean-max keys.
    #[default]
    PooledCosine,
    Sinkhorn(SinkhornConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardWeights {
    pub w_abs: f64,
    pub w_prog: f64,
    pub w_mot: f64,
    pub w_lazy: f64,
    pub lambda_time: f64,
    pub eps_tol: f64,
    pub lambda_sem: f64,
    pub lambda_res: f64,
    pub alpha_map: f64,
    pub beta_map: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_abs: 1.0,
            w_prog: 0.5,
            w_mot: 0.1,
            w_lazy: 0.5,
            lambda_time: 0.01,
            eps_tol: 0.02,
            lambda_sem: 1.0,
            lambda_res: 0.1,
            alpha_map: 1.0,
            beta_map: 0.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("w_abs", self.w_abs),
            ("w_prog", self.w_prog),
            ("w_mot", self.w_mot),
            ("w_lazy", self.w_lazy),
            ("lambda_time", self.lambda_time),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let pos = [("eps_tol", self.eps_tol), ("lambda_sem", self.lambda_sem), ("lambda_res", self.lambda_res)];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha_map.is_finite() && self.beta_map.is_finite()) {
            return Err(Error::InvalidConfig("affine map coefficients must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub s_next: f64,
    pub s_cur: f64,
    pub s_stay: f64,
    pub a_t: f64,
    pub p_t: f64,
    pub m_t: f64,
    pub n_t: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Assembles every auxiliary term and the total from the three similarities.
    pub fn from_similarities(s_next: f64, s_cur: f64, s_stay: f64, w: &RewardWeights) -> Self {
        let a_t = s_next;
        let p_t = s_next - s_cur;
        let m_t = 1.0 - s_stay;
        let n_t = (w.eps_tol - p_t).max(0.0);
        let total = w.w_abs * a_t + w.w_prog * p_t.max(0.0) + w.w_mot * m_t
            - w.w_lazy * (s_next * n_t * s_stay)
            - w.lambda_time;
        Self { s_next, s_cur, s_stay, a_t, p_t, m_t, n_t, total }
    }

    pub fn anti_idle(&self, w: &RewardWeights) -> f64 {
        w.w_lazy * self.s_next * self.n_t * self.s_stay
    }
}

/// Similarity of two token matrices in `[0, 1]`.
pub fn semantic_similarity(f_a: &TokenMatrix, f_b: &TokenMatrix, mode: &SimilarityMode) -> Result<f64> {
    if f_a.cols() != f_b.cols() {
        return Err(Error::DimensionMismatch { expected: f_a.cols(), got: f_b.cols() });
    }
    match mode {
        SimilarityMode::PooledCosine => {
            let ka = mean_max_key(f_a, crate::EPS)?;
            let kb = mean_max_key(f_b, crate::EPS)?;
            Ok((0.5 * (1.0 + cosine(ka.as_slice(), kb.as_slice())?)).clamp(0.0, 1.0))
        }
        SimilarityMode::Sinkhorn(cfg) => {
            for m in [f_a, f_b] {
                if m.as_slice().iter().all(|&v| v == 0.0) {
                    return Err(Error::DegenerateInput("all-zero token matrix"));
                }
            }
            Ok(sinkhorn_similarity(f_a, f_b, cfg)?.score01)
        }
    }
}

/// `lambda_sem * s_next - lambda_res * |residual|^2`.
pub fn simple_reward(s_next: f64, residual: &[f64], w: &RewardWeights) -> f64 {
    let sq: f64 = residual.iter().map(|v| v * v).sum();
    w.lambda_sem * s_next - w.lambda_res * sq
}

/// Shaped reward for the transition `F_t -> F_{t+1}` against the reference
/// pair `(F^, F^+)`.
pub fn shaped_reward(
    f_t: &TokenMatrix,
    f_next: &TokenMatrix,
    f_hat: &TokenMatrix,
    f_hat_next: &TokenMatrix,
    w: &RewardWeights,
    mode: &SimilarityMode,
) -> Result<RewardBreakdown> {
    w.validate()?;
    let s_next = semantic_similarity(f_next, f_hat_next, mode)?;
    let s_cur = semantic_similarity(f_t, f_hat, mode)?;
    let s_stay = semantic_similarity(f_next, f_t, mode)?;
    Ok(RewardBreakdown::from_similarities(s_next, s_cur, s_stay, w))
}

/// `alpha * (score - beta)`.
pub fn affine_map_reward(score: f64, alpha_map: f64, beta_map: f64) -> f64 {
    alpha_map * (score - beta_map)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn m(rows: &[&[f64]]) -> TokenMatrix {
        TokenMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn similarity_self_and_orthogonal() {
        let a = m(&[&[1.0, 0.2, 0.0], &[0.3, 1.0, 0.0]]);
        let pooled = semantic_similarity(&a, &a, &SimilarityMode::PooledCosine).unwrap();
        assert!((pooled - 1.0).abs() < 1e-12);
        let sk = semantic_similarity(&a, &a, &SimilarityMode::Sinkhorn(SinkhornConfig::default())).unwrap();
        assert!(sk >= 0.99);

        let x = m(&[&[1.0, 0.0]]);
        let y = m(&[&[0.0, 1.0]]);
        let s = semantic_similarity(&x, &y, &SimilarityMode::PooledCosine).unwrap();
        assert!((s - 0.5).abs() < 1e-12);

        let z = TokenMatrix::zeros(2, 2).unwrap();
        for mode in [SimilarityMode::PooledCosine, SimilarityMode::Sinkhorn(SinkhornConfig::default())] {
            assert!(matches!(semantic_similarity(&z, &x, &mode), Err(Error::DegenerateInput(_))));
        }
        assert!(semantic_similarity(&a, &x, &SimilarityMode::PooledCosine).is_err());
    }

    #[test]
    fn simple_reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(simple_reward(1.0, &[0.0, 0.0], &w), 1.0);
        assert!((simple_reward(0.0, &[0.6, 0.8], &w) + 0.1).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s: f64 = rng.random();
            let r: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = RewardWeights { lambda_sem: rng.random_range(0.1..2.0), lambda_res: rng.random_range(0.1..2.0), ..w.clone() };
            let expect = w.lambda_sem * s - w.lambda_res * (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
            assert!((simple_reward(s, &r, &w) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_progress() {
        let w = RewardWeights::default();
        let f_t = m(&[&[1.0, 0.0, 0.1]]);
        let f_next = m(&[&[0.2, 1.0, 0.0]]);
        let b = shaped_reward(&f_t, &f_next, &f_t, &f_next, &w, &SimilarityMode::PooledCosine).unwrap();
        assert!((b.s_next - 1.0).abs() < 1e-12);
        assert_eq!(b.a_t, b.s_next);
        assert!((b.p_t - (b.s_next - b.s_cur)).abs() < 1e-12);
        assert!(b.p_t.abs() < 1e-12);

        // reference start further away: progress clears the tolerance
        let f_hat = m(&[&[0.0, -1.0, 0.3]]);
        let b = shaped_reward(&f_t, &f_next, &f_hat, &f_next, &w, &SimilarityMode::PooledCosine).unwrap();
        assert!((b.s_next - 1.0).abs() < 1e-12);
        assert!((b.p_t - (1.0 - b.s_cur)).abs() < 1e-12);
        assert!(b.p_t >= w.eps_tol);
        assert_eq!(b.n_t, 0.0);
        assert_eq!(b.anti_idle(&w), 0.0);
    }

    #[test]
    fn pure_idle() {
        let w = RewardWeights::default();
        let f = m(&[&[1.0, 0.5], &[0.1, 1.0]]);
        let g = m(&[&[0.7, -0.5], &[0.2, 1.0]]);
        let b = shaped_reward(&f, &f, &g, &g, &w, &SimilarityMode::PooledCosine).unwrap();
        assert_eq!(b.s_next, b.s_cur);
        assert_eq!(b.p_t, 0.0);
        assert!((b.s_stay - 1.0).abs() < 1e-12);
        assert!(b.m_t.abs() < 1e-12);
        assert_eq!(b.n_t, w.eps_tol);
        let expect = w.w_abs * b.s_next - w.w_lazy * b.s_next * w.eps_tol * b.s_stay + w.w_mot * b.m_t - w.lambda_time;
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn progressing_beats_idling() {
        let w = RewardWeights::default();
        for s_next in [0.5, 0.7, 1.0] {
            let prog = RewardBreakdown::from_similarities(s_next, s_next - 0.2, 0.3, &w);
            let idle = RewardBreakdown::from_similarities(s_next, s_next, 1.0, &w);
            assert!(prog.total > idle.total);
        }
    }

    #[test]
    fn total_nondecreasing_in_s_next_when_progressing() {
        let w = RewardWeights::default();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=50 {
            let s_next = 0.3 + i as f64 * 0.014;
            let b = RewardBreakdown::from_similarities(s_next, 0.25, 0.6, &w);
            assert!(b.p_t >= w.eps_tol);
            assert_eq!(b.n_t, 0.0);
            assert!(b.total >= prev);
            prev = b.total;
        }
    }

    #[test]
    fn history_independent() {
        let w = RewardWeights::default();
        let f = m(&[&[1.0, 0.5]]);
        let g = m(&[&[0.5, 1.0]]);
        let first = shaped_reward(&f, &g, &g, &f, &w, &SimilarityMode::PooledCosine).unwrap();
        for _ in 0..10 {
            shaped_reward(&g, &f, &f, &g, &w, &SimilarityMode::PooledCosine).unwrap();
        }
        assert_eq!(shaped_reward(&f, &g, &g, &f, &w, &SimilarityMode::PooledCosine).unwrap(), first);
    }

    #[test]
    fn affine_map_examples() {
        assert_eq!(affine_map_reward(0.37, 1.0, 0.0), 0.37);
        assert!((affine_map_reward(0.9, 2.0, 0.5) - 0.8).abs() < 1e-12);
        assert_eq!(affine_map_reward(0.5, -7.0, 0.5), 0.0);
    }

    #[test]
    fn invalid_weights() {
        let w = RewardWeights { w_lazy: -1.0, ..Default::default() };
        let f = m(&[&[1.0]]);
        assert!(matches!(
            shaped_reward(&f, &f, &f, &f, &w, &SimilarityMode::PooledCosine),
            Err(Error::InvalidConfig(_))
        ));
    }
}
