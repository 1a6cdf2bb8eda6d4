//! Tanh-squashed Gaussian policy over bounded residuals.
//!
//! Log-densities are taken over the normalized residual `y = da / r_max`
//! in `(-1, 1)`.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;

use super::nn::{Activation, Mlp, Trace};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let a = u.abs();
    2.0 * (LN_2 - a - (-2.0 * a).exp().ln_1p())
}

/// Density of `y = tanh(u)`, `u ~ N(mu, exp(log_std)^2)`, summed over components.
pub fn squashed_log_prob(u: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((&u, &m), &ls)| {
            let z = (u - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(u)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorSample {
    /// `r_max * tanh(u)`.
    pub residual: Vec<f64>,
    pub pre_tanh: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    net: Mlp,
    r_max: f64,
}

/// Batch actor objective `mean(alpha * log_pi - Q)` and its parameter gradient.
#[derive(Debug, Clone)]
pub struct ActorObjective {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub mean_log_prob: f64,
}

impl Actor {
    pub fn new(input_dim: usize, hidden: &[usize], residual_dim: usize, r_max: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(r_max > 0.0) {
            return Err(Error::InvalidConfig("r_max must be positive".into()));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * residual_dim);
        Ok(Self { net: Mlp::new(&sizes, Activation::Identity, 0.1, rng)?, r_max })
    }

    pub fn from_net(net: Mlp, r_max: f64) -> Result<Self> {
        if !net.output_dim().is_multiple_of(2) || net.output_activation() != Activation::Identity {
            return Err(Error::Format("actor head must be an even-width linear output".into()));
        }
        Ok(Self { net, r_max })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn residual_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    fn log_std_of(raw: f64) -> f64 {
        LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
    }

    fn head(&self, e: &[f64]) -> Result<(Trace, Vec<f64>, Vec<f64>)> {
        let trace = self.net.trace(e)?;
        let n = self.residual_dim();
        let out = trace.output();
        let mu = out[..n].to_vec();
        let log_std = out[n..].iter().map(|&r| Self::log_std_of(r)).collect();
        Ok((trace, mu, log_std))
    }

    pub fn mean_and_log_std(&self, e: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (_, mu, ls) = self.head(e)?;
        Ok((mu, ls))
    }

    /// Reparameterized draw with explicit standard-normal noise.
    pub fn sample_with_noise(&self, e: &[f64], xi: &[f64]) -> Result<ActorSample> {
        let (_, mu, log_std) = self.head(e)?;
        if xi.len() != mu.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), got: xi.len() });
        }
        let u: Vec<f64> = mu.iter().zip(&log_std).zip(xi).map(|((m, ls), x)| m + ls.exp() * x).collect();
        let log_prob = squashed_log_prob(&u, &mu, &log_std);
        Ok(ActorSample {
            residual: u.iter().map(|v| self.r_max * v.tanh()).collect(),
            pre_tanh: u,
            mu,
            log_std,
            log_prob,
        })
    }

    pub fn sample(&self, e: &[f64], rng: &mut impl Rng) -> Result<ActorSample> {
        let xi = standard_normal(self.residual_dim(), rng);
        self.sample_with_noise(e, &xi)
    }

    /// `r_max * tanh(mu)`.
    pub fn deterministic(&self, e: &[f64]) -> Result<Vec<f64>> {
        let (_, mu, _) = self.head(e)?;
        Ok(mu.iter().map(|m| self.r_max * m.tanh()).collect())
    }

    /// `q(b, residual)` returns the critic value and its gradient in the residual.
    pub fn objective<F>(&self, inputs: &[Vec<f64>], noise: &[Vec<f64>], alpha: f64, mut q: F) -> Result<ActorObjective>
    where
        F: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
    {
        if inputs.is_empty() || inputs.len() != noise.len() {
            return Err(Error::InvalidInput("actor batch must be nonempty with one noise row per input".into()));
        }
        let n = self.residual_dim();
        let inv_b = 1.0 / inputs.len() as f64;
        let half_range = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
        let mut grad = vec![0.0; self.net.num_params()];
        let mut loss = 0.0;
        let mut lp_sum = 0.0;
        for (b, (e, xi)) in inputs.iter().zip(noise).enumerate() {
            let (trace, mu, log_std) = self.head(e)?;
            if xi.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: xi.len() });
            }
            let sigma: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
            let u: Vec<f64> = (0..n).map(|j| mu[j] + sigma[j] * xi[j]).collect();
            let y: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
            let residual: Vec<f64> = y.iter().map(|v| self.r_max * v).collect();
            let log_prob = squashed_log_prob(&u, &mu, &log_std);
            let (qv, dq) = q(b, &residual)?;
            loss += inv_b * (alpha * log_prob - qv);
            lp_sum += log_prob;

            let raw = &trace.output()[n..];
            let mut d_out = vec![0.0; 2 * n];
            for j in 0..n {
                let du = dq[j] * self.r_max * (1.0 - y[j] * y[j]);
                let d_mu = alpha * 2.0 * y[j] - du;
                let d_ls = alpha * (-1.0 + 2.0 * y[j] * sigma[j] * xi[j]) - du * sigma[j] * xi[j];
                let t = raw[j].tanh();
                d_out[j] = inv_b * d_mu;
                d_out[n + j] = inv_b * d_ls * half_range * (1.0 - t * t);
            }
            self.net.backward(&trace, &d_out, &mut grad);
        }
        Ok(ActorObjective { loss, grad, mean_log_prob: lp_sum * inv_b })
    }
}

pub fn standard_normal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn stable_log_jacobian() {
        for u in [-30.0f64, -2.0, -0.1, 0.0, 0.5, 3.0, 40.0] {
            let t = u.tanh();
            let direct = (1.0 - t * t).ln();
            if direct.is_finite() && u.abs() < 10.0 {
                assert!((log_one_minus_tanh_sq(u) - direct).abs() < 1e-10);
            }
            assert!(log_one_minus_tanh_sq(u).is_finite());
        }
    }

    #[test]
    fn residual_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = Actor::new(3, &[8], 2, 0.2, &mut rng).unwrap();
        for _ in 0..500 {
            let e: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s = actor.sample(&e, &mut rng).unwrap();
            assert!(s.residual.iter().all(|r| r.abs() < 0.2));
        }
    }

    #[test]
    fn zero_noise_matches_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = Actor::new(3, &[8], 2, 0.2, &mut rng).unwrap();
        let e = [0.3, -0.2, 0.9];
        let s = actor.sample_with_noise(&e, &[0.0, 0.0]).unwrap();
        assert_eq!(s.residual, actor.deterministic(&e).unwrap());
    }

    #[test]
    fn density_integrates_to_one() {
        let (mu, ls) = (0.4, -0.7);
        let n = 200_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let y: f64 = -1.0 + (i as f64 + 0.5) * h;
                squashed_log_prob(&[y.atanh()], &[mu], &[ls]).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }
}
