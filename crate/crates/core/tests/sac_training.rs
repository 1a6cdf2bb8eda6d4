use efn_core::sac::{squashed_log_prob, standard_normal, Actor, Adam, Mlp, ReplayTransition, SacConfig, SacState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, raw: usize, dim: usize) -> Vec<ReplayTransition> {
    (0..n)
        .map(|_| ReplayTransition {
            context: (0..raw).map(|_| rng.random_range(-1.0..1.0)).collect(),
            next_context: (0..raw).map(|_| rng.random_range(-1.0..1.0)).collect(),
            residual: (0..dim).map(|_| rng.random_range(-0.2..0.2)).collect(),
            base_action: (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect(),
            next_base_action: (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect(),
            reward: rng.random_range(-1.0..1.0),
            done: rng.random_bool(0.2),
        })
        .collect()
}

/// Central differences of `loss` over every entry of `params(state)`.
fn check<F, P>(state: &SacState, analytic: &[f64], mut params: P, loss: F, what: &str)
where
    P: FnMut(&mut SacState) -> &mut [f64],
    F: Fn(&SacState) -> f64,
{
    let mut s = state.clone();
    let n = params(&mut s).len();
    assert_eq!(n, analytic.len());
    for i in 0..n {
        let orig = params(&mut s)[i];
        params(&mut s)[i] = orig + H;
        let up = loss(&s);
        params(&mut s)[i] = orig - H;
        let down = loss(&s);
        params(&mut s)[i] = orig;
        let fd = (up - down) / (2.0 * H);
        assert!(rel_err(fd, analytic[i]) < REL_TOL, "{what}[{i}]: fd {fd:e} vs analytic {:e}", analytic[i]);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for config in 0..10 {
        let dim = 1 + config % 3;
        let raw = 3 + (config % 4);
        let cfg = SacConfig {
            residual_dim: dim,
            hidden_dims: vec![2 + config % 3, 2],
            encoder_dim: 2 + config % 2,
            seed: config as u64,
            init_alpha: rng.random_range(0.05..0.5),
            action_scale: rng.random_range(0.05..1.0),
            ..SacConfig::for_residual_dim(dim)
        };
        let state = SacState::new(cfg, raw).unwrap();
        let batch = random_batch(&mut rng, 4, raw, dim);
        let targets: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let g = state.critic_grads(&batch, &targets).unwrap();
        let critic_loss = |s: &SacState| s.critic_grads(&batch, &targets).unwrap().loss;
        check(&state, &g.critic1, |s| s.critic1.params_mut(), critic_loss, "critic1");
        check(&state, &g.critic2, |s| s.critic2.params_mut(), critic_loss, "critic2");
        check(&state, &g.encoder, |s| s.encoder.params_mut(), critic_loss, "encoder");

        let noise: Vec<Vec<f64>> = (0..4).map(|_| standard_normal(dim, &mut rng)).collect();
        let a = state.actor_objective(&batch, &noise).unwrap();
        let actor_loss = |s: &SacState| s.actor_objective(&batch, &noise).unwrap().loss;
        check(&state, &a.grad, |s| s.actor.net_mut().params_mut(), actor_loss, "actor");

        let ga = state.alpha_grad(a.mean_log_prob);
        let alpha_loss = |s: &SacState| -s.alpha() * (a.mean_log_prob + s.cfg.target_entropy);
        let mut up = state.clone();
        up.log_alpha += H;
        let mut down = state.clone();
        down.log_alpha -= H;
        let fd = (alpha_loss(&up) - alpha_loss(&down)) / (2.0 * H);
        assert!(rel_err(fd, ga) < REL_TOL);
    }
}

#[test]
fn actor_uses_smaller_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = SacConfig { hidden_dims: vec![4], encoder_dim: 3, ..SacConfig::default() };
    let mut s = SacState::new(cfg, 5).unwrap();
    s.critic2 = s.critic1.clone();
    s.critic2.bias_mut(1)[0] -= 3.0;
    let batch = random_batch(&mut rng, 3, 5, 2);
    let noise: Vec<Vec<f64>> = (0..3).map(|_| standard_normal(2, &mut rng)).collect();
    let obj = s.actor_objective(&batch, &noise).unwrap();

    let mut expect = 0.0;
    for (t, xi) in batch.iter().zip(&noise) {
        let c = s.encode(&t.context).unwrap().0;
        let a = s.actor.sample_with_noise(&c, xi).unwrap();
        let (q1, q2) = s.q_values(&c, &t.base_action, &a.residual).unwrap();
        assert!(q2 < q1);
        expect += (s.alpha() * a.log_prob - q2) / 3.0;
    }
    assert!((obj.loss - expect).abs() < 1e-12);
}

/// Standalone actor/temperature loop on a one-step problem with a fixed
/// concave critic `Q = -c * y^2`.
fn entropy_toy(seed: u64, steps: usize) -> (f64, f64) {
    let target = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actor0 = Actor::new(1, &[], 1, 1.0, &mut rng).unwrap();
    let mut actor = actor0;
    let mut opt = Adam::new(actor.net().num_params(), 3e-4);
    let mut log_alpha = 0.1f64.ln();
    let mut opt_alpha = Adam::new(1, 1e-3);
    let c = 1.0;
    let input = vec![vec![1.0]; 256];
    for _ in 0..steps {
        let noise: Vec<Vec<f64>> = (0..256).map(|_| standard_normal(1, &mut rng)).collect();
        let alpha = log_alpha.exp();
        let obj = actor
            .objective(&input, &noise, alpha, |_, y| Ok((-c * y[0] * y[0], vec![-2.0 * c * y[0]])))
            .unwrap();
        opt.step(actor.net_mut().params_mut(), &obj.grad);
        let g = -alpha * (obj.mean_log_prob + target);
        let mut la = [log_alpha];
        opt_alpha.step(&mut la, &[g]);
        log_alpha = la[0];
    }
    let (mu, ls) = actor.mean_and_log_std(&[1.0]).unwrap();
    (squashed_entropy(mu[0], ls[0]), log_alpha.exp())
}

/// Differential entropy of `tanh(N(mu, sigma^2))` by midpoint quadrature in `u`.
fn squashed_entropy(mu: f64, log_std: f64) -> f64 {
    let sigma = log_std.exp();
    let n = 20_000;
    let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let du = (hi - lo) / n as f64;
    let mut h = 0.0;
    for i in 0..n {
        let u = lo + (i as f64 + 0.5) * du;
        let lp = squashed_log_prob(&[u], &[mu], &[log_std]);
        let z = (u - mu) / sigma;
        let pu = (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        h -= pu * lp * du;
    }
    h
}

#[test]
fn temperature_tuning_reaches_target_entropy() {
    for seed in 0..3 {
        let (h, alpha) = entropy_toy(seed, 5000);
        println!("seed {seed}: entropy {h:.4}, alpha {alpha:.4}");
        assert!((h - 0.25).abs() <= 0.025, "seed {seed}: entropy {h} alpha {alpha}");
    }
}

#[test]
fn repeated_updates_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = SacConfig { hidden_dims: vec![16, 16], encoder_dim: 8, ..SacConfig::default() };
    let mut s = SacState::new(cfg, 10).unwrap();
    let batch = random_batch(&mut rng, 32, 10, 2);
    for _ in 0..100 {
        let stats = s.update(&batch).unwrap();
        assert!(stats.critic_loss.is_finite() && stats.actor_loss.is_finite());
        assert!(stats.alpha > 0.0);
    }
}

#[test]
fn mlp_checksum_is_stable_under_clone() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Mlp::new(&[3, 4, 1], efn_core::sac::Activation::Identity, 1.0, &mut rng).unwrap();
    assert_eq!(m.checksum(), m.clone().checksum());
}

