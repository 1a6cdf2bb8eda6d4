//! Token-level entropic optimal transport similarity.
//!
//! Given token matrices `X (Tx x D)` and `Y (Ty x D)`, rows are l2 normalized,
//! the cosine affinity `S = X Y^T` is formed and a uniform-marginal entropic
//! transport plan `P = diag(u) K diag(v)` with `K = exp(S / eps)` is computed
//! by a fixed number of Sinkhorn-Knopp scaling passes. The similarity is
//! `<P, S>`, mapped to `[0, 1]` by `0.5 * (clip(score, -1, 1) + 1)`.
//!
//! Two numerical routes exist. The kernel route is the textbook update with a
//! `delta` division guard and optional max-recentering of `S`. The log route
//! keeps `log u`/`log v` and uses log-sum-exp, which stays accurate when
//! `eps` is small enough that the kernel underflows. [`Domain::Auto`] picks the
//! log route below [`LOG_DOMAIN_BELOW`], and also when the spread of `S / eps`
//! is wide enough that the smallest kernel entries fall under `delta`.
//!
//! The unbalanced variant relaxes the marginals with KL penalties of weight
//! `tau_r`, `tau_c`; the scaling updates are raised to the powers
//! `tau / (tau + eps)`.

use crate::embedding::{normalize_rows, TokenMatrix};
use crate::error::{Error, Result};

/// `Domain::Auto` switches to log-space updates for `epsilon` below this.
pub const LOG_DOMAIN_BELOW: f64 = 0.01;

/// Largest exponent that `f64::exp` represents finitely.
const EXP_MAX: f64 = 709.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Auto,
    Kernel,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub n_iters: usize,
    pub delta: f64,
    pub recenter: bool,
    pub domain: Domain,
    /// Row-marginal KL weight. `None` with `tau_c = None` means balanced.
    pub tau_r: Option<f64>,
    pub tau_c: Option<f64>,
    /// Optional early exit once the row-marginal violation drops below this.
    pub tolerance: Option<f64>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            n_iters: 50,
            delta: 1e-9,
            recenter: false,
            domain: Domain::Auto,
            tau_r: None,
            tau_c: None,
            tolerance: None,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_iters(mut self, n_iters: usize) -> Self {
        self.n_iters = n_iters;
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_recenter(mut self, recenter: bool) -> Self {
        self.recenter = recenter;
        self
    }

    pub fn unbalanced(mut self, tau_r: f64, tau_c: f64) -> Self {
        self.tau_r = Some(tau_r);
        self.tau_c = Some(tau_c);
        self
    }

    pub fn is_unbalanced(&self) -> bool {
        self.tau_r.is_some() || self.tau_c.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.n_iters == 0 {
            return Err(Error::InvalidConfig("n_iters must be >= 1".into()));
        }
        if !positive(self.delta) {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        for tau in [self.tau_r, self.tau_c].into_iter().flatten() {
            if !positive(tau) {
                return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
            }
        }
        Ok(())
    }

    /// `Auto` also goes to log space when the smallest kernel entry relative
    /// to the largest falls below `delta`, where the guard would bias the plan.
    fn uses_log_domain(&self, s: &Dense) -> bool {
        match self.domain {
            Domain::Auto => {
                let (lo, hi) = s.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                self.epsilon < LOG_DOMAIN_BELOW || (hi - lo) / self.epsilon > -self.delta.ln()
            }
            Domain::Kernel => false,
            Domain::Log => true,
        }
    }

    /// Exponents `tau / (tau + eps)` for the row and column updates.
    fn exponents(&self) -> (f64, f64) {
        let f = |tau: Option<f64>| tau.map_or(1.0, |t| t / (t + self.epsilon));
        (f(self.tau_r), f(self.tau_c))
    }
}

/// Row-major dense matrix used for affinity and plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self, other: &Dense) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Dense,
    pub affinity: Dense,
    pub score_raw: f64,
    pub score01: f64,
    /// Scaling passes actually run (less than `n_iters` only on early exit).
    pub iterations: usize,
}

impl TransportPlan {
    /// `max_i |sum_j P_ij - 1/Tx|`.
    pub fn row_violation(&self) -> f64 {
        let target = 1.0 / self.plan.rows as f64;
        self.plan.row_sums().iter().fold(0.0, |m, s| m.max((s - target).abs()))
    }

    /// `max_j |sum_i P_ij - 1/Ty|`.
    pub fn col_violation(&self) -> f64 {
        let target = 1.0 / self.plan.cols as f64;
        self.plan.col_sums().iter().fold(0.0, |m, s| m.max((s - target).abs()))
    }

    pub fn mass(&self) -> f64 {
        self.plan.total()
    }
}

/// Cosine affinity of row-normalized inputs.
pub fn affinity(x: &TokenMatrix, y: &TokenMatrix) -> Result<Dense> {
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch {
            expected: x.cols(),
            got: y.cols(),
        });
    }
    let xn = normalize_rows(x, crate::EPS)?;
    let yn = normalize_rows(y, crate::EPS)?;
    let mut data = Vec::with_capacity(x.rows() * y.rows());
    for xr in xn.iter_rows() {
        for yr in yn.iter_rows() {
            data.push(crate::embedding::dot(xr, yr));
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite affinity".into()));
    }
    Ok(Dense {
        rows: x.rows(),
        cols: y.rows(),
        data,
    })
}

/// `0.5 * (clip(score, -1, 1) + 1)`.
pub fn score_to_unit(score: f64) -> f64 {
    0.5 * (score.clamp(-1.0, 1.0) + 1.0)
}

/// Entropic OT similarity; balanced unless `cfg` carries `tau_r`/`tau_c`.
pub fn sinkhorn_similarity(
    x: &TokenMatrix,
    y: &TokenMatrix,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let s = affinity(x, y)?;
    solve(s, cfg)
}

/// Unbalanced entry point; refuses configs without both relaxation weights.
pub fn sinkhorn_similarity_unbalanced(
    x: &TokenMatrix,
    y: &TokenMatrix,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    if cfg.tau_r.is_none() || cfg.tau_c.is_none() {
        return Err(Error::InvalidConfig(
            "unbalanced sinkhorn needs both tau_r and tau_c".into(),
        ));
    }
    sinkhorn_similarity(x, y, cfg)
}

/// Solves on a precomputed affinity matrix.
pub fn solve(s: Dense, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    if s.rows == 0 || s.cols == 0 {
        return Err(Error::InvalidInput("empty affinity".into()));
    }
    if s.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite affinity".into()));
    }
    let (plan, iterations) = if cfg.uses_log_domain(&s) {
        solve_log(&s, cfg)
    } else {
        solve_kernel(&s, cfg)?
    };
    let score_raw = plan.frobenius(&s);
    Ok(TransportPlan {
        plan,
        affinity: s,
        score_raw,
        score01: score_to_unit(score_raw),
        iterations,
    })
}

fn row_violation(plan_rows: &[f64], target: f64) -> f64 {
    plan_rows.iter().fold(0.0, |m, s| m.max((s - target).abs()))
}

fn solve_kernel(s: &Dense, cfg: &SinkhornConfig) -> Result<(Dense, usize)> {
    let (tx, ty) = (s.rows, s.cols);
    let eps = cfg.epsilon;
    let max_s = s.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = if cfg.recenter { max_s } else { 0.0 };
    if (max_s - shift) / eps > EXP_MAX {
        return Err(Error::NumericOverflow(format!(
            "exp(S/eps) overflows at eps = {eps}; enable recentering or the log domain"
        )));
    }
    let k: Vec<f64> = s.data.iter().map(|v| ((v - shift) / eps).exp()).collect();
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow(
            "non-finite Gibbs kernel; enable recentering or the log domain".into(),
        ));
    }

    let (fr, fc) = cfg.exponents();
    // In the unbalanced problem a global kernel factor is not absorbed by the
    // scalings, so the recentering shift is folded into the marginals instead.
    let mass_shift = if cfg.is_unbalanced() { (-shift / eps).exp() } else { 1.0 };
    // The row guard is expressed in unshifted units so that recentering only
    // rescales u and leaves the plan itself unchanged.
    let row_delta = if cfg.is_unbalanced() {
        cfg.delta
    } else {
        (cfg.delta * (-shift / eps).exp()).max(f64::MIN_POSITIVE)
    };
    let r = vec![mass_shift / tx as f64; tx];
    let c = vec![mass_shift / ty as f64; ty];
    let mut u = vec![1.0; tx];
    let mut v = vec![1.0; ty];
    let mut kv = vec![0.0; tx];
    let mut ktu = vec![0.0; ty];

    let mut iterations = 0;
    for _ in 0..cfg.n_iters {
        iterations += 1;
        for i in 0..tx {
            let row = &k[i * ty..(i + 1) * ty];
            kv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        for i in 0..tx {
            u[i] = (r[i] / (kv[i] + row_delta)).powf(fr);
        }
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..tx {
            let row = &k[i * ty..(i + 1) * ty];
            for (acc, kij) in ktu.iter_mut().zip(row) {
                *acc += kij * u[i];
            }
        }
        for j in 0..ty {
            v[j] = (c[j] / (ktu[j] + cfg.delta)).powf(fc);
        }
        if let Some(tol) = cfg.tolerance {
            let sums: Vec<f64> = (0..tx)
                .map(|i| {
                    let row = &k[i * ty..(i + 1) * ty];
                    u[i] * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if row_violation(&sums, 1.0 / tx as f64) <= tol {
                break;
            }
        }
    }

    let mut data = Vec::with_capacity(tx * ty);
    for i in 0..tx {
        for j in 0..ty {
            data.push(u[i] * k[i * ty + j] * v[j]);
        }
    }
    Ok((Dense { rows: tx, cols: ty, data }, iterations))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn solve_log(s: &Dense, cfg: &SinkhornConfig) -> (Dense, usize) {
    let (tx, ty) = (s.rows, s.cols);
    let eps = cfg.epsilon;
    let (fr, fc) = cfg.exponents();
    let log_r = -(tx as f64).ln();
    let log_c = -(ty as f64).ln();
    let logk: Vec<f64> = s.data.iter().map(|v| v / eps).collect();
    let mut log_u = vec![0.0; tx];
    let mut log_v = vec![0.0; ty];

    let mut iterations = 0;
    for _ in 0..cfg.n_iters {
        iterations += 1;
        for i in 0..tx {
            let row = &logk[i * ty..(i + 1) * ty];
            let lse = log_sum_exp(row.iter().zip(&log_v).map(|(k, v)| k + v));
            log_u[i] = fr * (log_r - lse);
        }
        for j in 0..ty {
            let lse = log_sum_exp((0..tx).map(|i| logk[i * ty + j] + log_u[i]));
            log_v[j] = fc * (log_c - lse);
        }
        if let Some(tol) = cfg.tolerance {
            let sums: Vec<f64> = (0..tx)
                .map(|i| {
                    let row = &logk[i * ty..(i + 1) * ty];
                    (log_u[i] + log_sum_exp(row.iter().zip(&log_v).map(|(k, v)| k + v))).exp()
                })
                .collect();
            if row_violation(&sums, 1.0 / tx as f64) <= tol {
                break;
            }
        }
    }

    let mut data = Vec::with_capacity(tx * ty);
    for i in 0..tx {
        for j in 0..ty {
            data.push((log_u[i] + logk[i * ty + j] + log_v[j]).exp());
        }
    }
    (Dense { rows: tx, cols: ty, data }, iterations)
}

/// Largest number of tokens [`assignment_oracle`] will enumerate.
pub const ORACLE_MAX_T: usize = 8;

/// Exhaustive linear assignment maximizing `mean_i S[i, pi(i)]`.
///
/// Permutations are visited in lexicographic order and only a strictly better
/// value replaces the incumbent, so ties resolve to the lexicographically
/// smallest permutation.
pub fn assignment_oracle(s: &Dense) -> Result<(Vec<usize>, f64)> {
    if s.rows != s.cols {
        return Err(Error::InvalidInput(format!(
            "assignment oracle needs a square matrix, got {}x{}",
            s.rows, s.cols
        )));
    }
    let t = s.rows;
    if t == 0 {
        return Err(Error::InvalidInput("empty affinity".into()));
    }
    if t > ORACLE_MAX_T {
        return Err(Error::InvalidInput(format!(
            "assignment oracle limited to T <= {ORACLE_MAX_T}, got {t}"
        )));
    }
    let mut perm: Vec<usize> = (0..t).collect();
    let value = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| s.get(i, j)).sum::<f64>() / t as f64;
    let mut best = perm.clone();
    let mut best_value = value(&perm);
    while next_permutation(&mut perm) {
        let v = value(&perm);
        if v > best_value {
            best_value = v;
            best.copy_from_slice(&perm);
        }
    }
    Ok((best, best_value))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
