//! Token features, pooled keys and compact key storage.
//!
//! A [`TokenMatrix`] is a `T x D` block of token features. Pooling turns it
//! into a unit-norm [`Key`] by per-token l2 normalization followed by an equal
//! weight fusion of the token-axis mean and componentwise max. Keys are then
//! pushed through a fixed Gaussian random projection and stored as symmetric
//! int8 codes with one scale per vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Additive guard used by the quantizer scale.
pub const QUANT_DELTA: f64 = 1e-12;

/// Tolerance for the unit-norm invariant of [`Key`].
pub const UNIT_TOL: f64 = 1e-6;

/// Row-major `T x D` matrix of finite token features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "token matrix must be nonempty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at flat index {i}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy with every entry rounded to the nearest `f32`.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    /// Token-axis mean.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.rows as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `v / (||v|| + eps)`.
pub fn normalize_guarded(v: &[f64], eps: f64) -> Vec<f64> {
    let n = norm(v) + eps;
    v.iter().map(|x| x / n).collect()
}

/// l2-normalize every row. Zero rows stay zero.
pub fn normalize_rows(m: &TokenMatrix, eps: f64) -> Result<TokenMatrix> {
    check_eps(eps)?;
    let data = m
        .iter_rows()
        .flat_map(|row| normalize_guarded(row, eps))
        .collect();
    TokenMatrix::new(m.rows, m.cols, data)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("eps must be positive, got {eps}")))
    }
}

/// A unit-norm descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Key(Vec<f64>);

impl Key {
    /// Normalizes `v` with an eps guard. Fails on zero or non-finite input.
    pub fn normalized(v: Vec<f64>, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        if v.is_empty() {
            return Err(Error::InvalidInput("empty key".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite key component".into()));
        }
        let out = normalize_guarded(&v, eps);
        if (norm(&out) - 1.0).abs() > UNIT_TOL {
            return Err(Error::DegenerateInput("key has (near) zero norm"));
        }
        Ok(Self(out))
    }

    /// Wraps a vector that is already unit norm within [`UNIT_TOL`].
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) || (norm(&v) - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidInput("vector is not unit norm".into()));
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Rounds every component to `f32`; the norm moves by at most ~1e-7.
    pub fn to_f32_precision(&self) -> Self {
        let v: Vec<f64> = self.0.iter().map(|&x| x as f32 as f64).collect();
        Self(v)
    }
}

/// Mean-max pooled key of a token matrix.
///
/// Max pooling runs componentwise over the *normalized* rows.
pub fn mean_max_key(m: &TokenMatrix, eps: f64) -> Result<Key> {
    let normed = normalize_rows(m, eps)?;
    if normed.as_slice().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateInput("all-zero token matrix"));
    }
    let mean = normed.mean_row();
    let mut max = vec![f64::NEG_INFINITY; m.cols];
    for row in normed.iter_rows() {
        for (mx, v) in max.iter_mut().zip(row) {
            *mx = mx.max(*v);
        }
    }
    let mean = normalize_guarded(&mean, eps);
    let max = normalize_guarded(&max, eps);
    let fused: Vec<f64> = mean.iter().zip(&max).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    Key::normalized(fused, eps)
}

/// Gaussian `D x d` projection with entries `N(0, 1) / sqrt(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    seed: u64,
    data: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn gaussian(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidInput("projection dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (output_dim as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            rows: input_dim,
            cols: output_dim,
            seed,
            data,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            rows: dim,
            cols: dim,
            seed: 0,
            data,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.rows
    }

    pub fn output_dim(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `u = k P / (||k P|| + eps)`.
pub fn project(k: &Key, p: &ProjectionMatrix, eps: f64) -> Result<Key> {
    if k.dim() != p.rows {
        return Err(Error::DimensionMismatch {
            expected: p.rows,
            got: k.dim(),
        });
    }
    let mut out = vec![0.0; p.cols];
    for (i, &ki) in k.as_slice().iter().enumerate() {
        let row = &p.data[i * p.cols..(i + 1) * p.cols];
        for (o, w) in out.iter_mut().zip(row) {
            *o += ki * w;
        }
    }
    Key::normalized(out, eps)
}

/// Per-vector symmetric int8 code: `u ~ s * q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedKey {
    q: Vec<i8>,
    s: f32,
}

impl QuantizedKey {
    /// Rebuilds a code from stored parts.
    pub fn from_parts(q: Vec<i8>, s: f32) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Format(format!("quantizer scale must be positive, got {s}")));
        }
        if q.contains(&i8::MIN) {
            return Err(Error::Format("quantized component -128 out of range".into()));
        }
        Ok(Self { q, s })
    }

    pub fn codes(&self) -> &[i8] {
        &self.q
    }

    pub fn scale(&self) -> f32 {
        self.s
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Little-endian `[u32 d][i8 x d][f32 s]`.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.q.len() as u32).to_le_bytes());
        out.extend(self.q.iter().map(|&v| v as u8));
        out.extend_from_slice(&self.s.to_le_bytes());
    }

    pub fn encoded_len(&self) -> usize {
        4 + self.q.len() + 4
    }
}

/// `s = max|u_j| / 127 + delta`, `q_j = round(u_j / s)` with ties away from zero.
///
/// The scale is rounded to `f32` before coding so the stored code reproduces
/// exactly after persistence.
pub fn quantize(u: &[f64]) -> QuantizedKey {
    let max_abs = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let s = (max_abs / 127.0 + QUANT_DELTA) as f32;
    let s64 = s as f64;
    let q = u
        .iter()
        .map(|&v| (v / s64).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedKey { q, s }
}

/// `s * q`, without renormalization.
pub fn dequantize(qk: &QuantizedKey) -> Vec<f64> {
    let s = qk.s as f64;
    qk.q.iter().map(|&v| s * v as f64).collect()
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pooling plus projection, shared by everything that builds or queries keys.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySpace {
    projection: ProjectionMatrix,
    eps: f64,
}

impl KeySpace {
    pub fn new(projection: ProjectionMatrix, eps: f64) -> Self {
        Self { projection, eps }
    }

    pub fn gaussian(channels: usize, key_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(
            ProjectionMatrix::gaussian(channels, key_dim, seed)?,
            crate::EPS,
        ))
    }

    pub fn key_dim(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn channels(&self) -> usize {
        self.projection.input_dim()
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.projection
    }

    /// Pooled, projected key.
    pub fn key(&self, m: &TokenMatrix) -> Result<Key> {
        project(&mean_max_key(m, self.eps)?, &self.projection, self.eps)
    }

    pub fn quantized_key(&self, m: &TokenMatrix) -> Result<QuantizedKey> {
        Ok(quantize(self.key(m)?.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TokenMatrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        TokenMatrix::new(rows, cols, data).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn normalize_rows_examples() {
        let m = TokenMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = normalize_rows(&m, 1e-12).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-12);

        let z = TokenMatrix::zeros(1, 2).unwrap();
        assert_eq!(normalize_rows(&z, 1e-12).unwrap().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_rows_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 4, 3);
        let n = normalize_rows(&m, 1e-12).unwrap();
        for r in 0..4 {
            let mut ss = 0.0;
            for c in 0..3 {
                ss += n.row(r)[c] * n.row(r)[c];
            }
            assert!((ss.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_rows_rejects_bad_eps() {
        let m = TokenMatrix::zeros(1, 2).unwrap();
        assert!(normalize_rows(&m, 0.0).is_err());
    }

    #[test]
    fn token_matrix_rejects_non_finite() {
        assert!(matches!(
            TokenMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(TokenMatrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn mean_max_key_identical_rows() {
        let e = vec![0.0, 1.0, 0.0];
        let m = TokenMatrix::from_rows(&[e.clone(), e.clone(), e.clone()]).unwrap();
        let k = mean_max_key(&m, 1e-12).unwrap();
        for (a, b) in k.as_slice().iter().zip(&e) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_max_key_single_row_is_normalized_row() {
        let m = TokenMatrix::from_rows(&[vec![1.0, -2.0, 2.0]]).unwrap();
        let k = mean_max_key(&m, 1e-12).unwrap();
        let expected = [1.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0];
        for (a, b) in k.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_max_key_matches_stepwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 8, 16);
        let eps = 1e-12;
        // independent recomputation
        let mut rows = Vec::new();
        for r in 0..8 {
            let mut n = 0.0;
            for c in 0..16 {
                n += m.row(r)[c].powi(2);
            }
            let n = n.sqrt() + eps;
            rows.push((0..16).map(|c| m.row(r)[c] / n).collect::<Vec<_>>());
        }
        let mut mean = [0.0; 16];
        let mut max = [f64::MIN; 16];
        for row in &rows {
            for c in 0..16 {
                mean[c] += row[c] / 8.0;
                if row[c] > max[c] {
                    max[c] = row[c];
                }
            }
        }
        let nm = mean.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
        let nx = max.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
        let fused: Vec<f64> = (0..16).map(|c| 0.5 * mean[c] / nm + 0.5 * max[c] / nx).collect();
        let nf = fused.iter().map(|x| x * x).sum::<f64>().sqrt() + eps;
        let k = mean_max_key(&m, eps).unwrap();
        for c in 0..16 {
            assert!((k.as_slice()[c] - fused[c] / nf).abs() < 1e-9);
        }
        assert!((norm(k.as_slice()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mean_max_key_rejects_zero_matrix() {
        let z = TokenMatrix::zeros(3, 4).unwrap();
        assert!(matches!(mean_max_key(&z, 1e-12), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn project_identity_and_determinism() {
        let k = Key::normalized(vec![1.0, 2.0, 3.0], 1e-12).unwrap();
        let out = project(&k, &ProjectionMatrix::identity(3), 1e-12).unwrap();
        for (a, b) in out.as_slice().iter().zip(k.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        let p1 = ProjectionMatrix::gaussian(3, 2, 42).unwrap();
        let p2 = ProjectionMatrix::gaussian(3, 2, 42).unwrap();
        assert_eq!(p1, p2);
        let a = project(&k, &p1, 1e-12).unwrap();
        let b = project(&k, &p2, 1e-12).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(project(&k, &ProjectionMatrix::identity(4), 1e-12).is_err());
    }

    #[test]
    fn projection_preserves_cosines_monte_carlo() {
        let (big, small) = (4096, 256);
        let p = ProjectionMatrix::gaussian(big, small, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut total = 0.0;
        for _ in 0..100 {
            let a = Key::from_unit(random_unit(&mut rng, big)).unwrap();
            // correlated partner so cosines span a useful range
            let noise = random_unit(&mut rng, big);
            let mix: f64 = rng.random_range(0.0..1.0);
            let b: Vec<f64> = a
                .as_slice()
                .iter()
                .zip(&noise)
                .map(|(x, n)| mix * x + (1.0 - mix) * n)
                .collect();
            let b = Key::normalized(b, 1e-12).unwrap();
            let before = cosine(a.as_slice(), b.as_slice()).unwrap();
            let pa = project(&a, &p, 1e-12).unwrap();
            let pb = project(&b, &p, 1e-12).unwrap();
            let after = cosine(pa.as_slice(), pb.as_slice()).unwrap();
            assert!((norm(pa.as_slice()) - 1.0).abs() < 1e-6);
            total += (after - before).abs();
        }
        let mean = total / 100.0;
        assert!(mean < 0.15, "mean cosine distortion {mean}");
    }

    #[test]
    fn quantize_examples() {
        let z = quantize(&[0.0; 4]);
        assert!(z.codes().iter().all(|&q| q == 0));
        assert_eq!(z.scale(), QUANT_DELTA as f32);

        let qk = quantize(&[0.127, -0.05, 0.0]);
        assert!((qk.scale() as f64 - 0.001).abs() < 1e-9);
        assert_eq!(qk.codes()[0], 127);
        assert_eq!(qk.codes()[1], -50);
    }

    #[test]
    fn quantize_fidelity_random_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let u = random_unit(&mut rng, 256);
            let qk = quantize(&u);
            let back = dequantize(&qk);
            let s = qk.scale() as f64;
            for (a, b) in u.iter().zip(&back) {
                assert!((a - b).abs() <= s / 2.0);
            }
            assert!(cosine(&u, &back).unwrap() >= 0.999);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 2.0, 3.0], &[-1.0, 0.0, 5.0]).unwrap();
        assert!((c - 14.0 / (14f64.sqrt() * 26f64.sqrt())).abs() < 1e-12);
        assert!((c - 0.7338).abs() < 1e-4);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn quantized_key_layout() {
        let qk = quantize(&[0.5, -0.25]);
        let mut buf = Vec::new();
        qk.write_to(&mut buf);
        assert_eq!(buf.len(), qk.encoded_len());
        assert_eq!(&buf[0..4], &2u32.to_le_bytes());
        assert_eq!(buf[4] as i8, 127);
        assert_eq!(&buf[6..10], &qk.scale().to_le_bytes());
    }
}
