//! Language-conditioned image similarity for reranking retrieved steps.
//!
//! Every score here lives in `[0, 1]`. Embedding vectors (image features `z`,
//! text features `t`, latent action tokens) are supplied by the caller.

use crate::embedding::{cosine, TokenMatrix};
use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-9;

/// Telemetry value used when the gripper opening is unknown.
pub const OPEN_UNKNOWN: f64 = 0.5;

/// `0.5 * (1 + cos(a, b))`.
pub fn affine_cosine01(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(0.5 * (1.0 + cosine(a, b)?))
}

/// Instruction gate: the weaker of the two image-text affinities.
pub fn instruction_gate(z1: &[f64], z2: &[f64], t: &[f64]) -> Result<f64> {
    Ok(affine_cosine01(z1, t)?.min(affine_cosine01(z2, t)?))
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub image_w: f64,
    pub image_h: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, image_w: f64, image_h: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max, image_w, image_h };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.x_min, self.y_min, self.x_max, self.y_max, self.image_w, self.image_h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite box coordinate".into()));
        }
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return Err(Error::InvalidInput("image must have positive area".into()));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::InvalidInput("box corners out of order".into()));
        }
        if self.x_min < 0.0 || self.y_min < 0.0 || self.x_max > self.image_w || self.y_max > self.image_h {
            return Err(Error::InvalidInput("box outside image".into()));
        }
        Ok(())
    }

    fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else if a == b {
        // two identical degenerate boxes
        1.0
    } else {
        0.0
    }
}

/// `[1 - d, iou, c*, open]`, every entry in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationVector(pub [f64; 4]);

impl RelationVector {
    pub fn proximity(&self) -> f64 {
        self.0[0]
    }
    pub fn iou(&self) -> f64 {
        self.0[1]
    }
    pub fn contact(&self) -> f64 {
        self.0[2]
    }
    pub fn open(&self) -> f64 {
        self.0[3]
    }
}

/// Geometric relation between gripper box `bg` and object box `bo`.
///
/// `d` is the center distance over the image diagonal and the contact proxy
/// is `clip(max(iou, 1 - 3d), 0, 1)`.
pub fn relation_features(bg: &BoundingBox, bo: &BoundingBox, open: Option<f64>) -> Result<RelationVector> {
    bg.validate()?;
    bo.validate()?;
    if bg.image_w != bo.image_w || bg.image_h != bo.image_h {
        return Err(Error::InvalidInput("boxes come from different image sizes".into()));
    }
    let diag = bg.image_w.hypot(bg.image_h);
    let (gx, gy) = bg.center();
    let (ox, oy) = bo.center();
    let d = ((gx - ox).hypot(gy - oy) / diag).clamp(0.0, 1.0);
    let overlap = iou(bg, bo).clamp(0.0, 1.0);
    let contact = overlap.max(1.0 - 3.0 * d).clamp(0.0, 1.0);
    let open = open.unwrap_or(OPEN_UNKNOWN).clamp(0.0, 1.0);
    Ok(RelationVector([1.0 - d, overlap, contact, open]))
}

/// `exp(-sum_k (r1k - r2k)^2 / (2 sigma_k^2))`.
pub fn relation_similarity(r1: &RelationVector, r2: &RelationVector, sigmas: &[f64; 4]) -> Result<f64> {
    if sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidConfig("relation sigmas must be positive".into()));
    }
    let q: f64 = r1
        .0
        .iter()
        .zip(&r2.0)
        .zip(sigmas)
        .map(|((a, b), s)| (a - b).powi(2) / (2.0 * s * s))
        .sum();
    Ok((-q).exp())
}

/// Fusion and reranking weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// Appearance weight inside the image score.
    pub alpha_c: f64,
    /// Instruction-gate weight inside the image score.
    pub alpha_t: f64,
    /// Relation weight inside the image score.
    pub alpha_r: f64,
    pub w_e: f64,
    pub w_i: f64,
    pub w_a: f64,
    pub gated_alpha: f64,
    pub gated_beta: f64,
    pub sigmas: [f64; 4],
}

impl Default for FusionWeights {
    fn default() -> Self {
        let third = 1.0 / 3.0;
        Self {
            alpha_c: third,
            alpha_t: third,
            alpha_r: third,
            w_e: third,
            w_i: third,
            w_a: third,
            gated_alpha: 0.5,
            gated_beta: 0.0,
            sigmas: [third; 4],
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        let triples = [
            ("image", [self.alpha_c, self.alpha_t, self.alpha_r]),
            ("fusion", [self.w_e, self.w_i, self.w_a]),
        ];
        for (name, t) in triples {
            if t.iter().any(|w| !(*w >= 0.0)) {
                return Err(Error::InvalidConfig(format!("{name} weights must be nonnegative")));
            }
            let sum: f64 = t.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::InvalidConfig(format!("{name} weights sum to {sum}, not 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.gated_alpha) {
            return Err(Error::InvalidConfig("gated alpha must be in [0, 1]".into()));
        }
        if !(self.gated_beta >= 0.0) {
            return Err(Error::InvalidConfig("gated beta must be nonnegative".into()));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("relation sigmas must be positive".into()));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} score {v} outside [0, 1]")))
    }
}

/// Convex image score. When `s_rel` is `None` the remaining two weights are
/// renormalized.
pub fn image_score(s_clip: f64, s_text: f64, s_rel: Option<f64>, w: &FusionWeights) -> Result<f64> {
    w.validate()?;
    check_unit("appearance", s_clip)?;
    check_unit("text", s_text)?;
    match s_rel {
        Some(rel) => {
            check_unit("relation", rel)?;
            Ok(w.alpha_c * s_clip + w.alpha_t * s_text + w.alpha_r * rel)
        }
        None => {
            let total = w.alpha_c + w.alpha_t;
            if total == 0.0 {
                return Err(Error::InvalidConfig("no weight left once relation cues are absent".into()));
            }
            Ok((w.alpha_c * s_clip + w.alpha_t * s_text) / total)
        }
    }
}

/// `w_e * S_embed + w_i * S_image + w_a * S_act`.
pub fn fuse_additive(s_embed: f64, s_image: f64, s_act: f64, w: &FusionWeights) -> Result<f64> {
    w.validate()?;
    check_unit("embed", s_embed)?;
    check_unit("image", s_image)?;
    check_unit("action", s_act)?;
    Ok(w.w_e * s_embed + w.w_i * s_image + w.w_a * s_act)
}

/// `(alpha + (1 - alpha) * S_image) * S_embed + beta * S_act`.
pub fn fuse_gated(s_embed: f64, s_image: f64, s_act: f64, w: &FusionWeights) -> Result<f64> {
    w.validate()?;
    check_unit("embed", s_embed)?;
    check_unit("image", s_image)?;
    check_unit("action", s_act)?;
    let a = w.gated_alpha;
    Ok((a + (1.0 - a) * s_image) * s_embed + w.gated_beta * s_act)
}

/// Phase similarity of two four-token latent action blocks.
pub fn phase_similarity(a1: &TokenMatrix, a2: &TokenMatrix) -> Result<f64> {
    if a1.rows() != 4 || a2.rows() != 4 || a1.cols() != a2.cols() {
        return Err(Error::InvalidInput(format!(
            "phase similarity expects two 4xD blocks, got {:?} and {:?}",
            a1.shape(),
            a2.shape()
        )));
    }
    affine_cosine01(&a1.mean_row(), &a2.mean_row())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_cosine_examples() {
        assert!((affine_cosine01(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(affine_cosine01(&[1.0, 2.0], &[-1.0, -2.0]).unwrap().abs() < 1e-12);
        assert!((affine_cosine01(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(affine_cosine01(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn gate_examples() {
        let t = [0.0, 1.0];
        assert!((instruction_gate(&t, &t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(instruction_gate(&t, &[0.0, -1.0], &t).unwrap().abs() < 1e-12);
        // cos 0.6 and cos 0.2 against t = e2
        let z1 = [0.8, 0.6];
        let z2 = [(1.0f64 - 0.04).sqrt(), 0.2];
        let g = instruction_gate(&z1, &z2, &t).unwrap();
        assert!((g - 0.6).abs() < 1e-12);
        assert_eq!(g, instruction_gate(&z2, &z1, &t).unwrap());
    }

    #[test]
    fn relation_identical_boxes() {
        let b = BoundingBox::new(10.0, 10.0, 20.0, 30.0, 100.0, 100.0).unwrap();
        let r = relation_features(&b, &b, Some(0.7)).unwrap();
        assert_eq!(r.0, [1.0, 1.0, 1.0, 0.7]);
    }

    #[test]
    fn relation_opposite_corners() {
        // 3x4 image, diagonal 5; degenerate corner boxes at (0,0) and (3,4)
        let a = BoundingBox::new(0.0, 0.0, 0.0, 0.0, 3.0, 4.0).unwrap();
        let b = BoundingBox::new(3.0, 4.0, 3.0, 4.0, 3.0, 4.0).unwrap();
        let r = relation_features(&a, &b, None).unwrap();
        assert!((r.proximity() - 0.0).abs() < 1e-12);
        assert_eq!(r.iou(), 0.0);
        assert_eq!(r.contact(), 0.0);
        assert_eq!(r.open(), OPEN_UNKNOWN);

        // smaller boxes one unit in from each corner: centers (0.5,0.5), (2.5,3.5)
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0, 3.0, 4.0).unwrap();
        let b = BoundingBox::new(2.0, 3.0, 3.0, 4.0, 3.0, 4.0).unwrap();
        let r = relation_features(&a, &b, None).unwrap();
        let d = (2.0f64.powi(2) + 3.0f64.powi(2)).sqrt() / 5.0;
        assert!((r.proximity() - (1.0 - d)).abs() < 1e-12);
        assert_eq!(r.iou(), 0.0);
        assert!((r.contact() - (1.0 - 3.0 * d).clamp(0.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn half_overlap_iou() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0, 4.0, 4.0).unwrap();
        let b = BoundingBox::new(0.5, 0.0, 1.5, 1.0, 4.0, 4.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes() {
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0, 0.0, 4.0).is_err());
        assert!(BoundingBox::new(2.0, 0.0, 1.0, 1.0, 4.0, 4.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 5.0, 1.0, 4.0, 4.0).is_err());
    }

    #[test]
    fn relation_kernel() {
        let s = [1.0 / 3.0; 4];
        let r = RelationVector([0.2, 0.4, 0.6, 0.8]);
        assert_eq!(relation_similarity(&r, &r, &s).unwrap(), 1.0);
        let gap = 0.25;
        let r2 = RelationVector([0.2 + gap, 0.4, 0.6, 0.8]);
        let one = relation_similarity(&r, &r2, &[gap, 1.0, 1.0, 1.0]).unwrap();
        assert!((one - (-0.5f64).exp()).abs() < 1e-12);
        assert!((one - 0.6065).abs() < 1e-4);

        let r3 = RelationVector([0.9, 0.1, 0.0, 0.3]);
        let got = relation_similarity(&r, &r3, &s).unwrap();
        let mut q = 0.0;
        for k in 0..4 {
            q += (r.0[k] - r3.0[k]) * (r.0[k] - r3.0[k]) / (2.0 * s[k] * s[k]);
        }
        assert!((got - (-q).exp()).abs() < 1e-15);
        assert!(relation_similarity(&r, &r3, &[0.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn fusion_examples() {
        let w = FusionWeights { gated_alpha: 0.3, ..FusionWeights::default() };
        assert!((fuse_gated(1.0, 1.0, 0.2, &w).unwrap() - 1.0).abs() < 1e-12);

        let w_embed = FusionWeights { w_e: 1.0, w_i: 0.0, w_a: 0.0, ..Default::default() };
        assert_eq!(fuse_additive(0.42, 0.9, 0.1, &w_embed).unwrap(), 0.42);

        let half = FusionWeights { gated_alpha: 0.5, gated_beta: 0.0, ..Default::default() };
        assert!((fuse_gated(0.8, 0.4, 0.0, &half).unwrap() - 0.56).abs() < 1e-12);

        let bad = FusionWeights { w_e: 0.5, ..Default::default() };
        assert!(matches!(fuse_additive(0.5, 0.5, 0.5, &bad), Err(Error::InvalidConfig(_))));
        assert!(fuse_additive(1.5, 0.5, 0.5, &FusionWeights::default()).is_err());
    }

    #[test]
    fn gated_lower_bound_and_range() {
        let beta = 0.1;
        for a in [0.0, 0.25, 0.5, 1.0] {
            let w = FusionWeights { gated_alpha: a, gated_beta: beta, ..Default::default() };
            for img in [0.0, 0.3, 1.0] {
                for act in [0.0, 1.0] {
                    let v = fuse_gated(1.0, img, act, &w).unwrap();
                    assert!(v >= a - 1e-12 && v <= 1.0 + beta + 1e-12);
                }
            }
        }
    }

    #[test]
    fn image_score_renormalizes_without_relation() {
        let w = FusionWeights { alpha_c: 0.5, alpha_t: 0.25, alpha_r: 0.25, ..Default::default() };
        let s = image_score(0.8, 0.4, None, &w).unwrap();
        assert!((s - (0.5 * 0.8 + 0.25 * 0.4) / 0.75).abs() < 1e-12);
        let s = image_score(0.8, 0.4, Some(1.0), &w).unwrap();
        assert!((s - (0.4 + 0.1 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn phase_examples() {
        let a = TokenMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.5, 0.2]]).unwrap();
        assert!((phase_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = TokenMatrix::new(4, 2, a.as_slice().iter().map(|v| -v).collect()).unwrap();
        assert!(phase_similarity(&a, &neg).unwrap().abs() < 1e-12);
        let b = TokenMatrix::from_rows(&[vec![0.3, -0.1], vec![0.2, 0.9], vec![-0.4, 0.5], vec![0.0, 0.1]]).unwrap();
        let (ma, mb) = (a.mean_row(), b.mean_row());
        let c = (ma[0] * mb[0] + ma[1] * mb[1]) / (ma[0].hypot(ma[1]) * mb[0].hypot(mb[1]));
        assert!((phase_similarity(&a, &b).unwrap() - 0.5 * (1.0 + c)).abs() < 1e-12);
        let three = TokenMatrix::zeros(3, 2).unwrap();
        assert!(phase_similarity(&a, &three).is_err());
    }
}
