//! Relative pose from two dense feature maps: soft matching, stereo
//! back-projection, RANSAC and weighted SVD alignment.

use nalgebra::{Matrix3, Vector3, SVD};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{bilinear_sample, detect_keypoints, soft_match_all, zncc, FeatureMap};
use crate::geometry::{StereoCamera, Transform};
use crate::stereo::DisparityMap;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedPair {
    /// Source keypoint `[u, v]`.
    pub q_s: [f64; 2],
    /// Soft-matched target coordinate.
    pub q_t: [f64; 2],
    pub p_s: Vector3<f64>,
    pub p_t: Vector3<f64>,
    pub d_s: Vec<f64>,
    pub d_t: Vec<f64>,
    pub s_s: f64,
    pub s_t: f64,
    pub w: f64,
    pub inlier: bool,
}

impl MatchedPair {
    /// A pair carrying only geometry, unit weight.
    pub fn from_points(p_s: Vector3<f64>, p_t: Vector3<f64>) -> Self {
        Self {
            q_s: [0.0; 2],
            q_t: [0.0; 2],
            p_s,
            p_t,
            d_s: Vec::new(),
            d_t: Vec::new(),
            s_s: 1.0,
            s_t: 1.0,
            w: 1.0,
            inlier: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoseEstimate {
    /// `T_ts`: maps source camera coordinates into the target camera.
    pub transform: Transform,
    pub inlier_count: usize,
    pub loss: f64,
    /// Squared residual of every pair under `transform` (m²).
    pub residuals: Vec<f64>,
    pub pairs: Vec<MatchedPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseParams {
    /// Keypoint cell size in pixels.
    pub cell: usize,
    /// Soft-match temperature.
    pub tau: f64,
    pub ransac_iters: usize,
    /// RANSAC inlier threshold on the squared residual (m²).
    pub inlier_sq: f64,
    /// Pairs with disparity at or below this (px) are discarded.
    pub d_min: f64,
    /// Soft-match pixel stride; 1 searches every pixel.
    pub stride: usize,
    pub seed: u64,
}

impl Default for PoseParams {
    fn default() -> Self {
        Self {
            cell: 16,
            tau: 50.0,
            ransac_iters: 500,
            inlier_sq: 0.01,
            d_min: 0.5,
            stride: 1,
            seed: 42,
        }
    }
}

impl PoseParams {
    pub fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("cell and stride must be positive".into()));
        }
        if !(self.tau > 0.0) || !(self.inlier_sq > 0.0) || self.d_min < 0.0 {
            return Err(Error::InvalidConfig(
                "tau and inlier_sq must be positive, d_min non-negative".into(),
            ));
        }
        if self.ransac_iters == 0 {
            return Err(Error::InvalidConfig("ransac_iters must be positive".into()));
        }
        Ok(())
    }
}

/// `½(zncc + 1)·s_s·ŝ_t`.
pub fn match_weight(d_s: &[f64], d_t: &[f64], s_s: f64, s_t: f64) -> f64 {
    0.5 * (zncc(d_s, d_t) + 1.0) * s_s * s_t
}

/// Closed-form minimizer of `Σ wᵢ‖C·pᵢ + r − p̂ᵢ‖²` over SE(3).
pub fn align_points(src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: &[f64]) -> Result<Transform> {
    assert!(src.len() == dst.len() && src.len() == weights.len());
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!("{} point pairs, need 3", src.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::DegenerateGeometry("negative or non-finite weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateGeometry("zero total weight".into()));
    }
    let mu_s = src.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
    let mu_t = dst.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for ((ps, pt), w) in src.iter().zip(dst).zip(weights) {
        let a = ps - mu_s;
        cross += *w * (pt - mu_t) * a.transpose();
        scatter += *w * a * a.transpose();
    }
    let spread = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateGeometry("source points are coincident or collinear".into()));
    }
    // cross = Σ w (t)(s)ᵀ = U Σ Vᵀ → R = U·diag(1,1,det(UVᵀ))·Vᵀ
    let svd = SVD::new(cross, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = (u * vt).determinant().signum();
    let rotation = u * fix * vt;
    let translation = mu_t - rotation * mu_s;
    Ok(Transform::new(rotation, translation))
}

/// Weighted alignment of the given pairs using their `w`.
pub fn weighted_alignment(pairs: &[MatchedPair]) -> Result<Transform> {
    let src: Vec<_> = pairs.iter().map(|p| p.p_s).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.p_t).collect();
    let w: Vec<_> = pairs.iter().map(|p| p.w).collect();
    align_points(&src, &dst, &w)
}

fn sq_residual(t: &Transform, p: &MatchedPair) -> f64 {
    (t.apply(&p.p_s) - p.p_t).norm_squared()
}

/// Weighted point-to-point cost of a transform.
pub fn alignment_cost(t: &Transform, pairs: &[MatchedPair]) -> f64 {
    pairs.iter().map(|p| p.w * sq_residual(t, p)).sum()
}

/// Minimal-sample consensus with uniform-weight fits. The best hypothesis
/// (largest set, then lowest summed inlier residual) is refined by refitting
/// on its inliers until the set stops changing.
pub fn ransac(pairs: &[MatchedPair], iterations: usize, inlier_sq_threshold: f64, seed: u64) -> Result<Vec<bool>> {
    if pairs.len() < 3 {
        return Err(Error::NoConsensus(0));
    }
    let src: Vec<_> = pairs.iter().map(|p| p.p_s).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.p_t).collect();
    let score = |t: &Transform| -> (Vec<bool>, usize, f64) {
        let mut flags = vec![false; pairs.len()];
        let (mut count, mut total) = (0, 0.0);
        for (k, p) in pairs.iter().enumerate() {
            let r = sq_residual(t, p);
            if r < inlier_sq_threshold {
                flags[k] = true;
                count += 1;
                total += r;
            }
        }
        (flags, count, total)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<bool>, usize, f64)> = None;
    let better = |cand: &(Vec<bool>, usize, f64), best: &Option<(Vec<bool>, usize, f64)>| match best {
        None => true,
        Some(b) => cand.1 > b.1 || (cand.1 == b.1 && cand.2 < b.2),
    };
    for _ in 0..iterations {
        let idx = index::sample(&mut rng, pairs.len(), 3);
        let s: Vec<_> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<_> = idx.iter().map(|i| dst[i]).collect();
        let Ok(t) = align_points(&s, &d, &[1.0; 3]) else {
            continue;
        };
        let cand = score(&t);
        if better(&cand, &best) {
            best = Some(cand);
        }
    }
    let Some(mut best) = best else {
        return Err(Error::NoConsensus(0));
    };
    if best.1 < 3 {
        return Err(Error::NoConsensus(best.1));
    }
    for _ in 0..20 {
        let (s, d): (Vec<_>, Vec<_>) = best
            .0
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(k, _)| (src[k], dst[k]))
            .unzip();
        let Ok(t) = align_points(&s, &d, &vec![1.0; s.len()]) else {
            break;
        };
        let cand = score(&t);
        if cand.0 == best.0 {
            break;
        }
        if cand.1 < 3 || cand.1 < best.1 {
            break;
        }
        best = cand;
    }
    Ok(best.0)
}

/// `Σ ‖T̂·p_s − p̂_t‖²` over inlier pairs.
pub fn keypoint_loss(t: &Transform, pairs: &[MatchedPair]) -> f64 {
    pairs.iter().filter(|p| p.inlier).map(|p| sq_residual(t, p)).sum()
}

/// Full E-step pose estimate between a source and a target frame.
pub fn estimate_pose(
    src: &FeatureMap,
    src_disp: &DisparityMap,
    tgt: &FeatureMap,
    tgt_disp: &DisparityMap,
    cam: &StereoCamera,
    params: &PoseParams,
) -> Result<PoseEstimate> {
    params.validate()?;
    let kps = detect_keypoints(src, params.cell);
    let matches = soft_match_all(&kps, tgt, params.tau, params.stride);
    let mut pairs = Vec::with_capacity(kps.len());
    for (kp, m) in kps.iter().zip(&matches) {
        let ds = src_disp.sample(kp.q[0], kp.q[1])?;
        let dt = tgt_disp.sample(m.q[0], m.q[1])?;
        if ds <= params.d_min || dt <= params.d_min {
            continue;
        }
        let p_s = cam.backproject(&Vector3::new(kp.q[0], kp.q[1], ds))?;
        let p_t = cam.backproject(&Vector3::new(m.q[0], m.q[1], dt))?;
        let (d_t, s_t) = bilinear_sample(tgt, m.q)?;
        let w = match_weight(&kp.descriptor, &d_t, kp.score, s_t);
        pairs.push(MatchedPair {
            q_s: kp.q,
            q_t: m.q,
            p_s,
            p_t,
            d_s: kp.descriptor.clone(),
            d_t,
            s_s: kp.score,
            s_t,
            w,
            inlier: false,
        });
    }
    if pairs.len() < 3 {
        return Err(Error::TooFewValidDepths(pairs.len()));
    }
    let flags = ransac(&pairs, params.ransac_iters, params.inlier_sq, params.seed)?;
    for (p, f) in pairs.iter_mut().zip(&flags) {
        p.inlier = *f;
    }
    let inliers: Vec<MatchedPair> = pairs.iter().filter(|p| p.inlier).cloned().collect();
    let transform = weighted_alignment(&inliers)?;
    let residuals = pairs.iter().map(|p| sq_residual(&transform, p)).collect();
    let loss = keypoint_loss(&transform, &pairs);
    Ok(PoseEstimate {
        transform,
        inlier_count: inliers.len(),
        loss,
        residuals,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..8.0)))
            .collect()
    }

    #[test]
    fn match_weight_examples() {
        let d = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        assert!((match_weight(&d, &d, 1.0, 1.0) - 1.0).abs() < 1e-12);
        assert!(match_weight(&d, &neg, 0.9, 0.7).abs() < 1e-12);
        // orthogonal centred vectors: zncc = 0
        let a = [1.0, -1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, -1.0];
        assert!((match_weight(&a, &b, 0.5, 0.8) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn identical_clouds_give_identity() {
        let pts = random_points(10, 1);
        let w: Vec<f64> = (0..10).map(|i| 0.1 + i as f64).collect();
        let t = align_points(&pts, &pts, &w).unwrap();
        assert!((t.to_matrix() - nalgebra::Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn recovers_square_transform() {
        let truth = Transform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::new(1.0, 0.0, 0.0));
        let src = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let t = align_points(&src, &dst, &[1.0; 4]).unwrap();
        let (rot, trans) = truth.error_to(&t);
        assert!(rot < 1e-9 && trans < 1e-9);
        let cost: f64 = src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
        assert!(cost < 1e-20);
    }

    #[test]
    fn degenerate_inputs() {
        let p = random_points(2, 3);
        assert!(matches!(align_points(&p, &p, &[1.0; 2]), Err(Error::DegenerateGeometry(_))));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(matches!(align_points(&line, &line, &[1.0; 5]), Err(Error::DegenerateGeometry(_))));
        let pts = random_points(5, 4);
        assert!(matches!(align_points(&pts, &pts, &[0.0; 5]), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn reflection_is_never_returned() {
        // mirrored target cloud: best proper rotation, not the reflection
        let src = random_points(8, 5);
        let dst: Vec<_> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let t = align_points(&src, &dst, &[1.0; 8]).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn keypoint_loss_examples() {
        let t = Transform::from_rotation_vector(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.3, 0.0, -0.1));
        let pts = random_points(6, 6);
        let exact: Vec<_> = pts.iter().map(|p| MatchedPair::from_points(*p, t.apply(p))).collect();
        assert!(keypoint_loss(&t, &exact) < 1e-24);
        let one = vec![MatchedPair::from_points(Vector3::new(1.0, 2.0, 3.0), Vector3::new(1.1, 2.0, 3.0))];
        assert!((keypoint_loss(&Transform::identity(), &one) - 0.01).abs() < 1e-12);
    }

    fn noisy_pairs(seed: u64, n: usize, outlier_frac: f64) -> (Transform, Vec<MatchedPair>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = Transform::from_rotation_vector(
            Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2), rng.random_range(-1.0..1.0)),
        );
        let n_out = (n as f64 * outlier_frac).round() as usize;
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        for (k, p) in random_points(n, seed + 1000).into_iter().enumerate() {
            if k < n_out {
                let q = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..8.0));
                pairs.push(MatchedPair::from_points(p, q));
                labels.push(false);
            } else {
                let noise = Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
                pairs.push(MatchedPair::from_points(p, truth.apply(&p) + noise));
                labels.push(true);
            }
        }
        (truth, pairs, labels)
    }

    #[test]
    fn ransac_consistent_data_all_inliers() {
        let (_, pairs, _) = noisy_pairs(1, 20, 0.0);
        let flags = ransac(&pairs, 50, 0.01, 1).unwrap();
        assert!(flags.iter().all(|&f| f));
    }

    #[test]
    fn ransac_rejects_outliers_and_is_deterministic() {
        let (_, pairs, labels) = noisy_pairs(2, 50, 0.3);
        let flags = ransac(&pairs, 500, 0.01, 9).unwrap();
        assert_eq!(flags, ransac(&pairs, 500, 0.01, 9).unwrap());
        let tp = flags.iter().zip(&labels).filter(|(f, l)| **f && **l).count() as f64;
        let recall = tp / labels.iter().filter(|l| **l).count() as f64;
        let precision = tp / flags.iter().filter(|f| **f).count() as f64;
        assert!(recall >= 0.95 && precision >= 0.95, "{recall} {precision}");
    }

    #[test]
    fn ransac_needs_consensus() {
        let pts = random_points(12, 8);
        let pairs: Vec<_> = pts.iter().map(|p| MatchedPair::from_points(*p, Vector3::new(0.0, 0.0, 5.0))).collect();
        assert!(matches!(ransac(&pairs, 200, 0.01, 1), Err(Error::NoConsensus(_))));
        assert!(matches!(ransac(&pairs[..2], 200, 0.01, 1), Err(Error::NoConsensus(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weight_scale_invariance(seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let (_, mut pairs, _) = noisy_pairs(seed, 12, 0.2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in &mut pairs {
                p.w = rng.random_range(0.05..1.0);
            }
            let a = weighted_alignment(&pairs).unwrap();
            for p in &mut pairs {
                p.w *= scale;
            }
            let b = weighted_alignment(&pairs).unwrap();
            prop_assert!((a.to_matrix() - b.to_matrix()).abs().max() < 1e-12);
        }

        #[test]
        fn alignment_is_locally_optimal(seed in 0u64..10_000) {
            let (_, mut pairs, _) = noisy_pairs(seed, 15, 0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            for p in &mut pairs {
                p.w = rng.random_range(0.05..1.0);
            }
            let t = weighted_alignment(&pairs).unwrap();
            let base = alignment_cost(&t, &pairs);
            prop_assert!(base <= alignment_cost(&Transform::identity(), &pairs));
            for _ in 0..10 {
                let delta = Transform::from_rotation_vector(
                    Vector3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)),
                    Vector3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)),
                );
                prop_assert!(base <= alignment_cost(&t.compose(&delta), &pairs) + 1e-12);
            }
        }

        #[test]
        fn ransac_inlier_set_is_self_consistent(seed in 0u64..10_000) {
            let (_, pairs, _) = noisy_pairs(seed, 40, 0.3);
            let flags = ransac(&pairs, 300, 0.01, seed).unwrap();
            let inl: Vec<_> = pairs.iter().zip(&flags).filter(|(_, f)| **f).map(|(p, _)| MatchedPair { w: 1.0, ..p.clone() }).collect();
            let t = weighted_alignment(&inl).unwrap();
            for p in &inl {
                prop_assert!(sq_residual(&t, p) < 0.01);
            }
        }
    }
}
