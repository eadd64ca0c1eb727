//! Dense feature maps, grid-cell keypoint detection, ZNCC similarity and
//! differentiable soft matching.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::DenseGrid;

/// Dense per-pixel descriptors, scores in `[0,1]` and detection logits.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// `height × width × dim`, row-major, channel-last.
    pub descriptors: Vec<f64>,
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        descriptors: Vec<f64>,
        scores: Vec<f64>,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width;
        if dim < 2 {
            return Err(Error::InvalidConfig(format!("descriptor dimension {dim} < 2")));
        }
        if descriptors.len() != n * dim || scores.len() != n || logits.len() != n {
            return Err(Error::InvalidConfig("feature map buffer sizes disagree".into()));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidConfig("feature map score outside [0,1]".into()));
        }
        if descriptors.iter().chain(&logits).any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("non-finite feature map entry".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            descriptors,
            scores,
            logits,
        })
    }

    #[inline]
    pub fn descriptor(&self, u: usize, v: usize) -> &[f64] {
        let i = v * self.width + u;
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// SLFM layout: `dim` descriptor channels, then score, then logit.
    pub fn to_grid(&self) -> DenseGrid {
        let c = self.dim + 2;
        let mut data = Vec::with_capacity(self.pixel_count() * c);
        for i in 0..self.pixel_count() {
            data.extend(self.descriptors[i * self.dim..(i + 1) * self.dim].iter().map(|&x| x as f32));
            data.push(self.scores[i] as f32);
            data.push(self.logits[i] as f32);
        }
        DenseGrid {
            height: self.height,
            width: self.width,
            channels: c,
            data,
        }
    }

    pub fn from_grid(grid: &DenseGrid) -> Result<Self> {
        if grid.channels < 4 {
            return Err(Error::InvalidConfig(format!(
                "SLFM feature map needs at least 4 channels, got {}",
                grid.channels
            )));
        }
        let dim = grid.channels - 2;
        let n = grid.height * grid.width;
        let mut descriptors = Vec::with_capacity(n * dim);
        let mut scores = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        for px in grid.data.chunks_exact(grid.channels) {
            descriptors.extend(px[..dim].iter().map(|&x| x as f64));
            scores.push(px[dim] as f64);
            logits.push(px[dim + 1] as f64);
        }
        Self::new(grid.height, grid.width, dim, descriptors, scores, logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    /// Sub-pixel `[u_l, v_l]`.
    pub q: [f64; 2],
    pub descriptor: Vec<f64>,
    pub score: f64,
}

/// Bilinear interpolation weights: up to four `(pixel index, weight)` pairs.
pub(crate) fn bilinear_taps(
    width: usize,
    height: usize,
    u: f64,
    v: f64,
) -> Result<[(usize, f64); 4]> {
    let max_u = (width - 1) as f64;
    let max_v = (height - 1) as f64;
    if !(u >= 0.0 && v >= 0.0 && u <= max_u && v <= max_v) {
        return Err(Error::OutOfBounds {
            u,
            v,
            width,
            height,
        });
    }
    let u0 = (u.floor() as usize).min(width.saturating_sub(2));
    let v0 = (v.floor() as usize).min(height.saturating_sub(2));
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    Ok([
        (v0 * width + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * width + u1, fu * (1.0 - fv)),
        (v1 * width + u0, (1.0 - fu) * fv),
        (v1 * width + u1, fu * fv),
    ])
}

/// Descriptor and score at a sub-pixel location.
pub fn bilinear_sample(map: &FeatureMap, q: [f64; 2]) -> Result<(Vec<f64>, f64)> {
    let taps = bilinear_taps(map.width, map.height, q[0], q[1])?;
    let mut desc = vec![0.0; map.dim];
    let mut score = 0.0;
    for (idx, w) in taps {
        if w == 0.0 {
            continue;
        }
        for (o, x) in desc.iter_mut().zip(&map.descriptors[idx * map.dim..(idx + 1) * map.dim]) {
            *o += w * x;
        }
        score += w * map.scores[idx];
    }
    Ok((desc, score.clamp(0.0, 1.0)))
}

/// One keypoint per `cell × cell` block: spatial softmax over the block's
/// detection logits, location is the softmax-weighted pixel centroid.
/// Partial blocks at the right/bottom border only cover in-image pixels.
pub fn detect_keypoints(map: &FeatureMap, cell: usize) -> Vec<Keypoint> {
    assert!(cell > 0, "cell size must be positive");
    let rows = map.height.div_ceil(cell);
    let cols = map.width.div_ceil(cell);
    let mut out = Vec::with_capacity(rows * cols);
    for cy in 0..rows {
        for cx in 0..cols {
            let (v0, v1) = (cy * cell, ((cy + 1) * cell).min(map.height));
            let (u0, u1) = (cx * cell, ((cx + 1) * cell).min(map.width));
            let mut peak = f64::NEG_INFINITY;
            for v in v0..v1 {
                for u in u0..u1 {
                    peak = peak.max(map.logits[v * map.width + u]);
                }
            }
            let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
            for v in v0..v1 {
                for u in u0..u1 {
                    let w = (map.logits[v * map.width + u] - peak).exp();
                    sw += w;
                    su += w * u as f64;
                    sv += w * v as f64;
                }
            }
            let q = [
                (su / sw).clamp(u0 as f64, (u1 - 1) as f64),
                (sv / sw).clamp(v0 as f64, (v1 - 1) as f64),
            ];
            let (descriptor, score) = bilinear_sample(map, q).expect("keypoint inside its cell");
            out.push(Keypoint {
                q,
                descriptor,
                score,
            });
        }
    }
    out
}

/// Centred, unit-norm copy of `d`, or `None` for a constant vector.
pub fn normalize_descriptor(d: &[f64]) -> Option<Vec<f64>> {
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let centred: Vec<f64> = d.iter().map(|x| x - mean).collect();
    let norm = centred.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 * (1.0 + mean.abs()) * (d.len() as f64).sqrt() {
        return None;
    }
    Some(centred.into_iter().map(|x| x / norm).collect())
}

/// Zero-normalized cross correlation in `[-1, 1]`; zero when either input is constant.
pub fn zncc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "descriptor dimensions differ");
    match (normalize_descriptor(a), normalize_descriptor(b)) {
        (Some(na), Some(nb)) => dot(&na, &nb).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-pixel normalized descriptors, precomputed once per target map so a
/// ZNCC is a single dot product. Constant descriptors become zero vectors.
#[derive(Clone, Debug)]
pub struct NormalizedMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub unit: Vec<f64>,
    /// Norm of the centred descriptor (0 for constant descriptors).
    pub norms: Vec<f64>,
}

impl NormalizedMap {
    pub fn new(map: &FeatureMap) -> Self {
        Self::from_descriptors(map.width, map.height, map.dim, &map.descriptors)
    }

    pub fn from_descriptors(width: usize, height: usize, dim: usize, descriptors: &[f64]) -> Self {
        let n = width * height;
        let mut unit = vec![0.0; n * dim];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let d = &descriptors[i * dim..(i + 1) * dim];
            let mean = d.iter().sum::<f64>() / dim as f64;
            let out = &mut unit[i * dim..(i + 1) * dim];
            let mut sq = 0.0;
            for (o, x) in out.iter_mut().zip(d) {
                *o = x - mean;
                sq += *o * *o;
            }
            let norm = sq.sqrt();
            if norm > 1e-12 * (1.0 + mean.abs()) * (dim as f64).sqrt() {
                out.iter_mut().for_each(|x| *x /= norm);
                norms[i] = norm;
            } else {
                out.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Self {
            width,
            height,
            dim,
            unit,
            norms,
        }
    }

    #[inline]
    pub fn unit(&self, i: usize) -> &[f64] {
        &self.unit[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug)]
pub struct SoftMatch {
    /// Expected target coordinate `[u, v]`.
    pub q: [f64; 2],
    /// ZNCC against every searched target pixel (row-major, stride-subsampled).
    pub zncc: Vec<f64>,
    /// Softmax weights, same indexing as `zncc`.
    pub weights: Vec<f64>,
    /// Pixel indices searched, same indexing as `zncc`.
    pub pixels: Vec<usize>,
}

/// `e^x` for a shifted softmax logit `x ≤ 0`, flushed to zero below `e^-50`.
#[inline]
pub(crate) fn softmax_term(x: f64) -> f64 {
    if x < -50.0 {
        0.0
    } else {
        x.exp()
    }
}

/// Pixel indices visited by a soft match with the given coarse stride.
pub(crate) fn search_pixels(width: usize, height: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (0..height)
        .step_by(stride)
        .flat_map(|v| (0..width).step_by(stride).map(move |u| v * width + u))
        .collect()
}

/// Softmax of `τ·zncc` over target pixels; returns the weighted mean coordinate.
pub(crate) fn soft_match_normalized(
    source_unit: Option<&[f64]>,
    target: &NormalizedMap,
    tau: f64,
    pixels: &[usize],
) -> SoftMatch {
    let zncc: Vec<f64> = match source_unit {
        Some(s) => pixels
            .iter()
            .map(|&j| dot(s, target.unit(j)).clamp(-1.0, 1.0))
            .collect(),
        None => vec![0.0; pixels.len()],
    };
    let peak = zncc.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    let mut weights: Vec<f64> = zncc.iter().map(|&z| softmax_term(tau * (z - peak))).collect();
    let total: f64 = weights.iter().sum();
    let (mut u, mut v) = (0.0, 0.0);
    for (w, &j) in weights.iter_mut().zip(pixels) {
        *w /= total;
        u += *w * (j % target.width) as f64;
        v += *w * (j / target.width) as f64;
    }
    SoftMatch {
        q: [u, v],
        zncc,
        weights,
        pixels: pixels.to_vec(),
    }
}

/// Temperature-softmax soft match of one keypoint against every target pixel.
pub fn soft_match(kp: &Keypoint, target: &FeatureMap, tau: f64) -> SoftMatch {
    assert!(tau > 0.0, "temperature must be positive");
    let norm = NormalizedMap::new(target);
    let pixels = search_pixels(target.width, target.height, 1);
    let unit = normalize_descriptor(&kp.descriptor);
    soft_match_normalized(unit.as_deref(), &norm, tau, &pixels)
}

/// Soft matches for many keypoints against one target, optionally on a
/// coarse pixel stride.
pub fn soft_match_all(kps: &[Keypoint], target: &FeatureMap, tau: f64, stride: usize) -> Vec<SoftMatch> {
    assert!(tau > 0.0, "temperature must be positive");
    let norm = NormalizedMap::new(target);
    let pixels = search_pixels(target.width, target.height, stride);
    kps.par_iter()
        .map(|kp| {
            let unit = normalize_descriptor(&kp.descriptor);
            soft_match_normalized(unit.as_deref(), &norm, tau, &pixels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let desc = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let logits = (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMap::new(h, w, d, desc, scores, logits).unwrap()
    }

    fn constant_map(h: usize, w: usize, d: usize, value: f64) -> FeatureMap {
        FeatureMap::new(h, w, d, vec![value; h * w * d], vec![0.5; h * w], vec![0.0; h * w]).unwrap()
    }

    #[test]
    fn uniform_logits_give_cell_centroid() {
        let map = constant_map(48, 64, 4, 1.0);
        let kps = detect_keypoints(&map, 16);
        assert_eq!(kps.len(), 12);
        assert!((kps[0].q[0] - 7.5).abs() < 1e-12 && (kps[0].q[1] - 7.5).abs() < 1e-12);
        assert!((kps[5].q[0] - 23.5).abs() < 1e-12 && (kps[5].q[1] - 23.5).abs() < 1e-12);
    }

    #[test]
    fn logit_spike_pulls_keypoint() {
        let mut map = constant_map(48, 64, 4, 1.0);
        map.logits[20 * 64 + 37] = 50.0;
        let kps = detect_keypoints(&map, 16);
        // Exhaustive oracle: 255 pixels of weight e^-50 against one of weight 1.
        let k = &kps[4 + 2];
        let mut su = 37.0;
        let mut sv = 20.0;
        let mut sw = 1.0;
        for v in 16..32 {
            for u in 32..48 {
                if (u, v) != (37, 20) {
                    let w = (-50.0f64).exp();
                    su += w * u as f64;
                    sv += w * v as f64;
                    sw += w;
                }
            }
        }
        assert!((k.q[0] - su / sw).abs() < 1e-12 && (k.q[1] - sv / sw).abs() < 1e-12);
        assert!((k.q[0] - 37.0).abs() < 0.01 && (k.q[1] - 20.0).abs() < 0.01);
    }

    #[test]
    fn partial_cells_are_masked() {
        let map = random_map(40, 50, 3, 1);
        let kps = detect_keypoints(&map, 16);
        assert_eq!(kps.len(), 3 * 4);
        for (i, k) in kps.iter().enumerate() {
            let (cy, cx) = (i / 4, i % 4);
            assert!(k.q[0] >= (cx * 16) as f64 && k.q[0] <= ((cx * 16 + 15).min(49)) as f64);
            assert!(k.q[1] >= (cy * 16) as f64 && k.q[1] <= ((cy * 16 + 15).min(39)) as f64);
        }
    }

    #[test]
    fn zncc_examples() {
        let d = [0.3, -1.0, 2.0, 0.5, 0.0];
        assert!((zncc(&d, &d) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        assert!((zncc(&d, &neg) + 1.0).abs() < 1e-12);
        let aff: Vec<f64> = d.iter().map(|x| 2.5 * x + 7.0).collect();
        assert!((zncc(&d, &aff) - 1.0).abs() < 1e-9);
        assert_eq!(zncc(&d, &[4.0; 5]), 0.0);
    }

    #[test]
    fn identical_targets_match_to_centroid() {
        let map = constant_map(6, 8, 3, 0.0);
        let mut map2 = map.clone();
        for px in map2.descriptors.chunks_mut(3) {
            px.copy_from_slice(&[1.0, 2.0, 4.0]);
        }
        let kp = Keypoint {
            q: [1.0, 1.0],
            descriptor: vec![0.0, 1.0, 0.5],
            score: 1.0,
        };
        let m = soft_match(&kp, &map2, 10.0);
        assert!((m.q[0] - 3.5).abs() < 1e-12 && (m.q[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn one_hot_similarity_is_found() {
        // zncc = 1 at (5, 3), exactly -1 elsewhere
        let (h, w) = (10, 12);
        let base = [1.0, -1.0, 0.5, -0.5];
        let mut desc = Vec::new();
        for i in 0..h * w {
            let s = if i == 3 * w + 5 { 1.0 } else { -1.0 };
            desc.extend(base.iter().map(|x| s * x));
        }
        let map = FeatureMap::new(h, w, 4, desc, vec![1.0; h * w], vec![0.0; h * w]).unwrap();
        let kp = Keypoint {
            q: [0.0, 0.0],
            descriptor: base.to_vec(),
            score: 1.0,
        };
        let m = soft_match(&kp, &map, 100.0);
        // oracle: one pixel with weight 1, 119 with e^-200
        let eps = (-200.0f64).exp();
        let (mut su, mut sv, mut sw) = (5.0, 3.0, 1.0);
        for i in 0..h * w {
            if i != 3 * w + 5 {
                su += eps * (i % w) as f64;
                sv += eps * (i / w) as f64;
                sw += eps;
            }
        }
        assert!((m.q[0] - su / sw).abs() < 1e-12 && (m.q[1] - sv / sw).abs() < 1e-12);
        assert!((m.q[0] - 5.0).abs() < 0.01 && (m.q[1] - 3.0).abs() < 0.01);
    }

    #[test]
    fn bilinear_examples() {
        let map = random_map(5, 6, 3, 9);
        let (d, s) = bilinear_sample(&map, [2.0, 3.0]).unwrap();
        assert_eq!(d, map.descriptor(2, 3));
        assert_eq!(s, map.scores[3 * 6 + 2]);
        let (d, _) = bilinear_sample(&map, [1.5, 2.5]).unwrap();
        for c in 0..3 {
            let mean = (map.descriptor(1, 2)[c]
                + map.descriptor(2, 2)[c]
                + map.descriptor(1, 3)[c]
                + map.descriptor(2, 3)[c])
                / 4.0;
            assert!((d[c] - mean).abs() < 1e-12);
        }
        let flat = constant_map(5, 6, 3, 0.7);
        let (d, s) = bilinear_sample(&flat, [3.3, 1.9]).unwrap();
        assert!(d.iter().all(|x| (x - 0.7).abs() < 1e-12) && (s - 0.5).abs() < 1e-12);
        assert!(matches!(bilinear_sample(&map, [5.5, 0.0]), Err(Error::OutOfBounds { .. })));
        assert!(bilinear_sample(&map, [5.0, 4.0]).is_ok());
    }

    #[test]
    fn large_temperature_converges_to_argmax() {
        for seed in 0..5 {
            let map = random_map(12, 16, 8, 100 + seed);
            let kp = Keypoint {
                q: [0.0, 0.0],
                descriptor: random_map(1, 1, 8, 200 + seed).descriptors,
                score: 1.0,
            };
            let m = soft_match(&kp, &map, 1e3);
            let best = (0..m.zncc.len())
                .max_by(|&a, &b| m.zncc[a].partial_cmp(&m.zncc[b]).unwrap())
                .unwrap();
            let (bu, bv) = ((best % 16) as f64, (best / 16) as f64);
            let dist = ((m.q[0] - bu).powi(2) + (m.q[1] - bv).powi(2)).sqrt();
            assert!(dist < 0.05, "seed {seed}: {dist}");
        }
    }

    #[test]
    fn slfm_conversion_round_trip() {
        let map = random_map(4, 5, 3, 3);
        let grid = map.to_grid();
        assert_eq!(grid.channels, 5);
        let back = FeatureMap::from_grid(&grid).unwrap();
        assert_eq!(back.to_grid(), grid);
    }

    proptest! {
        #[test]
        fn zncc_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
            let ab = zncc(&a, &b);
            prop_assert!((ab - zncc(&b, &a)).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn soft_match_weights_normalized(seed in 0u64..1000, tau in 0.1f64..50.0) {
            let map = random_map(7, 9, 4, seed);
            let kp = &detect_keypoints(&map, 4)[0];
            let m = soft_match(kp, &map, tau);
            prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(m.q[0] >= 0.0 && m.q[0] <= 8.0 && m.q[1] >= 0.0 && m.q[1] <= 6.0);
        }

        #[test]
        fn soft_match_shift_invariant(seed in 0u64..1000, shift in -3.0f64..3.0) {
            // Adding a constant to every zncc leaves the softmax unchanged.
            let map = random_map(6, 7, 4, seed);
            let kp = &detect_keypoints(&map, 3)[1];
            let norm = NormalizedMap::new(&map);
            let pixels = search_pixels(7, 6, 1);
            let unit = normalize_descriptor(&kp.descriptor).unwrap();
            let base = soft_match_normalized(Some(&unit), &norm, 5.0, &pixels);
            let logits: Vec<f64> = base.zncc.iter().map(|z| 5.0 * (z + shift)).collect();
            let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
            let total: f64 = w.iter().sum();
            let u: f64 = w.iter().zip(&pixels).map(|(w, &j)| w * (j % 7) as f64).sum::<f64>() / total;
            prop_assert!((u - base.q[0]).abs() < 1e-9);
        }
    }
}
