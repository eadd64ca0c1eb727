//! Expectation-maximisation training of a prototype-bank descriptor model.
//!
//! Every pixel is assigned, independently of the parameters, to a sparse
//! mixture of prototypes from a normalised 7×7 grid of smoothed intensities
//! around it. The model
//! parameters are the prototype descriptors and per-prototype score logits.
//! The E-step estimates a pose with the current model; the M-step lowers the
//! keypoint loss of that pair with the estimate and inlier set frozen.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc::SampledPair;
use crate::error::{Error, Result};
use crate::features::{bilinear_taps, dot, search_pixels, softmax_term, FeatureMap, NormalizedMap};
use crate::geometry::{StereoCamera, Transform};
use crate::imageio::GrayImage;
use crate::pose::{estimate_pose, PoseEstimate, PoseParams};
use crate::simworld::{Dataset, Frame, GroundTruth};
use crate::stereo::{stereo_disparity, DisparityMap};

const PATCH_RADIUS: usize = 3;
/// Pixel spacing of the patch grid, so the grid spans 19×19 pixels of the smoothed image.
const PATCH_STEP: i64 = 3;
const PATCH_SIDE: usize = 2 * PATCH_RADIUS + 1;
const PATCH_LEN: usize = PATCH_SIDE * PATCH_SIDE;
/// Anchors kept per pixel.
const TOP: usize = 8;
/// Softmax sharpness over anchor cosine similarities.
const SHARPNESS: f64 = 8.0;
/// Patch standard deviation (grey levels) at which half the weight leaves the background prototype.
const CONTRAST_REF: f64 = 1.0;
const ANCHOR_SEED: u64 = 0x5EED_A11C_0DE5_0001;
/// Detection logit of the strongest blob response in a frame.
const DETECT_GAIN: f64 = 12.0;
const MAX_HALVINGS: usize = 5;

const MODEL_MAGIC: &[u8; 4] = b"SLDM";
const MODEL_VERSION: u16 = 1;

/// Fixed bank of smooth, zero-mean, unit-norm 7×7 patterns.
fn anchor_bank(count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(ANCHOR_SEED);
    let mut out = Vec::with_capacity(count * PATCH_LEN);
    for _ in 0..count {
        let raw: Vec<f64> = (0..(PATCH_SIDE + 2).pow(2))
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let side = PATCH_SIDE + 2;
        let mut a = [0.0; PATCH_LEN];
        for y in 0..PATCH_SIDE {
            for x in 0..PATCH_SIDE {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += raw[(y + dy) * side + x + dx];
                    }
                }
                a[y * PATCH_SIDE + x] = s;
            }
        }
        let mean = a.iter().sum::<f64>() / PATCH_LEN as f64;
        a.iter_mut().for_each(|x| *x -= mean);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(a.iter().map(|x| x / norm));
    }
    out
}

fn gaussian_blur(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let clampi = |x: i64, n: usize| x.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            tmp[v * w + u] = (-r..=r)
                .zip(&kernel)
                .map(|(d, k)| k * img[v * w + clampi(u as i64 + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            out[v * w + u] = (-r..=r)
                .zip(&kernel)
                .map(|(d, k)| k * tmp[clampi(v as i64 + d, h) * w + u])
                .sum();
        }
    }
    out
}

/// Absolute difference-of-Gaussians blob response, scaled so the strongest pixel has logit `DETECT_GAIN`.
fn detection_logits(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let a = gaussian_blur(img, w, h, 1.0);
    let b = gaussian_blur(img, w, h, 2.0);
    let r: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
    let peak = r.iter().fold(0.0f64, |m, &x| m.max(x));
    if peak <= 0.0 {
        return vec![0.0; w * h];
    }
    r.iter().map(|x| DETECT_GAIN * x / peak).collect()
}

/// Parameter-independent prototype mixture of every pixel. Slot 0 is always
/// prototype 0 (the flat-region prototype); the remaining slots hold the
/// best-matching anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub width: usize,
    pub height: usize,
    pub slots: usize,
    index: Vec<u16>,
    weight: Vec<f32>,
    pub logits: Vec<f64>,
}

impl Assignment {
    /// `(prototype, weight)` pairs of pixel `i`.
    pub fn mixture(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = i * self.slots..(i + 1) * self.slots;
        self.index[r.clone()]
            .iter()
            .zip(&self.weight[r])
            .map(|(&k, &w)| (k as usize, w as f64))
    }
}

/// Assigns each pixel of `img` to a mixture over `k` prototypes.
pub fn assign(img: &GrayImage, k: usize) -> Assignment {
    assert!((1..=u16::MAX as usize).contains(&k), "prototype count out of range");
    let (w, h) = (img.width, img.height);
    let px = img.to_f64();
    let smooth = gaussian_blur(&px, w, h, 1.0);
    let anchors = anchor_bank(k - 1);
    let top = TOP.min(k - 1);
    let slots = 1 + top;
    let mut index = vec![0u16; w * h * slots];
    let mut weight = vec![0f32; w * h * slots];
    index
        .par_chunks_mut(w * slots)
        .zip(weight.par_chunks_mut(w * slots))
        .enumerate()
        .for_each(|(v, (idx_row, w_row))| {
            let mut patch = [0.0; PATCH_LEN];
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(top + 1);
            for u in 0..w {
                for dy in 0..PATCH_SIDE {
                    let y = (v as i64 + PATCH_STEP * (dy as i64 - PATCH_RADIUS as i64)).clamp(0, h as i64 - 1) as usize;
                    for dx in 0..PATCH_SIDE {
                        let x = (u as i64 + PATCH_STEP * (dx as i64 - PATCH_RADIUS as i64)).clamp(0, w as i64 - 1) as usize;
                        patch[dy * PATCH_SIDE + dx] = smooth[y * w + x];
                    }
                }
                let mean = patch.iter().sum::<f64>() / PATCH_LEN as f64;
                patch.iter_mut().for_each(|x| *x -= mean);
                let norm = patch.iter().map(|x| x * x).sum::<f64>().sqrt();
                let std = norm / PATCH_SIDE as f64;
                let gamma = if top == 0 || norm < 1e-9 { 0.0 } else { std * std / (std * std + CONTRAST_REF * CONTRAST_REF) };
                let idx = &mut idx_row[u * slots..(u + 1) * slots];
                let wt = &mut w_row[u * slots..(u + 1) * slots];
                idx[0] = 0;
                wt[0] = (1.0 - gamma) as f32;
                if gamma == 0.0 {
                    for s in 1..slots {
                        idx[s] = s as u16;
                        wt[s] = 0.0;
                    }
                    continue;
                }
                best.clear();
                for (j, a) in anchors.chunks_exact(PATCH_LEN).enumerate() {
                    let sim = dot(a, &patch) / norm;
                    if best.len() < top || sim > best[top - 1].0 {
                        let pos = best.iter().position(|&(s, _)| sim > s).unwrap_or(best.len());
                        best.insert(pos, (sim, j));
                        best.truncate(top);
                    }
                }
                let peak = best[0].0;
                let e: Vec<f64> = best.iter().map(|&(s, _)| (SHARPNESS * (s - peak)).exp()).collect();
                let total: f64 = e.iter().sum();
                for (s, (&(_, j), ej)) in best.iter().zip(&e).enumerate() {
                    idx[s + 1] = (j + 1) as u16;
                    wt[s + 1] = (gamma * ej / total) as f32;
                }
            }
        });
    Assignment {
        width: w,
        height: h,
        slots,
        index,
        weight,
        logits: detection_logits(&px, w, h),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `K` prototype descriptors of dimension `D` plus `K` score logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorModel {
    pub k: usize,
    pub dim: usize,
    /// `K × D`, row-major.
    pub prototypes: Vec<f64>,
    pub score_logits: Vec<f64>,
}

impl DescriptorModel {
    /// Prototypes `n_k + bias·μ` with independent `n_k` and a shared `μ`, all standard normal;
    /// score logits zero. A larger `bias` makes all descriptors more alike.
    pub fn new(k: usize, dim: usize, bias: f64, seed: u64) -> Result<Self> {
        if !(1..=u16::MAX as usize).contains(&k) {
            return Err(Error::InvalidConfig(format!("prototype count {k} out of range")));
        }
        if dim < 2 {
            return Err(Error::InvalidConfig(format!("descriptor dimension {dim} < 2")));
        }
        if !(bias.is_finite() && bias >= 0.0) {
            return Err(Error::InvalidConfig(format!("init bias {bias} must be finite and >= 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let mean: Vec<f64> = (0..dim).map(|_| normal()).collect();
        let mut prototypes = Vec::with_capacity(k * dim);
        for _ in 0..k {
            for m in &mean {
                prototypes.push(bias * m + normal());
            }
        }
        Ok(Self {
            k,
            dim,
            prototypes,
            score_logits: vec![0.0; k],
        })
    }

    pub fn param_count(&self) -> usize {
        self.k * (self.dim + 1)
    }

    /// Prototypes followed by score logits.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.prototypes.clone();
        out.extend_from_slice(&self.score_logits);
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.param_count());
        let split = self.k * self.dim;
        self.prototypes.copy_from_slice(&theta[..split]);
        self.score_logits.copy_from_slice(&theta[split..]);
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.prototypes.iter().chain(&self.score_logits).all(|x| x.is_finite())
    }

    fn pixel_descriptor(&self, a: &Assignment, i: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (k, w) in a.mixture(i) {
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.prototype(k)) {
                *o += w * p;
            }
        }
    }

    /// Dense feature map for a precomputed assignment.
    pub fn render(&self, a: &Assignment) -> FeatureMap {
        let n = a.width * a.height;
        let mut descriptors = vec![0.0; n * self.dim];
        descriptors
            .par_chunks_mut(self.dim)
            .enumerate()
            .for_each(|(i, d)| self.pixel_descriptor(a, i, d));
        let scores = (0..n)
            .map(|i| sigmoid(a.mixture(i).map(|(k, w)| w * self.score_logits[k]).sum()))
            .collect();
        FeatureMap::new(a.height, a.width, self.dim, descriptors, scores, a.logits.clone())
            .expect("finite model renders a valid feature map")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 4 * self.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in self.prototypes.iter().chain(&self.score_logits) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 14 || &bytes[..4] != MODEL_MAGIC {
            return Err("missing SLDM header".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MODEL_VERSION {
            return Err(format!("unsupported model version {version}"));
        }
        let k = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        if k == 0 || k > u16::MAX as usize || dim < 2 {
            return Err(format!("bad model shape K={k} D={dim}"));
        }
        let count = k * (dim + 1);
        if bytes.len() != 14 + 4 * count {
            return Err(format!("expected {} bytes, found {}", 14 + 4 * count, bytes.len()));
        }
        let values: Vec<f64> = bytes[14..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err("non-finite model parameter".into());
        }
        Ok(Self {
            k,
            dim,
            prototypes: values[..k * dim].to_vec(),
            score_logits: values[k * dim..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::corrupt(path, e))
    }

    /// Copy with parameters rounded to the `f32` precision of the model file.
    pub fn quantized(&self) -> Self {
        let mut m = self.clone();
        m.prototypes.iter_mut().chain(m.score_logits.iter_mut()).for_each(|x| *x = *x as f32 as f64);
        m
    }
}

/// Dense feature map of the left image of `frame`.
pub fn forward(model: &DescriptorModel, frame: &Frame) -> FeatureMap {
    model.render(&assign(&frame.left, model.k))
}

/// Everything about one frame the training loop reuses across epochs.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub assignment: Assignment,
    pub disparity: DisparityMap,
}

/// Uses the stored disparity channel, or block matching when there is none.
pub fn frame_disparity(frame: &Frame) -> DisparityMap {
    match &frame.disparity {
        Some(d) => d.clone(),
        None => stereo_disparity(&frame.left, &frame.right, 48, 3, 0.8),
    }
}

pub fn prepare_frame(frame: &Frame, k: usize) -> PreparedFrame {
    PreparedFrame {
        assignment: assign(&frame.left, k),
        disparity: frame_disparity(frame),
    }
}

/// Prepared frames keyed by `(experience, frame)`.
#[derive(Clone, Debug, Default)]
pub struct FrameCache {
    frames: BTreeMap<(u32, usize), PreparedFrame>,
}

impl FrameCache {
    pub fn build(dataset: &Dataset, pairs: &[SampledPair], k: usize) -> Result<Self> {
        let mut keys: Vec<(u32, usize)> = pairs
            .iter()
            .flat_map(|p| [(p.exp_a, p.frame_a), (p.exp_b, p.frame_b)])
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let frames = keys
            .par_iter()
            .map(|&(e, n)| {
                let frame = dataset
                    .experience(e)
                    .and_then(|x| x.frames.get(n))
                    .ok_or_else(|| Error::InvalidConfig(format!("pair references missing frame {n} of experience {e}")))?;
                Ok(((e, n), prepare_frame(frame, k)))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { frames })
    }

    pub fn get(&self, key: (u32, usize)) -> Option<&PreparedFrame> {
        self.frames.get(&key)
    }

    fn pair(&self, p: &SampledPair) -> (&PreparedFrame, &PreparedFrame) {
        (&self.frames[&(p.exp_a, p.frame_a)], &self.frames[&(p.exp_b, p.frame_b)])
    }
}

/// E-step outputs held constant during the M-step: the estimated transform
/// and the source keypoints of the RANSAC inliers.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    pub transform: Transform,
    pub q_s: Vec<[f64; 2]>,
    pub p_s: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct EStep {
    pub estimate: PoseEstimate,
    pub frozen: Frozen,
}

pub fn e_step(
    model: &DescriptorModel,
    src: &PreparedFrame,
    tgt: &PreparedFrame,
    cam: &StereoCamera,
    params: &PoseParams,
) -> Result<EStep> {
    let src_map = model.render(&src.assignment);
    let tgt_map = model.render(&tgt.assignment);
    let estimate = estimate_pose(&src_map, &src.disparity, &tgt_map, &tgt.disparity, cam, params)?;
    let inliers = estimate.pairs.iter().filter(|p| p.inlier);
    let frozen = Frozen {
        transform: estimate.transform,
        q_s: inliers.clone().map(|p| p.q_s).collect(),
        p_s: inliers.map(|p| p.p_s).collect(),
    };
    Ok(EStep { estimate, frozen })
}

/// The fixed inputs of the M-step objective for one pair.
#[derive(Clone, Copy, Debug)]
pub struct PairContext<'a> {
    pub src: &'a PreparedFrame,
    pub tgt: &'a PreparedFrame,
    pub cam: &'a StereoCamera,
    pub tau: f64,
    pub stride: usize,
    pub d_min: f64,
}

impl<'a> PairContext<'a> {
    pub fn new(src: &'a PreparedFrame, tgt: &'a PreparedFrame, cam: &'a StereoCamera, params: &PoseParams) -> Self {
        Self {
            src,
            tgt,
            cam,
            tau: params.tau,
            stride: params.stride,
            d_min: params.d_min,
        }
    }
}

/// Accumulates `scale · g` into the prototype gradients of pixel `i`'s mixture.
fn scatter(grad: &mut [f64], a: &Assignment, i: usize, scale: f64, g: &[f64]) {
    let dim = g.len();
    for (k, w) in a.mixture(i) {
        let c = scale * w;
        if c == 0.0 {
            continue;
        }
        for (o, x) in grad[k * dim..(k + 1) * dim].iter_mut().zip(g) {
            *o += c * x;
        }
    }
}

/// Gradient through `u = (v − mean v)/‖v − mean v‖` given `∂L/∂u`.
fn normalization_backprop(unit: &[f64], norm: f64, g_unit: &[f64]) -> Vec<f64> {
    let n = g_unit.len() as f64;
    let mean = g_unit.iter().sum::<f64>() / n;
    let proj = dot(unit, g_unit);
    g_unit
        .iter()
        .zip(unit)
        .map(|(g, u)| (g - mean - proj * u) / norm)
        .collect()
}

/// Keypoint loss with `T̂` and the inlier set frozen, optionally with its gradient
/// with respect to [`DescriptorModel::params`]. Infinite when a soft match lands
/// where the target has no valid depth.
fn frozen_objective(model: &DescriptorModel, ctx: &PairContext, frozen: &Frozen, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let dim = model.dim;
    let (sa, ta) = (&ctx.src.assignment, &ctx.tgt.assignment);
    let pixels = search_pixels(ta.width, ta.height, ctx.stride);
    let mut raw = vec![0.0; pixels.len() * dim];
    for (d, &j) in raw.chunks_exact_mut(dim).zip(&pixels) {
        model.pixel_descriptor(ta, j, d);
    }
    let target = NormalizedMap::from_descriptors(pixels.len(), 1, dim, &raw);
    let coords: Vec<[f64; 2]> = pixels
        .iter()
        .map(|&j| [(j % ta.width) as f64, (j / ta.width) as f64])
        .collect();

    let mut grad = want_grad.then(|| vec![0.0; model.param_count()]);
    let mut g_target = if want_grad { vec![0.0; pixels.len() * dim] } else { Vec::new() };
    let mut loss = 0.0;
    let mut tap_desc = vec![0.0; dim];
    for (q_s, p_s) in frozen.q_s.iter().zip(&frozen.p_s) {
        let taps = match bilinear_taps(sa.width, sa.height, q_s[0], q_s[1]) {
            Ok(t) => t,
            Err(_) => return (f64::INFINITY, None),
        };
        let mut v_s = vec![0.0; dim];
        for &(i, t) in &taps {
            if t == 0.0 {
                continue;
            }
            model.pixel_descriptor(sa, i, &mut tap_desc);
            v_s.iter_mut().zip(&tap_desc).for_each(|(o, x)| *o += t * x);
        }
        let src_n = NormalizedMap::from_descriptors(1, 1, dim, &v_s);
        let unit_s = (src_n.norms[0] > 0.0).then(|| src_n.unit(0));

        let logits: Vec<f64> = match unit_s {
            Some(u) => (0..pixels.len()).map(|j| ctx.tau * dot(u, target.unit(j))).collect(),
            None => vec![0.0; pixels.len()],
        };
        let peak = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut pi: Vec<f64> = logits.iter().map(|l| softmax_term(l - peak)).collect();
        let total: f64 = pi.iter().sum();
        let mut q = [0.0; 2];
        for (p, c) in pi.iter_mut().zip(&coords) {
            *p /= total;
            q[0] += *p * c[0];
            q[1] += *p * c[1];
        }

        let (d, d_grad) = match ctx.tgt.disparity.sample_with_gradient(q[0], q[1]) {
            Ok(x) => x,
            Err(_) => return (f64::INFINITY, None),
        };
        if !(d > ctx.d_min) {
            return (f64::INFINITY, None);
        }
        let y = Vector3::new(q[0], q[1], d);
        let p_t = match ctx.cam.backproject(&y) {
            Ok(p) => p,
            Err(_) => return (f64::INFINITY, None),
        };
        let r = frozen.transform.apply(p_s) - p_t;
        loss += r.norm_squared();

        let (Some(grad), Some(u_s)) = (grad.as_mut(), unit_s) else {
            continue;
        };
        let g_p = -2.0 * r;
        let g_y = ctx.cam.backproject_jacobian(&y).transpose() * g_p;
        let g_q = [g_y.x + g_y.z * d_grad[0], g_y.y + g_y.z * d_grad[1]];
        let mut g_us = vec![0.0; dim];
        for (j, (p, c)) in pi.iter().zip(&coords).enumerate() {
            if *p == 0.0 {
                continue;
            }
            let g_l = p * ((c[0] - q[0]) * g_q[0] + (c[1] - q[1]) * g_q[1]);
            let g = ctx.tau * g_l;
            let u_j = target.unit(j);
            for m in 0..dim {
                g_us[m] += g * u_j[m];
                g_target[j * dim + m] += g * u_s[m];
            }
        }
        let g_vs = normalization_backprop(u_s, src_n.norms[0], &g_us);
        for &(i, t) in &taps {
            if t != 0.0 {
                scatter(grad, sa, i, t, &g_vs);
            }
        }
    }

    if let Some(grad) = grad.as_mut() {
        for (j, &pix) in pixels.iter().enumerate() {
            let g = &g_target[j * dim..(j + 1) * dim];
            if target.norms[j] == 0.0 || g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let g_v = normalization_backprop(target.unit(j), target.norms[j], g);
            scatter(grad, ta, pix, 1.0, &g_v);
        }
    }
    (loss, grad)
}

/// Keypoint loss of the frozen pair under `model`.
pub fn frozen_loss(model: &DescriptorModel, ctx: &PairContext, frozen: &Frozen) -> f64 {
    frozen_objective(model, ctx, frozen, false).0
}

/// Loss and analytic gradient with respect to [`DescriptorModel::params`].
pub fn frozen_loss_gradient(model: &DescriptorModel, ctx: &PairContext, frozen: &Frozen) -> Result<(f64, Vec<f64>)> {
    match frozen_objective(model, ctx, frozen, true) {
        (loss, Some(g)) if loss.is_finite() && g.iter().all(|x| x.is_finite()) => Ok((loss, g)),
        _ => Err(Error::NonFiniteGradient),
    }
}

/// Central differences of `loss` at `theta`, one coordinate at a time.
pub fn finite_diff_grad(loss: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + h;
            let up = loss(&x);
            x[i] = theta[i] - h;
            let down = loss(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MStepOutcome {
    pub loss_before: f64,
    pub loss_after: f64,
    pub accepted: usize,
}

/// Gradient descent on the frozen keypoint loss. Each step moves by
/// `lr·g/rms(g)`; a step that does not lower the loss is retried with half
/// the rate, up to five times, after which the M-step stops.
pub fn m_step(model: &mut DescriptorModel, ctx: &PairContext, frozen: &Frozen, lr: f64, steps: usize) -> Result<MStepOutcome> {
    let before = frozen_loss(model, ctx, frozen);
    let mut loss = before;
    let mut accepted = 0;
    for _ in 0..steps {
        let (l, g) = frozen_loss_gradient(model, ctx, frozen)?;
        let rms = (g.iter().map(|x| x * x).sum::<f64>() / g.len() as f64).sqrt();
        if rms == 0.0 {
            break;
        }
        let theta = model.params();
        let mut rate = lr;
        let mut next = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - rate * gi / rms).collect();
            let mut trial = model.clone();
            trial.set_params(&cand);
            let lc = frozen_loss(&trial, ctx, frozen);
            if lc < l {
                next = Some((trial, lc));
                break;
            }
            rate /= 2.0;
        }
        match next {
            Some((m, lc)) => {
                *model = m;
                loss = lc;
                accepted += 1;
            }
            None => break,
        }
    }
    Ok(MStepOutcome {
        loss_before: before,
        loss_after: loss,
        accepted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of prototypes `K`.
    pub prototypes: usize,
    /// Descriptor dimension `D` of the model.
    pub dim: usize,
    /// Weight of the shared component of the initial prototypes.
    pub init_bias: f64,
    pub lr: f64,
    /// Gradient steps per M-step.
    pub m_steps: usize,
    /// Pairs whose E-steps share one model snapshot.
    pub batch: usize,
    pub pose: PoseParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prototypes: 48,
            dim: 16,
            init_bias: 0.01,
            lr: 0.05,
            m_steps: 1,
            batch: 8,
            pose: PoseParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(1..=u16::MAX as usize).contains(&self.prototypes) {
            return bad(format!("prototypes {} out of range", self.prototypes));
        }
        if self.dim < 2 {
            return bad(format!("dim {} < 2", self.dim));
        }
        if !(self.init_bias.is_finite() && self.init_bias >= 0.0) {
            return bad(format!("init_bias {} must be finite and >= 0", self.init_bias));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        self.pose.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_inliers: f64,
    pub mean_rot_err_deg: Option<f64>,
    pub mean_trans_err_m: Option<f64>,
    pub skipped: usize,
}

pub const REPORT_HEADER: [&str; 6] = [
    "epoch",
    "mean_loss",
    "mean_inliers",
    "mean_rot_err_deg",
    "mean_trans_err_m",
    "skipped",
];

/// Row 0 describes the initial model; row `e` the E-steps of epoch `e`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn initial(&self) -> Option<&EpochStats> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        crate::table::to_csv_bytes(&self.epochs, &REPORT_HEADER)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::table::write_csv(path, &self.epochs, &REPORT_HEADER)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(Self {
            epochs: crate::table::read_csv(path, &REPORT_HEADER)?,
        })
    }
}

/// Mean rotation (deg) and translation (m) error of a model; evaluation only.
pub type Evaluator<'a> = &'a (dyn Fn(&DescriptorModel) -> Result<(f64, f64)> + Sync);

/// E-step failures that mean "no usable estimate for this pair".
pub fn is_skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::NoConsensus(_) | Error::TooFewValidDepths(_) | Error::DegenerateGeometry(_)
    )
}

#[derive(Default)]
struct Tally {
    loss: f64,
    inliers: f64,
    used: usize,
    skipped: usize,
}

impl Tally {
    /// Records one E-step; returns the estimate when there is one.
    fn add(&mut self, r: Result<EStep>) -> Result<Option<EStep>> {
        match r {
            Ok(e) => {
                self.loss += e.estimate.loss;
                self.inliers += e.estimate.inlier_count as f64;
                self.used += 1;
                Ok(Some(e))
            }
            Err(e) if is_skippable(&e) => {
                self.skipped += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Loss is averaged over pairs with an estimate; inliers over all pairs, skipped ones counting zero.
    fn finish(&self, epoch: usize, model: &DescriptorModel, eval: Option<Evaluator>) -> Result<EpochStats> {
        let total = self.used + self.skipped;
        let errs = eval.map(|f| f(&model.quantized())).transpose()?;
        Ok(EpochStats {
            epoch,
            mean_loss: if self.used == 0 { 0.0 } else { self.loss / self.used as f64 },
            mean_inliers: if total == 0 { 0.0 } else { self.inliers / total as f64 },
            mean_rot_err_deg: errs.map(|e| e.0),
            mean_trans_err_m: errs.map(|e| e.1),
            skipped: self.skipped,
        })
    }
}

/// Alternates E-steps and M-steps over `pairs` for `epochs` shuffled passes.
/// `eval` is called on the initial model and after every epoch, at model-file
/// precision; its output only fills the report's pose-error columns.
pub fn train(
    dataset: &Dataset,
    pairs: &[SampledPair],
    epochs: usize,
    seed: u64,
    config: &TrainConfig,
    eval: Option<Evaluator>,
) -> Result<(DescriptorModel, TrainReport)> {
    config.validate()?;
    let mut model = DescriptorModel::new(config.prototypes, config.dim, config.init_bias, seed)?;
    let cache = FrameCache::build(dataset, pairs, model.k)?;
    let cam = &dataset.camera;
    let params = &config.pose;

    let mut report = TrainReport::default();
    let mut tally = Tally::default();
    let initial: Vec<Result<EStep>> = pairs
        .par_iter()
        .map(|p| {
            let (s, t) = cache.pair(p);
            e_step(&model, s, t, cam, params)
        })
        .collect();
    for r in initial {
        tally.add(r)?;
    }
    report.epochs.push(tally.finish(0, &model, eval)?);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut crate::simworld::stream(seed, 7, epoch as u64, 0));
        let mut tally = Tally::default();
        for batch in order.chunks(config.batch) {
            let steps: Vec<Result<EStep>> = batch
                .par_iter()
                .map(|&i| {
                    let (s, t) = cache.pair(&pairs[i]);
                    e_step(&model, s, t, cam, params)
                })
                .collect();
            for (&i, r) in batch.iter().zip(steps) {
                if let Some(e) = tally.add(r)? {
                    let (s, t) = cache.pair(&pairs[i]);
                    let ctx = PairContext::new(s, t, cam, params);
                    // earlier updates in this batch can move a soft match off valid depth
                    if frozen_loss(&model, &ctx, &e.frozen).is_finite() {
                        m_step(&mut model, &ctx, &e.frozen, config.lr, config.m_steps)?;
                    }
                }
            }
        }
        report.epochs.push(tally.finish(epoch, &model, eval)?);
    }
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub pair: usize,
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
    pub inliers: usize,
}

pub const EVAL_HEADER: [&str; 4] = ["pair", "rot_err_deg", "trans_err_m", "inliers"];

/// Pose error of every pair against ground truth. A pair without an
/// estimate is scored as if the identity transform had been returned, with
/// zero inliers.
pub fn pose_errors(
    model: &DescriptorModel,
    dataset: &Dataset,
    cache: &FrameCache,
    pairs: &[SampledPair],
    truth: &GroundTruth,
    params: &PoseParams,
) -> Result<Vec<PairError>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let gt = truth
                .relative((p.exp_a, p.frame_a), (p.exp_b, p.frame_b))
                .ok_or_else(|| Error::InvalidConfig(format!("no ground truth for pair {i}")))?;
            let (s, t) = cache.pair(p);
            let (estimate, inliers) = match e_step(model, s, t, &dataset.camera, params) {
                Ok(e) => (e.estimate.transform, e.estimate.inlier_count),
                Err(e) if is_skippable(&e) => (Transform::identity(), 0),
                Err(e) => return Err(e),
            };
            let (rot, trans) = estimate.error_to(&gt);
            Ok(PairError {
                pair: i,
                rot_err_deg: rot.to_degrees(),
                trans_err_m: trans,
                inliers,
            })
        })
        .collect()
}

/// Mean rotation (deg) and translation (m) error.
pub fn mean_pose_error(errors: &[PairError]) -> (f64, f64) {
    let n = errors.len().max(1) as f64;
    (
        errors.iter().map(|e| e.rot_err_deg).sum::<f64>() / n,
        errors.iter().map(|e| e.trans_err_m).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blob_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64), rng.random_range(-60.0..60.0)))
            .collect();
        let noise: Vec<f64> = (0..w * h).map(|_| rng.random_range(-3.0..3.0)).collect();
        GrayImage::from_fn(w, h, |u, v| {
            let mut x = 120.0 + noise[v * w + u];
            for &(bu, bv, a) in &blobs {
                let r2 = (u as f64 - bu).powi(2) + (v as f64 - bv).powi(2);
                x += a * (-r2 / 4.0).exp();
            }
            x.round().clamp(0.0, 255.0) as u8
        })
    }

    fn linear_disparity(w: usize, h: usize, a: f64, bu: f64, bv: f64) -> DisparityMap {
        DisparityMap::new(w, h, (0..w * h).map(|i| a + bu * (i % w) as f64 + bv * (i / w) as f64).collect())
    }

    struct Instance {
        model: DescriptorModel,
        src: PreparedFrame,
        tgt: PreparedFrame,
        cam: StereoCamera,
        frozen: Frozen,
        tau: f64,
    }

    fn instance(seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (14, 11);
        let cam = StereoCamera::new(20.0, 20.0, 7.0, 5.0, 0.3, w, h).unwrap();
        let k = rng.random_range(3..7);
        let dim = rng.random_range(3..6);
        let model = DescriptorModel::new(k, dim, 1.0, seed).unwrap();
        let prep = |s: u64, rng: &mut ChaCha8Rng| PreparedFrame {
            assignment: assign(&blob_image(w, h, s), k),
            disparity: linear_disparity(w, h, rng.random_range(2.0..4.0), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        };
        let src = prep(seed ^ 1, &mut rng);
        let tgt = prep(seed ^ 2, &mut rng);
        let n = rng.random_range(2..5);
        let q_s: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.2..(w - 1) as f64 - 0.2), rng.random_range(0.2..(h - 1) as f64 - 0.2)])
            .collect();
        let p_s = (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.5..3.0)))
            .collect();
        let transform = Transform::from_rotation_vector(
            Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
        );
        Instance {
            model,
            src,
            tgt,
            cam,
            frozen: Frozen { transform, q_s, p_s },
            tau: rng.random_range(2.0..20.0),
        }
    }

    impl Instance {
        fn ctx(&self) -> PairContext<'_> {
            PairContext {
                src: &self.src,
                tgt: &self.tgt,
                cam: &self.cam,
                tau: self.tau,
                stride: 1,
                d_min: 0.5,
            }
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / scale.max(1e-12)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..24 {
            let inst = instance(seed);
            let ctx = inst.ctx();
            let (loss, g) = frozen_loss_gradient(&inst.model, &ctx, &inst.frozen).unwrap();
            assert!(loss.is_finite());
            let fd = finite_diff_grad(
                |theta| {
                    let mut m = inst.model.clone();
                    m.set_params(theta);
                    frozen_loss(&m, &ctx, &inst.frozen)
                },
                &inst.model.params(),
                1e-5,
            );
            assert!(fd.iter().map(|x| x * x).sum::<f64>() > 1e-12, "seed {seed}: flat instance");
            let err = rel_err(&g, &fd);
            assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
        }
    }

    #[test]
    fn five_parameter_sub_model_gradient() {
        let inst = instance(99);
        let ctx = inst.ctx();
        let (_, g) = frozen_loss_gradient(&inst.model, &ctx, &inst.frozen).unwrap();
        let theta = inst.model.params();
        let coords = [0, 1, inst.model.dim, inst.model.dim + 1, 2 * inst.model.dim];
        let sub: Vec<f64> = coords.iter().map(|&i| theta[i]).collect();
        let fd = finite_diff_grad(
            |s| {
                let mut full = theta.clone();
                for (&i, x) in coords.iter().zip(s) {
                    full[i] = *x;
                }
                let mut m = inst.model.clone();
                m.set_params(&full);
                frozen_loss(&m, &ctx, &inst.frozen)
            },
            &sub,
            1e-5,
        );
        let analytic: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
        assert!(rel_err(&analytic, &fd) < 1e-4);
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let g = finite_diff_grad(|t| t.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let a = [0.5, -3.0, 2.0];
        let g = finite_diff_grad(|t| t.iter().zip(&a).map(|(x, y)| x * y).sum(), &[0.1, 0.2, 0.3], 1e-5);
        for (x, y) in g.iter().zip(&a) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_is_deterministic_and_assignment_is_parameter_free() {
        let img = blob_image(30, 20, 4);
        let model = DescriptorModel::new(8, 6, 0.5, 1).unwrap();
        let frame = Frame {
            index: 0,
            left: img.clone(),
            right: img,
            vo_edge: None,
            disparity: None,
        };
        assert_eq!(forward(&model, &frame), forward(&model, &frame));
        let mut scaled = model.clone();
        scaled.set_params(&model.params().iter().map(|x| 2.0 * x + 0.1).collect::<Vec<_>>());
        let a = forward(&model, &frame);
        let b = forward(&scaled, &frame);
        assert_eq!(a.logits, b.logits);
        assert_ne!(a.scores, b.scores);
    }

    #[test]
    fn perturbing_one_prototype_touches_only_its_pixels() {
        let img = blob_image(30, 20, 5);
        let model = DescriptorModel::new(8, 6, 0.5, 2).unwrap();
        let a = assign(&img, model.k);
        let before = model.render(&a);
        for k in 0..model.k {
            let mut m = model.clone();
            m.prototypes[k * m.dim] += 0.5;
            let after = m.render(&a);
            for i in 0..a.width * a.height {
                let w: f64 = a.mixture(i).filter(|&(j, _)| j == k).map(|(_, w)| w).sum();
                let changed = (after.descriptors[i * m.dim] - before.descriptors[i * m.dim]).abs() > 1e-9;
                assert_eq!(changed, w * 0.5 > 1e-9, "prototype {k} pixel {i}");
            }
        }
    }

    #[test]
    fn mixture_weights_sum_to_one() {
        let a = assign(&blob_image(30, 20, 6), 10);
        for i in 0..600 {
            let s: f64 = a.mixture(i).map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_steps_leave_model_and_loss_unchanged() {
        let inst = instance(3);
        let ctx = inst.ctx();
        let mut m = inst.model.clone();
        let out = m_step(&mut m, &ctx, &inst.frozen, 0.05, 0).unwrap();
        assert_eq!(m, inst.model);
        assert_eq!(out.loss_before, out.loss_after);
        assert_eq!(out.accepted, 0);
    }

    #[test]
    fn accepted_steps_strictly_decrease_loss() {
        for seed in 0..10 {
            let inst = instance(seed);
            let ctx = inst.ctx();
            let mut m = inst.model.clone();
            let out = m_step(&mut m, &ctx, &inst.frozen, 0.05, 3).unwrap();
            if out.accepted > 0 {
                assert!(out.loss_after < out.loss_before);
                assert_eq!(frozen_loss(&m, &ctx, &inst.frozen), out.loss_after);
            } else {
                assert_eq!(m, inst.model);
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let m = DescriptorModel::new(5, 3, 0.2, 9).unwrap().quantized();
        let bytes = m.encode();
        assert_eq!(&bytes[..4], b"SLDM");
        assert_eq!(bytes.len(), 14 + 4 * 20);
        let back = DescriptorModel::decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode(), bytes);
        assert!(DescriptorModel::decode(&bytes[..20]).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = TrainReport {
            epochs: vec![
                EpochStats {
                    epoch: 0,
                    mean_loss: 0.25,
                    mean_inliers: 7.5,
                    mean_rot_err_deg: None,
                    mean_trans_err_m: None,
                    skipped: 2,
                },
                EpochStats {
                    epoch: 1,
                    mean_loss: 0.125,
                    mean_inliers: 9.0,
                    mean_rot_err_deg: Some(0.3),
                    mean_trans_err_m: Some(0.02),
                    skipped: 0,
                },
            ],
        };
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,mean_loss,mean_inliers,mean_rot_err_deg,mean_trans_err_m,skipped\n"));
        let back = TrainReport::read_csv(&path).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_csv_bytes(), text.as_bytes());
    }
}
