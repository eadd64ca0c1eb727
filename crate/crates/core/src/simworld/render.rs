use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Landmark, SimConfig, World};
use crate::features::FeatureMap;
use crate::geometry::Transform;
use crate::imageio::GrayImage;
use crate::stereo::DisparityMap;

/// Envelope level below which a sprite does not own a pixel.
const OWNER_LEVEL: f64 = 0.05;
/// Detection logit at a sprite centre in rendered maps.
const LOGIT_GAIN: f64 = 20.0;
const BACKGROUND: f64 = 110.0;
const SPRITE_AMPLITUDE: f64 = 55.0;
const CONTRAST_SWING: f64 = 0.6;
/// Descriptor change per pixel of offset from a sprite centre.
const OFFSET_GAIN: f64 = 0.2;
/// Per-pixel descriptor noise on owned pixels.
const OWNED_NOISE: f64 = 0.1;

pub struct RenderedFrame {
    pub left: GrayImage,
    pub right: GrayImage,
    pub disparity: DisparityMap,
    /// Dense descriptor map built from landmark identities.
    pub features: FeatureMap,
}

/// Per-landmark texture and photometric response, fixed by its seed.
struct Style {
    freqs: [[f64; 2]; 3],
    phases: [f64; 3],
    /// Contrast response to appearance: `1 + swing·(sin(2π·freq·a + phase) − sin(phase))`.
    contrast_freq: f64,
    contrast_phase: f64,
}

impl Style {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freqs = [[0.0; 2]; 3];
        let mut phases = [0.0; 3];
        for m in 0..3 {
            let mag = rng.random_range(0.6..1.6);
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            freqs[m] = [mag * ang.cos(), mag * ang.sin()];
            phases[m] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Self {
            freqs,
            phases,
            contrast_freq: rng.random_range(0.5..1.5),
            contrast_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn contrast(&self, appearance: f64) -> f64 {
        let arg = std::f64::consts::TAU * self.contrast_freq * appearance + self.contrast_phase;
        1.0 + CONTRAST_SWING * (arg.sin() - self.contrast_phase.sin())
    }

    fn texture(&self, du: f64, dv: f64) -> f64 {
        (0..3)
            .map(|m| (self.freqs[m][0] * du + self.freqs[m][1] * dv + self.phases[m]).cos())
            .sum::<f64>()
            / 3.0
    }
}

/// Appearance-independent identity vector plus two directions encoding the pixel offset from the
/// sprite centre, so that off-centre pixels still match their counterpart.
fn landmark_basis(l: &Landmark, dim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(l.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let id = draw();
    let bu = draw();
    let bv = draw();
    (id, bu, bv)
}

#[derive(Clone, Copy)]
struct Owner {
    landmark: usize,
    alpha: f64,
    offset: [f64; 2],
}

struct Splat {
    u: f64,
    v: f64,
    disparity: f64,
    amplitude: f64,
    style: Style,
    landmark: usize,
}

fn draw(img: &mut [f64], base: &[f64], owner: &mut [Option<Owner>], w: usize, h: usize, s: &Splat, u_shift: f64, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let cu = s.u - u_shift;
    let (iu, iv) = (cu.round() as i64, s.v.round() as i64);
    for v in (iv - radius).max(0)..=(iv + radius).min(h as i64 - 1) {
        for u in (iu - radius).max(0)..=(iu + radius).min(w as i64 - 1) {
            let (du, dv) = (u as f64 - cu, v as f64 - s.v);
            let r2 = du * du + dv * dv;
            if r2 > (3.0 * sigma).powi(2) {
                continue;
            }
            let alpha = (-r2 / (2.0 * sigma * sigma)).exp();
            let i = v as usize * w + u as usize;
            let colour = s.amplitude * (1.0 + 0.6 * s.style.texture(du, dv));
            img[i] = (1.0 - alpha) * img[i] + alpha * (base[i] + colour);
            if alpha > OWNER_LEVEL {
                owner[i] = Some(Owner {
                    landmark: s.landmark,
                    alpha,
                    offset: [du, dv],
                });
            }
        }
    }
}

/// Renders the stereo pair, the disparity channel and the dense
/// ground-truth feature map for camera pose `T_world_camera`.
pub fn render_frame(world: &World, pose: &Transform, appearance: f64, config: &SimConfig, noise_seed: u64) -> RenderedFrame {
    let cam = &config.camera;
    let (w, h) = (cam.width, cam.height);
    let inv = pose.inverse();
    let gain = 1.0 - 0.35 * appearance;
    let mut splats: Vec<Splat> = world
        .landmarks
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let p = inv.apply(&l.position);
            if p.z < config.min_depth || p.z > config.max_depth {
                return None;
            }
            let y = cam.project(&p).ok()?;
            let margin = 3.0 * config.sprite_sigma;
            if y.x < -margin || y.y < -margin || y.x > w as f64 + margin || y.y > h as f64 + margin {
                return None;
            }
            let style = Style::new(l.seed);
            let contrast = style.contrast(appearance);
            Some(Splat {
                u: y.x,
                v: y.y,
                disparity: y.z,
                amplitude: gain * contrast * SPRITE_AMPLITUDE * (2.0 * l.intensity - 1.0),
                style,
                landmark: i,
            })
        })
        .collect();
    // painter's order: far to near
    splats.sort_by(|a, b| a.disparity.partial_cmp(&b.disparity).unwrap().then(a.landmark.cmp(&b.landmark)));

    let background = |u: usize, v: usize| {
        gain * BACKGROUND
            + appearance * (30.0 * (u as f64 / w as f64 - 0.5) + 15.0 * (v as f64 / h as f64 - 0.5))
    };
    let base: Vec<f64> = (0..w * h).map(|i| background(i % w, i / w)).collect();
    let mut left = base.clone();
    let mut right = base.clone();
    let mut owner = vec![None; w * h];
    let mut right_owner = vec![None; w * h];
    for s in &splats {
        draw(&mut left, &base, &mut owner, w, h, s, 0.0, config.sprite_sigma);
        draw(&mut right, &base, &mut right_owner, w, h, s, s.disparity, config.sprite_sigma);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let quantize = |img: &[f64], rng: &mut ChaCha8Rng| {
        let data = img
            .iter()
            .map(|&x| {
                let n: f64 = if config.pixel_noise > 0.0 {
                    config.pixel_noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                } else {
                    0.0
                };
                (x + n).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        GrayImage {
            width: w,
            height: h,
            data,
        }
    };
    let left_img = quantize(&left, &mut rng);
    let right_img = quantize(&right, &mut rng);

    let dim = config.descriptor_dim;
    let mut descriptors = Vec::with_capacity(w * h * dim);
    let mut scores = vec![0.0; w * h];
    let mut logits = vec![0.0; w * h];
    let mut disparity = vec![0.0; w * h];
    let mut cache: Vec<Option<(Vec<f64>, Vec<f64>, Vec<f64>)>> = vec![None; world.landmarks.len()];
    let by_landmark: std::collections::HashMap<usize, f64> =
        splats.iter().map(|s| (s.landmark, s.disparity)).collect();
    for i in 0..w * h {
        let noise: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        match owner[i] {
            Some(o) => {
                let (id, bu, bv) = cache[o.landmark].get_or_insert_with(|| landmark_basis(&world.landmarks[o.landmark], dim));
                let [du, dv] = o.offset;
                descriptors.extend((0..dim).map(|c| {
                    id[c] + OFFSET_GAIN * (du * bu[c] + dv * bv[c]) + OWNED_NOISE * noise[c]
                }));
                scores[i] = o.alpha;
                logits[i] = LOGIT_GAIN * o.alpha;
                disparity[i] = by_landmark[&o.landmark] as f32 as f64;
            }
            None => descriptors.extend(noise),
        }
    }
    let features = FeatureMap::new(h, w, dim, descriptors, scores, logits).expect("rendered map is valid");
    RenderedFrame {
        left: left_img,
        right: right_img,
        disparity: DisparityMap::new(w, h, disparity),
        features,
    }
}
