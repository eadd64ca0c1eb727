//! Synthetic multi-experience route dataset.
//!
//! Every experience drives the same route with a small, endpoint-free lateral
//! offset and jittered frame spacing; appearance (global gain, per-landmark
//! contrast, additive shadow gradient) drifts monotonically with collection
//! order. Ground-truth poses are kept apart from the pipeline-facing
//! [`Dataset`] and are only written to `gt.jsonl`.

mod dataset;
#[cfg(feature = "ground-truth")]
mod groundtruth;
mod render;
mod vo;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{StereoCamera, Transform};
use crate::imageio::GrayImage;
use crate::stereo::DisparityMap;

pub use dataset::{load_dataset, read_feature_map, save_dataset, write_feature_map, DatasetMeta, ExperienceMeta};
#[cfg(feature = "ground-truth")]
pub use groundtruth::load_ground_truth;
pub use render::{render_frame, RenderedFrame};
pub use vo::simulated_vo;

/// Derives an independent RNG stream for `(seed, purpose, a, b)`.
pub(crate) fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [purpose, a, b] {
        x = x.wrapping_add(v.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        x ^= x >> 31;
        x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 29;
    }
    ChaCha8Rng::seed_from_u64(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub camera: StereoCamera,
    /// Number of experiences (M).
    pub experiences: usize,
    /// Nominal frames per experience (N).
    pub frames: usize,
    /// Per-experience frame counts vary within `frames ± frame_jitter`.
    pub frame_jitter: usize,
    /// Fractional jitter of interior frame positions, in units of one step.
    pub spacing_jitter: f64,
    pub appearance_start: f64,
    pub appearance_step: f64,
    /// Route length in metres.
    pub route_length: f64,
    pub route_amplitude: f64,
    pub route_wavelength: f64,
    /// Maximum per-experience lateral deviation from the route (m).
    pub lateral_offset: f64,
    pub yaw_wobble_deg: f64,
    pub landmarks: usize,
    pub corridor_half_width: f64,
    pub corridor_clearance: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub sprite_sigma: f64,
    pub pixel_noise: f64,
    pub drift: f64,
    pub descriptor_dim: usize,
    /// Also write rendered dense descriptor maps (`frame_<n>.slfm`).
    pub write_feature_maps: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            camera: StereoCamera {
                fu: 100.0,
                fv: 100.0,
                cu: 64.0,
                cv: 48.0,
                b: 0.25,
                width: 128,
                height: 96,
            },
            experiences: 6,
            frames: 60,
            frame_jitter: 3,
            spacing_jitter: 0.1,
            appearance_start: 0.0,
            appearance_step: 0.1,
            route_length: 24.0,
            route_amplitude: 1.0,
            route_wavelength: 20.0,
            lateral_offset: 0.1,
            yaw_wobble_deg: 1.0,
            landmarks: 340,
            corridor_half_width: 5.0,
            corridor_clearance: 0.8,
            min_height: -1.8,
            max_height: 1.3,
            min_depth: 1.0,
            max_depth: 10.0,
            sprite_sigma: 1.6,
            pixel_noise: 1.5,
            drift: 0.02,
            descriptor_dim: 32,
            write_feature_maps: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        self.camera.validate()?;
        if self.experiences < 2 {
            return bad("need at least 2 experiences");
        }
        if self.frames < 20 {
            return bad("need at least 20 frames per experience");
        }
        if self.frame_jitter * 2 >= self.frames {
            return bad("frame_jitter too large");
        }
        if !(0.0..0.5).contains(&self.spacing_jitter) {
            return bad("spacing_jitter must lie in [0, 0.5)");
        }
        let last = self.appearance_start + self.appearance_step * (self.experiences - 1) as f64;
        if self.appearance_start < 0.0 || self.appearance_step < 0.0 || last > 1.0 + 1e-12 {
            return bad("appearance values must stay within [0, 1]");
        }
        if self.landmarks < 50 {
            return bad("need at least 50 landmarks");
        }
        if !(self.route_length > 0.0 && self.route_wavelength > 0.0) {
            return bad("route length and wavelength must be positive");
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return bad("depth range must be positive and non-empty");
        }
        if self.min_height >= self.max_height || self.corridor_clearance >= self.corridor_half_width {
            return bad("empty landmark placement region");
        }
        if !(self.sprite_sigma > 0.0) || self.pixel_noise < 0.0 || self.drift < 0.0 {
            return bad("sprite_sigma must be positive; pixel_noise and drift non-negative");
        }
        if self.descriptor_dim < 2 {
            return bad("descriptor_dim must be at least 2");
        }
        Ok(())
    }

    pub fn appearance(&self, experience: usize) -> f64 {
        (self.appearance_start + self.appearance_step * experience as f64).min(1.0)
    }

    /// Nominal spacing between consecutive frames (m).
    pub fn frame_spacing(&self) -> f64 {
        self.route_length / (self.frames - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    /// Base intensity in `[0, 1]`; 0.5 is background grey.
    pub intensity: f64,
    pub seed: u64,
}

/// Centre line `x = A·sin(2πz/λ)` in the ground plane (y points down).
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub length: f64,
    pub amplitude: f64,
    pub wavelength: f64,
    /// Arc length at `z = i·ARC_STEP`.
    arc: Vec<f64>,
}

const ARC_STEP: f64 = 0.005;

impl Route {
    pub fn new(length: f64, amplitude: f64, wavelength: f64) -> Self {
        let k = 2.0 * std::f64::consts::PI / wavelength;
        let n = (length / ARC_STEP).ceil() as usize + 1;
        let mut arc = Vec::with_capacity(n);
        let mut s = 0.0;
        for i in 0..n {
            arc.push(s);
            let zm = (i as f64 + 0.5) * ARC_STEP;
            s += ARC_STEP * (1.0 + (amplitude * k * (k * zm).cos()).powi(2)).sqrt();
        }
        Self {
            length,
            amplitude,
            wavelength,
            arc,
        }
    }

    fn k(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength
    }

    pub fn point(&self, z: f64) -> Vector3<f64> {
        Vector3::new(self.amplitude * (self.k() * z).sin(), 0.0, z)
    }

    pub fn heading(&self, z: f64) -> f64 {
        (self.amplitude * self.k() * (self.k() * z).cos()).atan2(1.0)
    }

    /// Arc length from the start to route parameter `z`.
    pub fn arc_length(&self, z: f64) -> f64 {
        let x = (z / ARC_STEP).clamp(0.0, (self.arc.len() - 1) as f64);
        let i = (x.floor() as usize).min(self.arc.len() - 2);
        let f = x - i as f64;
        self.arc[i] * (1.0 - f) + self.arc[i + 1] * f
    }

    /// Camera pose `T_world_camera` with lateral offset and yaw perturbation.
    pub fn pose(&self, z: f64, lateral: f64, yaw_offset: f64) -> Transform {
        let psi = self.heading(z);
        let normal = Vector3::new(psi.cos(), 0.0, -psi.sin());
        Transform::from_yaw(psi + yaw_offset, self.point(z) + lateral * normal)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub landmarks: Vec<Landmark>,
    pub route: Route,
    /// Centre-line poses sampled every 0.25 m.
    pub trajectory: Vec<Transform>,
}

impl World {
    pub fn generate(config: &SimConfig, seed: u64) -> Result<World> {
        config.validate()?;
        let route = Route::new(config.route_length, config.route_amplitude, config.route_wavelength);
        let mut rng = stream(seed, 1, 0, 0);
        let mut landmarks = Vec::with_capacity(config.landmarks);
        let (z0, z1) = (-2.0, config.route_length + config.max_depth * 0.8);
        while landmarks.len() < config.landmarks {
            let z = rng.random_range(z0..z1);
            let side = rng.random_range(config.corridor_clearance..config.corridor_half_width);
            let lateral = if rng.random_bool(0.5) { side } else { -side };
            let psi = route.heading(z.clamp(0.0, config.route_length));
            let normal = Vector3::new(psi.cos(), 0.0, -psi.sin());
            let mut position = route.point(z) + lateral * normal;
            position.y = rng.random_range(config.min_height..config.max_height);
            let intensity = if rng.random_bool(0.5) {
                rng.random_range(0.0..0.3)
            } else {
                rng.random_range(0.7..1.0)
            };
            landmarks.push(Landmark {
                position,
                intensity,
                seed: rng.random(),
            });
        }
        let samples = (config.route_length / 0.25).round() as usize;
        let trajectory = (0..=samples)
            .map(|i| route.pose(config.route_length * i as f64 / samples as f64, 0.0, 0.0))
            .collect();
        let world = World {
            landmarks,
            route,
            trajectory,
        };
        for (i, pose) in world.trajectory.iter().enumerate() {
            let n = world.visible(pose, &config.camera, config.min_depth, config.max_depth).len();
            if n < 8 {
                return Err(Error::InvalidConfig(format!(
                    "trajectory sample {i} sees only {n} landmarks; increase the landmark count"
                )));
            }
        }
        Ok(world)
    }

    /// Indices of landmarks in front of the camera and inside the image.
    pub fn visible(&self, pose: &Transform, cam: &StereoCamera, min_depth: f64, max_depth: f64) -> Vec<usize> {
        let inv = pose.inverse();
        self.landmarks
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let p = inv.apply(&l.position);
                if p.z < min_depth || p.z > max_depth {
                    return None;
                }
                let y = cam.project(&p).ok()?;
                cam.contains(y.x, y.y).then_some(i)
            })
            .collect()
    }
}

/// One stereo frame as seen by the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub left: GrayImage,
    pub right: GrayImage,
    /// `T_{n,n-1}`: maps points from the previous camera frame into this one.
    pub vo_edge: Option<Transform>,
    pub disparity: Option<DisparityMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub id: u32,
    pub collection_index: u32,
    /// Lighting parameter in `[0, 1]`.
    pub appearance: f64,
    pub frames: Vec<Frame>,
}

impl Experience {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub camera: StereoCamera,
    pub descriptor_dim: usize,
    pub route_length: f64,
    pub nominal_frames: usize,
    pub experiences: Vec<Experience>,
}

impl Dataset {
    pub fn experience(&self, id: u32) -> Option<&Experience> {
        self.experiences.iter().find(|e| e.id == id)
    }

    /// Nominal distance between consecutive frames (m).
    pub fn frame_spacing(&self) -> f64 {
        self.route_length / (self.nominal_frames - 1) as f64
    }
}

/// Evaluation-only poses of every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceTruth {
    pub id: u32,
    /// `T_world_camera` per frame.
    pub poses: Vec<Transform>,
    /// Distance along the route from its start (m).
    pub arc_length: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub experiences: Vec<ExperienceTruth>,
}

impl GroundTruth {
    pub fn experience(&self, id: u32) -> Option<&ExperienceTruth> {
        self.experiences.iter().find(|e| e.id == id)
    }

    /// `T_target_source` between two frames.
    pub fn relative(&self, src: (u32, usize), tgt: (u32, usize)) -> Option<Transform> {
        let s = self.experience(src.0)?.poses.get(src.1)?;
        let t = self.experience(tgt.0)?.poses.get(tgt.1)?;
        Some(t.inverse().compose(s))
    }

    /// For each query frame, the reference frame with the nearest position.
    pub fn alignment(&self, query: u32, reference: u32) -> Option<Vec<usize>> {
        let q = self.experience(query)?;
        let r = self.experience(reference)?;
        Some(
            q.poses
                .iter()
                .map(|p| {
                    (0..r.poses.len())
                        .min_by(|&a, &b| {
                            let da = (r.poses[a].translation - p.translation).norm_squared();
                            let db = (r.poses[b].translation - p.translation).norm_squared();
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap()
                })
                .collect(),
        )
    }

    /// Along-route distance between two frames (m).
    pub fn arc_distance(&self, a: (u32, usize), b: (u32, usize)) -> Option<f64> {
        let sa = self.experience(a.0)?.arc_length.get(a.1)?;
        let sb = self.experience(b.0)?.arc_length.get(b.1)?;
        Some((sa - sb).abs())
    }
}

/// Everything the generator produces: the pipeline-facing dataset, the
/// evaluation ground truth and the world it was rendered from.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub config: SimConfig,
    pub seed: u64,
    pub world: World,
    pub dataset: Dataset,
    pub truth: GroundTruth,
    /// Rendered dense descriptor maps, when requested.
    pub feature_maps: Option<Vec<Vec<crate::features::FeatureMap>>>,
}

/// Route parameters (z) of one experience's frames.
fn frame_positions(config: &SimConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let step = config.route_length / (count - 1) as f64;
    (0..count)
        .map(|n| {
            if n == 0 || n + 1 == count {
                step * n as f64
            } else {
                step * (n as f64 + rng.random_range(-config.spacing_jitter..=config.spacing_jitter))
            }
        })
        .collect()
}

/// Ground-truth poses and route parameters for every experience.
pub(crate) fn experience_poses(config: &SimConfig, world: &World, seed: u64) -> Vec<(Vec<Transform>, Vec<f64>)> {
    (0..config.experiences)
        .map(|e| {
            let mut rng = stream(seed, 2, e as u64, 0);
            let j = config.frame_jitter as i64;
            let count = (config.frames as i64 + rng.random_range(-j..=j)) as usize;
            let offset = rng.random_range(-config.lateral_offset..=config.lateral_offset);
            let wobble = rng.random_range(-1.0..=1.0) * config.yaw_wobble_deg.to_radians();
            let zs = frame_positions(config, count, &mut rng);
            let poses = zs
                .iter()
                .map(|&z| {
                    let phase = std::f64::consts::PI * z / config.route_length;
                    world.route.pose(z, offset * phase.sin(), wobble * (2.0 * phase).sin())
                })
                .collect();
            let arcs = zs.iter().map(|&z| world.route.arc_length(z)).collect();
            (poses, arcs)
        })
        .collect()
}

/// Generates the full multi-experience dataset in memory.
pub fn simulate(config: &SimConfig, seed: u64) -> Result<Simulation> {
    let world = World::generate(config, seed)?;
    let per_exp = experience_poses(config, &world, seed);
    let mut experiences = Vec::with_capacity(config.experiences);
    let mut truths = Vec::with_capacity(config.experiences);
    let mut maps = config.write_feature_maps.then(Vec::new);
    for (e, (poses, arcs)) in per_exp.into_iter().enumerate() {
        let appearance = config.appearance(e);
        let vo = simulated_vo(&poses, config.drift, seed ^ (e as u64).wrapping_mul(0x5851_F42D));
        let rendered: Vec<RenderedFrame> = {
            use rayon::prelude::*;
            poses
                .par_iter()
                .enumerate()
                .map(|(n, pose)| {
                    let noise_seed = stream(seed, 3, e as u64, n as u64).random();
                    render_frame(&world, pose, appearance, config, noise_seed)
                })
                .collect()
        };
        let mut frames = Vec::with_capacity(rendered.len());
        let mut exp_maps = Vec::new();
        for (n, r) in rendered.into_iter().enumerate() {
            frames.push(Frame {
                index: n,
                left: r.left,
                right: r.right,
                vo_edge: if n == 0 { None } else { Some(vo[n - 1]) },
                disparity: Some(r.disparity),
            });
            if maps.is_some() {
                exp_maps.push(r.features);
            }
        }
        if let Some(m) = maps.as_mut() {
            m.push(exp_maps);
        }
        experiences.push(Experience {
            id: e as u32,
            collection_index: e as u32,
            appearance,
            frames,
        });
        truths.push(ExperienceTruth {
            id: e as u32,
            poses,
            arc_length: arcs,
        });
    }
    Ok(Simulation {
        config: config.clone(),
        seed,
        world,
        dataset: Dataset {
            camera: config.camera,
            descriptor_dim: config.descriptor_dim,
            route_length: config.route_length,
            nominal_frames: config.frames,
            experiences,
        },
        truth: GroundTruth {
            experiences: truths,
        },
        feature_maps: maps,
    })
}

/// Generates a dataset and writes it under `path`.
pub fn generate_dataset(config: &SimConfig, seed: u64, path: &std::path::Path) -> Result<Simulation> {
    let sim = simulate(config, seed)?;
    save_dataset(&sim, path)?;
    Ok(sim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            experiences: 3,
            frames: 24,
            frame_jitter: 2,
            route_length: 12.0,
            landmarks: 220,
            ..SimConfig::default()
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = small();
        c.experiences = 1;
        assert!(matches!(simulate(&c, 1), Err(Error::InvalidConfig(_))));
        let mut c = small();
        c.frames = 10;
        assert!(matches!(simulate(&c, 1), Err(Error::InvalidConfig(_))));
        let mut c = small();
        c.appearance_step = 0.6;
        assert!(matches!(simulate(&c, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn appearance_drifts_monotonically() {
        let c = SimConfig::default();
        let a: Vec<f64> = (0..6).map(|e| c.appearance(e)).collect();
        assert!(a.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= c.appearance_step + 1e-12));
        assert!((a[5] - a[0]).abs() >= 0.5 - 1e-12);
    }

    #[test]
    fn endpoints_shared_and_counts_jittered() {
        let c = small();
        let sim = simulate(&c, 11).unwrap();
        let first = sim.truth.experiences[0].poses[0];
        let last = *sim.truth.experiences[0].poses.last().unwrap();
        for t in &sim.truth.experiences {
            assert!((t.poses[0].translation - first.translation).norm() < 0.1);
            assert!((t.poses.last().unwrap().translation - last.translation).norm() < 0.1);
            let n = t.poses.len() as i64;
            assert!((n - c.frames as i64).abs() <= c.frame_jitter as i64);
        }
        for e in &sim.dataset.experiences {
            assert!(e.frames[0].vo_edge.is_none());
            assert!(e.frames[1..].iter().all(|f| f.vo_edge.is_some()));
            assert!(e.frames.iter().all(|f| f.left.width == 128 && f.right.height == 96));
        }
    }

    #[test]
    fn world_sees_enough_landmarks() {
        let c = SimConfig::default();
        let w = World::generate(&c, 3).unwrap();
        assert!(w.landmarks.len() >= 50);
        for pose in &w.trajectory {
            assert!(w.visible(pose, &c.camera, c.min_depth, c.max_depth).len() >= 8);
        }
        let sparse = SimConfig {
            landmarks: 50,
            ..c
        };
        assert!(World::generate(&sparse, 3).is_err());
    }

    #[test]
    fn route_arc_length_is_monotone() {
        let r = Route::new(30.0, 1.0, 20.0);
        assert_eq!(r.arc_length(0.0), 0.0);
        assert!(r.arc_length(30.0) > 30.0);
        assert!(r.arc_length(10.0) < r.arc_length(10.5));
    }
}
