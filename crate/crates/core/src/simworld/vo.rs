use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::Transform;

/// Noisy visual-odometry edges `T_{n,n-1}` for a sequence of
/// `T_world_camera` poses.
///
/// Each edge is perturbed by zero-mean Gaussian noise: translation with
/// σ = `drift`·step length per axis, rotation vector with σ = `drift`·0.5°
/// per axis. Errors compound when the edges are chained.
pub fn simulated_vo(poses: &[Transform], drift: f64, seed: u64) -> Vec<Transform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot_sigma = drift * 0.5f64.to_radians();
    poses
        .windows(2)
        .map(|w| {
            let edge = w[1].inverse().compose(&w[0]);
            if drift == 0.0 {
                return edge;
            }
            let step = edge.translation.norm();
            let t = Normal::new(0.0, drift * step).unwrap();
            let r = Normal::new(0.0, rot_sigma).unwrap();
            let mut sample = |d: &Normal<f64>| Vector3::new(d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng));
            let dt = sample(&t);
            let dr = sample(&r);
            Transform::from_rotation_vector(dr, dt).compose(&edge)
        })
        .collect()
}
