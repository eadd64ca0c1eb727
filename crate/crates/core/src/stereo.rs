//! Dense disparity maps: storage, bilinear lookup and a 1-D ZNCC stereo
//! search for image pairs without a rendered disparity channel.

use crate::error::{Error, Result};
use crate::features::bilinear_taps;
use crate::imageio::{DenseGrid, GrayImage};

/// Left-image disparity in pixels; `0` marks pixels without valid depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn sample(&self, u: f64, v: f64) -> Result<f64> {
        Ok(bilinear_taps(self.width, self.height, u, v)?
            .iter()
            .map(|&(i, w)| w * self.data[i])
            .sum())
    }

    /// Value and `(∂/∂u, ∂/∂v)` of the bilinear interpolant.
    pub fn sample_with_gradient(&self, u: f64, v: f64) -> Result<(f64, [f64; 2])> {
        let taps = bilinear_taps(self.width, self.height, u, v)?;
        let [a, b, c, d] = taps.map(|(i, _)| self.data[i]);
        let fu = taps[1].1 + taps[3].1;
        let fv = taps[2].1 + taps[3].1;
        let value = taps.iter().map(|&(i, w)| w * self.data[i]).sum();
        let du = (b - a) * (1.0 - fv) + (d - c) * fv;
        let dv = (c - a) * (1.0 - fu) + (d - b) * fu;
        let du = if self.width > 1 { du } else { 0.0 };
        let dv = if self.height > 1 { dv } else { 0.0 };
        Ok((value, [du, dv]))
    }

    pub fn to_grid(&self) -> DenseGrid {
        DenseGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_grid(grid: &DenseGrid) -> Result<Self> {
        if grid.channels != 1 {
            return Err(Error::InvalidConfig(format!(
                "disparity grid must have 1 channel, got {}",
                grid.channels
            )));
        }
        Ok(Self::new(
            grid.width,
            grid.height,
            grid.data.iter().map(|&x| x as f64).collect(),
        ))
    }
}

/// Winner-take-all ZNCC block matching along rows with parabolic sub-pixel
/// refinement. Pixels whose best correlation is below `min_zncc` get 0.
pub fn stereo_disparity(
    left: &GrayImage,
    right: &GrayImage,
    max_disparity: usize,
    radius: usize,
    min_zncc: f64,
) -> DisparityMap {
    assert_eq!((left.width, left.height), (right.width, right.height));
    let (w, h) = (left.width, left.height);
    let l = left.to_f64();
    let r = right.to_f64();
    let patch = |img: &[f64], u: usize, v: usize| -> Option<Vec<f64>> {
        if u < radius || v < radius || u + radius >= w || v + radius >= h {
            return None;
        }
        let mut out = Vec::with_capacity((2 * radius + 1).pow(2));
        for y in v - radius..=v + radius {
            out.extend_from_slice(&img[y * w + u - radius..=y * w + u + radius]);
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let norm = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-6 {
            return None;
        }
        Some(out.into_iter().map(|x| (x - mean) / norm).collect())
    };
    let mut data = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let Some(pl) = patch(&l, u, v) else { continue };
            let scores: Vec<f64> = (0..=max_disparity.min(u))
                .map(|d| {
                    patch(&r, u - d, v)
                        .map(|pr| pl.iter().zip(&pr).map(|(a, b)| a * b).sum())
                        .unwrap_or(-1.0)
                })
                .collect();
            let (best, &peak) = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            if peak < min_zncc || best == 0 || best + 1 >= scores.len() {
                continue;
            }
            let (a, c) = (scores[best - 1], scores[best + 1]);
            let denom = a - 2.0 * peak + c;
            let offset = if denom < 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
            data[v * w + u] = best as f64 + offset.clamp(-0.5, 0.5);
        }
    }
    DisparityMap::new(w, h, data)
}
