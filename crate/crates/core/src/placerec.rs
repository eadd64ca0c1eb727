//! Sequence-based place recognition over patch-normalized thumbnails.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::simworld::Experience;
use crate::table;

const VARIANCE_FLOOR: f64 = 1e-6;
const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqSlamParams {
    pub down_w: usize,
    pub down_h: usize,
    pub patch_size: usize,
    pub seq_len: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub v_steps: usize,
    pub window_r: usize,
    /// Apply local contrast enhancement before the sequence search.
    pub enhance: bool,
}

impl Default for SeqSlamParams {
    fn default() -> Self {
        Self {
            down_w: 32,
            down_h: 24,
            patch_size: 8,
            seq_len: 11,
            v_min: 0.8,
            v_max: 1.25,
            v_steps: 7,
            window_r: 5,
            enhance: true,
        }
    }
}

impl SeqSlamParams {
    pub fn validate(&self) -> Result<()> {
        if self.down_w == 0 || self.down_h == 0 || self.patch_size == 0 {
            return Err(Error::InvalidConfig("downsample size and patch size must be positive".into()));
        }
        if self.seq_len < 3 || self.seq_len % 2 == 0 {
            return Err(Error::InvalidConfig("seq_len must be odd and at least 3".into()));
        }
        if !(self.v_min > 0.0 && self.v_min <= self.v_max) || self.v_steps == 0 {
            return Err(Error::InvalidConfig("need 0 < v_min <= v_max and v_steps >= 1".into()));
        }
        if self.window_r == 0 {
            return Err(Error::InvalidConfig("window_r must be at least 1".into()));
        }
        Ok(())
    }
}

/// `|query| × |reference|` dissimilarities, row per query frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMatrix {
    pub query_id: u32,
    pub ref_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DifferenceMatrix {
    pub fn new(query_id: u32, ref_id: u32, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols);
        Self {
            query_id,
            ref_id,
            rows,
            cols,
            values,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn transpose(&self) -> DifferenceMatrix {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                values.push(self.get(i, j));
            }
        }
        DifferenceMatrix::new(self.ref_id, self.query_id, self.cols, self.rows, values)
    }

    /// Dense CSV, one row per query frame, no header.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.values.chunks(self.cols) {
            w.serialize(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory write")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMatch {
    pub query_frame: usize,
    pub ref_frame: usize,
    pub score: f64,
}

pub type RawMatchList = Vec<RawMatch>;

pub const RAW_MATCH_HEADER: [&str; 3] = ["query_frame", "ref_frame", "score"];

pub fn write_raw_matches(path: &Path, matches: &[RawMatch]) -> Result<()> {
    table::write_csv(path, matches, &RAW_MATCH_HEADER)
}

pub fn read_raw_matches(path: &Path) -> Result<RawMatchList> {
    table::read_csv(path, &RAW_MATCH_HEADER)
}

/// Area downsampling followed by per-patch zero-mean, unit-variance
/// normalization.
pub fn preprocess(img: &GrayImage, down_w: usize, down_h: usize, patch_size: usize) -> Result<Vec<f64>> {
    if patch_size == 0 || down_w % patch_size != 0 || down_h % patch_size != 0 {
        return Err(Error::BadGeometry(format!(
            "patch size {patch_size} does not divide {down_w}x{down_h}"
        )));
    }
    if down_w == 0 || down_h == 0 || down_w > img.width || down_h > img.height {
        return Err(Error::BadGeometry(format!(
            "cannot downsample {}x{} to {down_w}x{down_h}",
            img.width, img.height
        )));
    }
    let small = area_downsample(img, down_w, down_h);
    let mut out = vec![0.0; down_w * down_h];
    for py in (0..down_h).step_by(patch_size) {
        for px in (0..down_w).step_by(patch_size) {
            let idx = |k: usize| (py + k / patch_size) * down_w + px + k % patch_size;
            let n = (patch_size * patch_size) as f64;
            let mean = (0..patch_size * patch_size).map(|k| small[idx(k)]).sum::<f64>() / n;
            let var = (0..patch_size * patch_size)
                .map(|k| (small[idx(k)] - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = var.max(VARIANCE_FLOOR).sqrt();
            for k in 0..patch_size * patch_size {
                out[idx(k)] = (small[idx(k)] - mean) / std;
            }
        }
    }
    Ok(out)
}

/// Box-filter resampling where each output pixel averages the exact
/// (fractionally weighted) input area it covers.
fn area_downsample(img: &GrayImage, w: usize, h: usize) -> Vec<f64> {
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    let overlap = |a0: f64, a1: f64, i: usize| (a1.min(i as f64 + 1.0) - a0.max(i as f64)).max(0.0);
    let mut out = vec![0.0; w * h];
    for oy in 0..h {
        let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
        for ox in 0..w {
            let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
            let mut acc = 0.0;
            for y in y0.floor() as usize..(y1.ceil() as usize).min(img.height) {
                let wy = overlap(y0, y1, y);
                for x in x0.floor() as usize..(x1.ceil() as usize).min(img.width) {
                    acc += wy * overlap(x0, x1, x) * img.get(x, y) as f64;
                }
            }
            out[oy * w + ox] = acc / (sx * sy);
        }
    }
    out
}

fn preprocess_all(exp: &Experience, p: &SeqSlamParams) -> Result<Vec<Vec<f64>>> {
    exp.frames
        .par_iter()
        .map(|f| preprocess(&f.left, p.down_w, p.down_h, p.patch_size))
        .collect()
}

/// Mean absolute difference between preprocessed left images.
pub fn difference_matrix(query: &Experience, reference: &Experience, p: &SeqSlamParams) -> Result<DifferenceMatrix> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::BadGeometry("difference matrix of an empty experience".into()));
    }
    let q = preprocess_all(query, p)?;
    let r = preprocess_all(reference, p)?;
    Ok(difference_from_descriptors(query.id, reference.id, &q, &r))
}

pub(crate) fn difference_from_descriptors(qid: u32, rid: u32, q: &[Vec<f64>], r: &[Vec<f64>]) -> DifferenceMatrix {
    let values: Vec<f64> = q
        .par_iter()
        .flat_map_iter(|a| {
            r.iter().map(move |b| {
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
            })
        })
        .collect();
    DifferenceMatrix::new(qid, rid, q.len(), r.len(), values)
}

/// Replaces each entry by its z-score within a vertical window of
/// `2·window_r + 1` rows of the same column.
pub fn contrast_enhance(d: &DifferenceMatrix, window_r: usize) -> DifferenceMatrix {
    assert!(window_r >= 1, "window_r must be at least 1");
    let mut values = vec![0.0; d.values.len()];
    for j in 0..d.cols {
        for i in 0..d.rows {
            let lo = i.saturating_sub(window_r);
            let hi = (i + window_r).min(d.rows - 1);
            let n = (hi - lo + 1) as f64;
            let mean = (lo..=hi).map(|k| d.get(k, j)).sum::<f64>() / n;
            let var = (lo..=hi).map(|k| (d.get(k, j) - mean).powi(2)).sum::<f64>() / n;
            values[i * d.cols + j] = (d.get(i, j) - mean) / var.sqrt().max(STD_FLOOR);
        }
    }
    DifferenceMatrix::new(d.query_id, d.ref_id, d.rows, d.cols, values)
}

/// Straight-line sequence search through the difference matrix.
///
/// For query frame `i` and candidate reference frame `j`, a line of slope
/// `v` through `(i, j)` spanning `seq_len` query frames is scored by the sum
/// of the entries it crosses (nearest-index sampling). Cells falling outside
/// the matrix contribute the matrix mean instead.
pub fn match_sequences(d: &DifferenceMatrix, v_min: f64, v_max: f64, v_steps: usize, seq_len: usize) -> Result<RawMatchList> {
    if seq_len < 3 || seq_len % 2 == 0 {
        return Err(Error::InvalidConfig("seq_len must be odd and at least 3".into()));
    }
    if !(v_min > 0.0 && v_min <= v_max) || v_steps == 0 {
        return Err(Error::InvalidConfig("need 0 < v_min <= v_max and v_steps >= 1".into()));
    }
    if d.rows < seq_len {
        return Err(Error::SequenceTooShort {
            len: d.rows,
            needed: seq_len,
        });
    }
    let velocities: Vec<f64> = if v_steps == 1 {
        vec![v_min]
    } else {
        (0..v_steps)
            .map(|k| v_min + (v_max - v_min) * k as f64 / (v_steps - 1) as f64)
            .collect()
    };
    let half = (seq_len / 2) as i64;
    let penalty = d.mean();
    let out = (0..d.rows)
        .map(|i| {
            let mut best = RawMatch {
                query_frame: i,
                ref_frame: 0,
                score: f64::INFINITY,
            };
            for j in 0..d.cols {
                for &v in &velocities {
                    let mut score = 0.0;
                    for t in -half..=half {
                        let qi = i as i64 + t;
                        let rj = (j as f64 + v * t as f64).round() as i64;
                        score += if qi < 0 || qi >= d.rows as i64 || rj < 0 || rj >= d.cols as i64 {
                            penalty
                        } else {
                            d.get(qi as usize, rj as usize)
                        };
                    }
                    if score < best.score {
                        best.ref_frame = j;
                        best.score = score;
                    }
                }
            }
            best
        })
        .collect();
    Ok(out)
}

/// Difference matrix, optional contrast enhancement and sequence search.
pub fn align(query: &Experience, reference: &Experience, p: &SeqSlamParams) -> Result<(DifferenceMatrix, RawMatchList)> {
    p.validate()?;
    let raw = difference_matrix(query, reference, p)?;
    let searched = if p.enhance {
        contrast_enhance(&raw, p.window_r)
    } else {
        raw.clone()
    };
    let matches = match_sequences(&searched, p.v_min, p.v_max, p.v_steps, p.seq_len)?;
    Ok((raw, matches))
}
