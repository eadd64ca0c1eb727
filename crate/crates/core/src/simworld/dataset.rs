use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Experience, Frame, Simulation};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{StereoCamera, Transform};
use crate::imageio::{DenseGrid, GrayImage};
use crate::stereo::DisparityMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperienceMeta {
    pub id: u32,
    pub collection_index: u32,
    pub appearance: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub camera: StereoCamera,
    /// Number of experiences.
    pub m: usize,
    /// Nominal frames per experience.
    pub n: usize,
    pub descriptor_dim: usize,
    pub route_length: f64,
    pub appearance: Vec<f64>,
    pub experiences: Vec<ExperienceMeta>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TruthLine {
    pub matrix: Vec<f64>,
    pub arc_length: f64,
}

pub(crate) fn experience_dir(root: &Path, id: u32) -> PathBuf {
    root.join(format!("exp_{id}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    map.to_grid().write(path)
}

/// Writes `meta.json` and one `exp_<id>/` directory per experience.
pub fn save_dataset(sim: &Simulation, root: &Path) -> Result<()> {
    let ds = &sim.dataset;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let meta = DatasetMeta {
        camera: ds.camera,
        m: ds.experiences.len(),
        n: ds.nominal_frames,
        descriptor_dim: ds.descriptor_dim,
        route_length: ds.route_length,
        appearance: ds.experiences.iter().map(|e| e.appearance).collect(),
        experiences: ds
            .experiences
            .iter()
            .map(|e| ExperienceMeta {
                id: e.id,
                collection_index: e.collection_index,
                appearance: e.appearance,
                frames: e.frames.len(),
            })
            .collect(),
        seed: sim.seed,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write(&root.join("meta.json"), json.as_bytes())?;

    for (k, exp) in ds.experiences.iter().enumerate() {
        let dir = experience_dir(root, exp.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut vo = Vec::new();
        for f in &exp.frames {
            f.left.write_pgm(&dir.join(format!("frame_{}.pgm", f.index)))?;
            f.right.write_pgm(&dir.join(format!("frame_{}_r.pgm", f.index)))?;
            if let Some(d) = &f.disparity {
                d.to_grid().write(&dir.join(format!("frame_{}_disp.slfm", f.index)))?;
            }
            if let Some(edge) = &f.vo_edge {
                serde_json::to_writer(&mut vo, edge).expect("transform serializes");
                vo.push(b'\n');
            }
        }
        write(&dir.join("vo.jsonl"), &vo)?;

        let truth = &sim.truth.experiences[k];
        let mut gt = Vec::new();
        for (pose, s) in truth.poses.iter().zip(&truth.arc_length) {
            let line = TruthLine {
                matrix: pose.to_row_major().to_vec(),
                arc_length: *s,
            };
            serde_json::to_writer(&mut gt, &line).expect("truth serializes");
            gt.write_all(b"\n").unwrap();
        }
        write(&dir.join("gt.jsonl"), &gt)?;

        if let Some(maps) = &sim.feature_maps {
            for (n, map) in maps[k].iter().enumerate() {
                write_feature_map(&dir.join(format!("frame_{n}.slfm")), map)?;
            }
        }
    }
    Ok(())
}

pub(crate) fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))
}

/// Loads everything the pipeline may see: images, disparity and VO.
/// Ground-truth poses are not read.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta = read_meta(root)?;
    meta.camera
        .validate()
        .map_err(|e| Error::corrupt(root.join("meta.json"), e.to_string()))?;
    let mut experiences = Vec::with_capacity(meta.experiences.len());
    for em in &meta.experiences {
        let dir = experience_dir(root, em.id);
        let vo_path = dir.join("vo.jsonl");
        let vo_text = fs::read_to_string(&vo_path).map_err(|e| Error::corrupt(&vo_path, e.to_string()))?;
        let edges: Vec<Transform> = vo_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::corrupt(&vo_path, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        if edges.len() + 1 != em.frames {
            return Err(Error::corrupt(
                &vo_path,
                format!("{} edges for {} frames", edges.len(), em.frames),
            ));
        }
        let mut frames = Vec::with_capacity(em.frames);
        for n in 0..em.frames {
            let left_path = dir.join(format!("frame_{n}.pgm"));
            let left = GrayImage::read_pgm(&left_path)?;
            let right_path = dir.join(format!("frame_{n}_r.pgm"));
            let right = GrayImage::read_pgm(&right_path)?;
            for (img, p) in [(&left, &left_path), (&right, &right_path)] {
                if (img.width, img.height) != (meta.camera.width, meta.camera.height) {
                    return Err(Error::corrupt(p, "image size disagrees with camera"));
                }
            }
            let disp_path = dir.join(format!("frame_{n}_disp.slfm"));
            let disparity = if disp_path.exists() {
                let grid = DenseGrid::read(&disp_path)?;
                let d = DisparityMap::from_grid(&grid).map_err(|e| Error::corrupt(&disp_path, e.to_string()))?;
                if (d.width, d.height) != (meta.camera.width, meta.camera.height) {
                    return Err(Error::corrupt(&disp_path, "disparity size disagrees with camera"));
                }
                Some(d)
            } else {
                None
            };
            frames.push(Frame {
                index: n,
                left,
                right,
                vo_edge: if n == 0 { None } else { Some(edges[n - 1]) },
                disparity,
            });
        }
        experiences.push(Experience {
            id: em.id,
            collection_index: em.collection_index,
            appearance: em.appearance,
            frames,
        });
    }
    Ok(Dataset {
        camera: meta.camera,
        descriptor_dim: meta.descriptor_dim,
        route_length: meta.route_length,
        nominal_frames: meta.n,
        experiences,
    })
}

/// Reads a rendered dense descriptor map, if one was written.
pub fn read_feature_map(root: &Path, id: u32, frame: usize) -> Result<FeatureMap> {
    let path = experience_dir(root, id).join(format!("frame_{frame}.slfm"));
    let grid = DenseGrid::read(&path)?;
    FeatureMap::from_grid(&grid).map_err(|e| Error::corrupt(&path, e.to_string()))
}
