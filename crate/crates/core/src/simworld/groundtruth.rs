//! Evaluation-only reader for `gt.jsonl`. Nothing on the self-supervised
//! path (simulate → seqslam → validate → graph → sample → train) links it.

use std::fs;
use std::path::Path;

use super::dataset::{experience_dir, read_meta, TruthLine};
use super::{ExperienceTruth, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::Transform;

pub fn load_ground_truth(root: &Path) -> Result<GroundTruth> {
    let meta = read_meta(root)?;
    let mut experiences = Vec::with_capacity(meta.experiences.len());
    for em in &meta.experiences {
        let path = experience_dir(root, em.id).join("gt.jsonl");
        let text = fs::read_to_string(&path).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        let mut poses = Vec::with_capacity(em.frames);
        let mut arc_length = Vec::with_capacity(em.frames);
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let parsed: TruthLine =
                serde_json::from_str(line).map_err(|e| Error::corrupt(&path, format!("line {}: {e}", i + 1)))?;
            let pose = Transform::from_row_major(&parsed.matrix)
                .map_err(|e| Error::corrupt(&path, format!("line {}: {e}", i + 1)))?;
            poses.push(pose);
            arc_length.push(parsed.arc_length);
        }
        if poses.len() != em.frames {
            return Err(Error::corrupt(
                &path,
                format!("{} poses for {} frames", poses.len(), em.frames),
            ));
        }
        experiences.push(ExperienceTruth {
            id: em.id,
            poses,
            arc_length,
        });
    }
    Ok(GroundTruth { experiences })
}
