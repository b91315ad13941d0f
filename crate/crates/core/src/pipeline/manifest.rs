//! Per-pair manifest files and their validated reload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::read_point_cloud;
use crate::correspondence::MatchSet;
use crate::decoder::{PairSample, SceneSample, Targets};
use crate::occlusion::OcclusionRecord;
use crate::scenegen::{ObjectInstance, SceneInstance, Transform, FLOOR_LABEL};
use crate::{Error, Point, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub category: usize,
    pub label: String,
    pub instance: usize,
}

/// A point-cloud file whose points are grouped by object, floor last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryEntry {
    /// Relative to the pair directory.
    pub file: String,
    pub object_points: Vec<usize>,
    pub floor_points: usize,
}

impl GeometryEntry {
    pub fn total_points(&self) -> usize {
        self.object_points.iter().sum::<usize>() + self.floor_points
    }

    pub fn labels(&self) -> Vec<u32> {
        self.object_points
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k as u32, n))
            .chain(std::iter::repeat_n(FLOOR_LABEL, self.floor_points))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub complete: GeometryEntry,
    pub occluded: GeometryEntry,
    pub transforms: Vec<Transform>,
    pub occlusion: OcclusionRecord,
    /// Seed rows of the occluded cloud.
    pub seeds: Vec<usize>,
    /// Rows of the complete cloud forming the detail target.
    pub target_detail: Vec<usize>,
    /// Rows of `target_detail` forming the coarse target.
    pub target_coarse: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairManifest {
    pub pair_id: String,
    pub pair_index: usize,
    pub seed: u64,
    pub config_hash: String,
    pub scene_type: String,
    /// Layout attempts discarded after placement failures.
    pub placement_retries: usize,
    pub objects: Vec<ObjectEntry>,
    pub scene_a: SceneEntry,
    pub scene_b: SceneEntry,
    pub matches: MatchSet,
}

/// Geometry of one loaded scene.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub complete: SceneInstance,
    pub occluded: SceneInstance,
}

impl PairManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Parses `<dir>/manifest.json`; structural problems become
    /// [`Error::CorruptManifest`] naming the pair directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
            pair: pair_name(dir),
            reason: e.to_string(),
        })
    }

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptManifest {
            pair: self.pair_id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks internal consistency, the expected config hash and the
    /// referenced files.
    pub fn validate(&self, dir: &Path, expected_hash: &str) -> Result<()> {
        if self.config_hash != expected_hash {
            return Err(self.corrupt(format!(
                "config hash {} does not match dataset hash {expected_hash}",
                self.config_hash
            )));
        }
        let k = self.objects.len();
        for (side, s) in [("scene_a", &self.scene_a), ("scene_b", &self.scene_b)] {
            if s.transforms.len() != k
                || s.complete.object_points.len() != k
                || s.occluded.object_points.len() != k
                || s.occlusion.kept.len() != k
                || s.occlusion.fractions.len() != k
            {
                return Err(self.corrupt(format!("{side}: per-object lists disagree with {k} objects")));
            }
            for obj in 0..k {
                if s.occlusion.kept[obj].len() != s.occluded.object_points[obj] {
                    return Err(self.corrupt(format!("{side}: kept list of object {obj} disagrees with occluded count")));
                }
                if s.occlusion.kept[obj].iter().any(|&i| i >= s.complete.object_points[obj]) {
                    return Err(self.corrupt(format!("{side}: kept index out of range for object {obj}")));
                }
            }
            let occluded_labels = s.occluded.labels();
            if s.seeds.iter().any(|&i| occluded_labels.get(i).is_none_or(|&l| l == FLOOR_LABEL)) {
                return Err(self.corrupt(format!("{side}: seed outside the foreground")));
            }
            if s.target_detail.iter().any(|&i| i >= s.complete.total_points())
                || s.target_coarse.iter().any(|&i| i >= s.target_detail.len())
            {
                return Err(self.corrupt(format!("{side}: target index out of range")));
            }
            for g in [&s.complete, &s.occluded] {
                if !dir.join(&g.file).is_file() {
                    return Err(self.corrupt(format!("missing file {}", g.file)));
                }
            }
        }
        let (la, lb) = (self.scene_a.occluded.labels(), self.scene_b.occluded.labels());
        for m in &self.matches.pairs {
            if la.get(m.a_index) != Some(&m.object_id) || lb.get(m.b_index) != Some(&m.object_id) {
                return Err(self.corrupt(format!(
                    "match ({}, {}) is not on object {}",
                    m.a_index, m.b_index, m.object_id
                )));
            }
            if !(m.distance < self.matches.theta) {
                return Err(self.corrupt(format!("match distance {} not below theta", m.distance)));
            }
        }
        Ok(())
    }

    fn load_geometry(&self, dir: &Path, g: &GeometryEntry, transforms: &[Transform], scene_type: usize) -> Result<SceneInstance> {
        let points = read_point_cloud(&dir.join(&g.file))?;
        if points.len() != g.total_points() {
            return Err(self.corrupt(format!(
                "{} has {} points, manifest declares {}",
                g.file,
                points.len(),
                g.total_points()
            )));
        }
        let mut start = 0;
        let objects = self
            .objects
            .iter()
            .zip(transforms)
            .zip(&g.object_points)
            .map(|((o, t), &n)| {
                let canonical = points[start..start + n].iter().map(|p| t.apply_inverse(p)).collect();
                start += n;
                ObjectInstance {
                    category: o.category,
                    instance: o.instance,
                    canonical,
                    transform: t.clone(),
                }
            })
            .collect();
        Ok(SceneInstance {
            scene_type,
            objects,
            points,
            labels: g.labels(),
        })
    }

    /// Loads complete and occluded geometry of both scenes.
    pub fn load_scenes(&self, dir: &Path, scene_type: usize) -> Result<(LoadedScene, LoadedScene)> {
        let load = |s: &SceneEntry| -> Result<LoadedScene> {
            Ok(LoadedScene {
                complete: self.load_geometry(dir, &s.complete, &s.transforms, scene_type)?,
                occluded: self.load_geometry(dir, &s.occluded, &s.transforms, scene_type)?,
            })
        };
        Ok((load(&self.scene_a)?, load(&self.scene_b)?))
    }

    /// Rebuilds the objective inputs from the stored geometry.
    pub fn load_sample(&self, dir: &Path, scene_type: usize) -> Result<PairSample> {
        let (a, b) = self.load_scenes(dir, scene_type)?;
        let sample = |entry: &SceneEntry, scene: LoadedScene| {
            let detail: Vec<Point> = entry.target_detail.iter().map(|&i| scene.complete.points[i]).collect();
            let coarse = entry.target_coarse.iter().map(|&i| detail[i]).collect();
            SceneSample {
                scene: scene.occluded,
                seeds: entry.seeds.clone(),
                targets: Targets { coarse, detail },
            }
        };
        Ok(PairSample {
            a: sample(&self.scene_a, a),
            b: sample(&self.scene_b, b),
            categories: self.objects.iter().map(|o| o.category).collect(),
            matches: self.matches.clone(),
        })
    }
}

fn pair_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Pair directories (those holding a manifest) in name order.
pub fn list_pair_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
