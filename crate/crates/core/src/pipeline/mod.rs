//! Dataset generation, batch loss evaluation and configuration.
//!
//! A dataset directory holds `config.json`, `distribution.json`,
//! `summary.json` and one `pair_NNNNNN/` directory per scene pair with a
//! `manifest.json` and four point clouds (complete and occluded A/B).
//!
//! Pair `i` is generated from `derive_seed(master_seed, i)` alone, so pairs
//! are independent of generation order and thread count.

pub mod io;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::SceneDistribution;
use crate::correspondence::{match_points, SeedSet, DEFAULT_SEEDS, DEFAULT_THETA};
use crate::decoder::{build_targets, evaluate, Model, ModelConfig, PairSample, SceneSample};
use crate::losses::{LossReport, ObjectiveParams, DEFAULT_LAMBDA_PTS, DEFAULT_LAMBDA_REC, DEFAULT_TAU};
use crate::nn::TensorSet;
use crate::occlusion::{occlude_scene, occlude_with, OcclusionRecord};
use crate::rng::{
    derive_seed, STREAM_OCCLUSION_A, STREAM_OCCLUSION_B, STREAM_SEEDS_A, STREAM_SEEDS_B, STREAM_TARGETS_A,
    STREAM_TARGETS_B,
};
use crate::scenegen::{
    make_scene_pair, AssetSource, DirectoryAssets, LayoutParams, ProceduralAssets, SceneInstance, ScenePair,
};
use crate::{Error, Execution, Point, Result};
pub use io::CloudFormat;
use io::write_point_cloud;
use manifest::{list_pair_dirs, GeometryEntry, ObjectEntry, PairManifest, SceneEntry};

pub const CONFIG_FILE: &str = "config.json";
pub const DISTRIBUTION_FILE: &str = "distribution.json";
pub const SUMMARY_FILE: &str = "summary.json";
/// Fresh layouts tried for a pair after a placement failure.
pub const MAX_PLACEMENT_RETRIES: usize = 16;
/// Stream used to initialise a model when no checkpoint is given.
pub const STREAM_MODEL: u64 = 0x30DE1;

/// Candidate points of scene B for matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePool {
    /// Every surviving foreground point of B.
    #[default]
    Foreground,
    /// An independent FPS of B with the same size as the A seeds.
    Fps,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AssetSelector {
    #[default]
    Procedural,
    /// `<path>/<category label>/*.ply|*.bin`.
    Directory { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_scenes: usize,
    pub n_objects_per_scene: usize,
    /// Points sampled per procedural asset.
    pub points_per_object: usize,
    pub epsilon: f64,
    /// Seed count `M` per scene.
    pub seeds: usize,
    pub theta: f64,
    pub candidate_pool: CandidatePool,
    pub occlusion: bool,
    pub tau: f64,
    pub lambda_pts: f64,
    pub lambda_rec: f64,
    pub model: ModelConfig,
    pub layout: LayoutParams,
    /// Pairs per loss batch.
    pub batch_size: usize,
    pub format: CloudFormat,
    /// Master seed.
    pub seed: u64,
    pub assets: AssetSelector,
    /// Not serialized and not part of the hash.
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_scenes: 10,
            n_objects_per_scene: 12,
            points_per_object: 512,
            epsilon: crate::catalog::scannet::DEFAULT_EPSILON,
            seeds: DEFAULT_SEEDS,
            theta: DEFAULT_THETA,
            candidate_pool: CandidatePool::default(),
            occlusion: true,
            tau: DEFAULT_TAU,
            lambda_pts: DEFAULT_LAMBDA_PTS,
            lambda_rec: DEFAULT_LAMBDA_REC,
            model: ModelConfig::default(),
            layout: LayoutParams::default(),
            batch_size: 2,
            format: CloudFormat::default(),
            seed: 0,
            assets: AssetSelector::default(),
            output_dir: None,
        }
    }
}

fn prefixed(e: Error) -> Error {
    match e {
        Error::InvalidParameter { path, reason } => Error::InvalidParameter {
            path: format!("config.{path}"),
            reason,
        },
        other => other,
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let at_least = |name: &str, v: usize, min: usize| {
            if v < min {
                Err(Error::invalid(format!("config.{name}"), format!("{v} is below {min}")))
            } else {
                Ok(())
            }
        };
        at_least("n_scenes", self.n_scenes, 1)?;
        at_least("n_objects_per_scene", self.n_objects_per_scene, 1)?;
        at_least("points_per_object", self.points_per_object, crate::scenegen::assets::MIN_OBJECT_POINTS)?;
        at_least("seeds", self.seeds, 1)?;
        at_least("batch_size", self.batch_size, 1)?;
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid("config.epsilon", format!("{} outside [0, 1]", self.epsilon)));
        }
        if !(self.theta > 0.0) {
            return Err(Error::invalid("config.theta", format!("{} must be positive", self.theta)));
        }
        self.objective().validate().map_err(prefixed)?;
        self.model.validate().map_err(prefixed)?;
        self.layout.validate().map_err(prefixed)?;
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveParams {
        ObjectiveParams {
            tau: self.tau,
            lambda_pts: self.lambda_pts,
            lambda_rec: self.lambda_rec,
        }
    }

    pub fn sample_params(&self) -> SampleParams {
        SampleParams {
            seeds: self.seeds,
            theta: self.theta,
            candidate_pool: self.candidate_pool,
            occlusion: self.occlusion,
            grid_side: self.model.grid_side,
        }
    }

    /// Canonical JSON (fixed field order, no output directory).
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::InvalidParameter { path: p, reason } => Error::Format {
                path: path.to_path_buf(),
                reason: format!("{p}: {reason}"),
            },
            other => other,
        })
    }

    pub fn asset_source(&self, dist: &SceneDistribution) -> Result<Box<dyn AssetSource>> {
        let labels = dist.category_labels().to_vec();
        Ok(match &self.assets {
            AssetSelector::Procedural => Box::new(ProceduralAssets::new(labels, self.points_per_object)?),
            AssetSelector::Directory { path } => Box::new(DirectoryAssets::new(path.clone(), labels)),
        })
    }
}

/// SHA-256 over the canonical config JSON and the distribution JSON.
pub fn config_hash(config: &PipelineConfig, dist: &SceneDistribution) -> String {
    let mut h = Sha256::new();
    h.update(config.to_json_string().as_bytes());
    h.update(b"\n");
    h.update(dist.to_json_string().as_bytes());
    hex::encode(h.finalize())
}

/// Per-pair sampling choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub seeds: usize,
    pub theta: f64,
    pub candidate_pool: CandidatePool,
    pub occlusion: bool,
    pub grid_side: usize,
}

impl Default for SampleParams {
    fn default() -> Self {
        PipelineConfig::default().sample_params()
    }
}

/// A scene pair with occlusion, seeds, matches and targets.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub pair: ScenePair,
    pub occlusion_a: OcclusionRecord,
    pub occlusion_b: OcclusionRecord,
    pub sample: PairSample,
    /// Target rows into the complete clouds (detail) and into the detail
    /// targets (coarse), for A then B.
    pub target_rows: [(Vec<usize>, Vec<usize>); 2],
}

fn occlude(scene: &SceneInstance, enabled: bool, seed: u64) -> Result<(SceneInstance, OcclusionRecord)> {
    if enabled {
        occlude_scene(scene, seed)
    } else {
        let centre = scene.bounds().map(|b| (b.min + b.max) / 2.0).unwrap_or_else(Point::zeros);
        occlude_with(scene, centre, &vec![0.0; scene.num_objects()])
    }
}

fn target_rows(complete: &SceneInstance, n: usize, u: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let detail = crate::correspondence::farthest_point_sample(&complete.points, u * u * n, seed)?;
    let pts: Vec<Point> = detail.iter().map(|&i| complete.points[i]).collect();
    let coarse = crate::correspondence::farthest_point_sample_from(&pts, n, 0)?;
    Ok((detail, coarse))
}

/// Occludes both scenes, samples seeds after occlusion, matches A seeds into
/// B and builds reconstruction targets from the complete scenes.
pub fn prepare_pair(pair: ScenePair, params: &SampleParams, seed: u64, exec: Execution) -> Result<PreparedPair> {
    let (occ_a, rec_a) = occlude(&pair.scene_a, params.occlusion, derive_seed(seed, STREAM_OCCLUSION_A))?;
    let (occ_b, rec_b) = occlude(&pair.scene_b, params.occlusion, derive_seed(seed, STREAM_OCCLUSION_B))?;
    let seeds_a = SeedSet::sample(&occ_a, params.seeds, derive_seed(seed, STREAM_SEEDS_A))?;
    let seeds_b = SeedSet::sample(&occ_b, params.seeds, derive_seed(seed, STREAM_SEEDS_B))?;
    let matches = match params.candidate_pool {
        CandidatePool::Foreground => {
            match_points(&occ_a, &occ_b, &seeds_a, &SeedSet::all_foreground(&occ_b), params.theta, exec)?
        }
        CandidatePool::Fps => match_points(&occ_a, &occ_b, &seeds_a, &seeds_b, params.theta, exec)?,
    };
    let u = params.grid_side;
    let rows_a = target_rows(&pair.scene_a, params.seeds, u, derive_seed(seed, STREAM_TARGETS_A))?;
    let rows_b = target_rows(&pair.scene_b, params.seeds, u, derive_seed(seed, STREAM_TARGETS_B))?;
    let targets = |scene: &SceneInstance, rows: &(Vec<usize>, Vec<usize>)| {
        let detail: Vec<Point> = rows.0.iter().map(|&i| scene.points[i]).collect();
        let coarse = rows.1.iter().map(|&i| detail[i]).collect();
        crate::decoder::Targets { coarse, detail }
    };
    debug_assert_eq!(
        targets(&pair.scene_a, &rows_a),
        build_targets(&pair.scene_a, params.seeds, u, derive_seed(seed, STREAM_TARGETS_A))?
    );
    let sample = PairSample {
        a: SceneSample {
            targets: targets(&pair.scene_a, &rows_a),
            scene: occ_a,
            seeds: seeds_a.indices,
        },
        b: SceneSample {
            targets: targets(&pair.scene_b, &rows_b),
            scene: occ_b,
            seeds: seeds_b.indices,
        },
        categories: pair.categories(),
        matches,
    };
    Ok(PreparedPair {
        pair,
        occlusion_a: rec_a,
        occlusion_b: rec_b,
        sample,
        target_rows: [rows_a, rows_b],
    })
}

/// Builds pair `index` of a dataset, retrying fresh layouts on placement
/// failure. Returns the pair and the number of discarded layouts.
pub fn build_pair(
    config: &PipelineConfig,
    dist: &SceneDistribution,
    assets: &dyn AssetSource,
    index: usize,
    exec: Execution,
) -> Result<(PreparedPair, usize)> {
    let pair_seed = derive_seed(config.seed, index as u64);
    let mut retries = 0;
    loop {
        let attempt_seed = if retries == 0 {
            pair_seed
        } else {
            derive_seed(pair_seed, retries as u64)
        };
        match make_scene_pair(dist, config.n_objects_per_scene, assets, &config.layout, attempt_seed) {
            Ok(pair) => {
                let prepared = prepare_pair(pair, &config.sample_params(), attempt_seed, exec)?;
                return Ok((prepared, retries));
            }
            Err(Error::PlacementFailure { .. }) if retries < MAX_PLACEMENT_RETRIES => retries += 1,
            Err(e) => return Err(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub n_pairs: usize,
    pub config_hash: String,
    pub placement_retries: usize,
    pub scene_types: BTreeMap<String, usize>,
    pub categories: BTreeMap<String, usize>,
    pub mean_occlusion_fraction: f64,
    pub mean_matches: f64,
    pub mean_points_per_scene: f64,
}

struct PairStats {
    scene_type: usize,
    categories: Vec<usize>,
    fractions: Vec<f64>,
    matches: usize,
    points: usize,
    retries: usize,
}

fn geometry(scene: &SceneInstance, file: String) -> GeometryEntry {
    GeometryEntry {
        file,
        object_points: (0..scene.num_objects()).map(|k| scene.objects[k].canonical.len()).collect(),
        floor_points: scene.floor_points(),
    }
}

fn write_pair(
    dir: &Path,
    index: usize,
    prepared: &PreparedPair,
    retries: usize,
    dist: &SceneDistribution,
    config: &PipelineConfig,
    hash: &str,
) -> Result<()> {
    let pair_id = format!("pair_{index:06}");
    let pair_dir = dir.join(&pair_id);
    fs::create_dir_all(&pair_dir).map_err(|e| Error::io(&pair_dir, e))?;
    let ext = config.format.extension();
    let clouds = [
        ("complete_a", &prepared.pair.scene_a),
        ("occluded_a", &prepared.sample.a.scene),
        ("complete_b", &prepared.pair.scene_b),
        ("occluded_b", &prepared.sample.b.scene),
    ];
    for (name, scene) in clouds {
        write_point_cloud(&pair_dir.join(format!("{name}.{ext}")), &scene.points, config.format)?;
    }
    let entry = |side: &str, complete: &SceneInstance, sample: &SceneSample, occ: &OcclusionRecord, rows: &(Vec<usize>, Vec<usize>)| SceneEntry {
        complete: geometry(complete, format!("complete_{side}.{ext}")),
        occluded: geometry(&sample.scene, format!("occluded_{side}.{ext}")),
        transforms: complete.objects.iter().map(|o| o.transform.clone()).collect(),
        occlusion: occ.clone(),
        seeds: sample.seeds.clone(),
        target_detail: rows.0.clone(),
        target_coarse: rows.1.clone(),
    };
    let spec = &prepared.pair.spec;
    let manifest = PairManifest {
        pair_id,
        pair_index: index,
        seed: derive_seed(config.seed, index as u64),
        config_hash: hash.to_string(),
        scene_type: dist.scene_labels()[spec.scene_type].clone(),
        placement_retries: retries,
        objects: spec
            .objects
            .iter()
            .map(|o| ObjectEntry {
                category: o.category,
                label: dist.category_labels()[o.category].clone(),
                instance: o.instance,
            })
            .collect(),
        scene_a: entry("a", &prepared.pair.scene_a, &prepared.sample.a, &prepared.occlusion_a, &prepared.target_rows[0]),
        scene_b: entry("b", &prepared.pair.scene_b, &prepared.sample.b, &prepared.occlusion_b, &prepared.target_rows[1]),
        matches: prepared.sample.matches.clone(),
    };
    manifest.save(&pair_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes a full dataset to `out_dir`. `on_pair` is called once per finished
/// pair (in completion order) with the pair index.
pub fn generate_dataset(
    config: &PipelineConfig,
    dist: &SceneDistribution,
    out_dir: &Path,
    exec: Execution,
    on_pair: &(dyn Fn(usize) + Sync),
) -> Result<GenerationSummary> {
    config.validate()?;
    let dist = dist.clone().with_epsilon(config.epsilon)?;
    let assets = config.asset_source(&dist)?;
    let hash = config_hash(config, &dist);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::write(out_dir.join(CONFIG_FILE), config.to_json_string() + "\n")
        .map_err(|e| Error::io(out_dir.join(CONFIG_FILE), e))?;
    dist.save(&out_dir.join(DISTRIBUTION_FILE))?;

    let stats = exec.try_map(config.n_scenes, |i| -> Result<PairStats> {
        let (prepared, retries) = build_pair(config, &dist, assets.as_ref(), i, Execution::Sequential)?;
        write_pair(out_dir, i, &prepared, retries, &dist, config, &hash)?;
        on_pair(i);
        Ok(PairStats {
            scene_type: prepared.pair.spec.scene_type,
            categories: prepared.pair.categories(),
            fractions: [&prepared.occlusion_a, &prepared.occlusion_b]
                .iter()
                .flat_map(|r| r.fractions.iter().copied())
                .collect(),
            matches: prepared.sample.matches.len(),
            points: prepared.pair.scene_a.points.len() + prepared.pair.scene_b.points.len(),
            retries,
        })
    })?;

    let mut scene_types = BTreeMap::new();
    let mut categories = BTreeMap::new();
    let (mut frac_sum, mut frac_n) = (0.0, 0usize);
    for s in &stats {
        *scene_types.entry(dist.scene_labels()[s.scene_type].clone()).or_insert(0) += 1;
        for &c in &s.categories {
            *categories.entry(dist.category_labels()[c].clone()).or_insert(0) += 1;
        }
        frac_sum += s.fractions.iter().sum::<f64>();
        frac_n += s.fractions.len();
    }
    let n = stats.len() as f64;
    let summary = GenerationSummary {
        n_pairs: stats.len(),
        config_hash: hash,
        placement_retries: stats.iter().map(|s| s.retries).sum(),
        scene_types,
        categories,
        mean_occlusion_fraction: if frac_n > 0 { frac_sum / frac_n as f64 } else { 0.0 },
        mean_matches: stats.iter().map(|s| s.matches as f64).sum::<f64>() / n,
        mean_points_per_scene: stats.iter().map(|s| s.points as f64).sum::<f64>() / (2.0 * n),
    };
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// A dataset directory with its configuration and hash.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub config: PipelineConfig,
    pub distribution: SceneDistribution,
    pub config_hash: String,
    pub pairs: Vec<PathBuf>,
}

impl Dataset {
    /// Fails with [`Error::EmptyDataset`] when no pair manifest exists.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let pairs = list_pair_dirs(root)?;
        if pairs.is_empty() {
            return Err(Error::EmptyDataset(root.to_path_buf()));
        }
        let config = PipelineConfig::load(&root.join(CONFIG_FILE))?;
        let distribution = SceneDistribution::load(&root.join(DISTRIBUTION_FILE))?;
        let config_hash = config_hash(&config, &distribution);
        Ok(Self {
            root: root.to_path_buf(),
            config,
            distribution,
            config_hash,
            pairs,
        })
    }

    /// Loads and validates one manifest.
    pub fn manifest(&self, pair: usize) -> Result<PairManifest> {
        let dir = &self.pairs[pair];
        let m = PairManifest::load(dir)?;
        m.validate(dir, &self.config_hash)?;
        Ok(m)
    }

    pub fn sample(&self, pair: usize) -> Result<PairSample> {
        let m = self.manifest(pair)?;
        let scene_type = self.distribution.scene_index(&m.scene_type).ok_or_else(|| Error::CorruptManifest {
            pair: m.pair_id.clone(),
            reason: format!("unknown scene type {:?}", m.scene_type),
        })?;
        if m.objects.iter().any(|o| o.category >= self.distribution.num_categories()) {
            return Err(Error::CorruptManifest {
                pair: m.pair_id.clone(),
                reason: "category id out of range".into(),
            });
        }
        m.load_sample(&self.pairs[pair], scene_type)
    }
}

/// Model for evaluation: the checkpoint if given, otherwise a seeded
/// initialization derived from the dataset seed.
pub fn load_model(config: &PipelineConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(path) => {
            let tensors = TensorSet::load(path)?;
            Model::from_tensors(&config.model, &tensors).map_err(|e| match e {
                Error::InvalidParameter { path: p, reason } => Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("{p}: {reason}"),
                },
                other => other,
            })
        }
        None => Model::init(&config.model, derive_seed(config.seed, STREAM_MODEL)),
    }
}

/// One [`LossReport`] per batch of `config.batch_size` consecutive pairs.
pub fn evaluate_losses(root: &Path, checkpoint: Option<&Path>, exec: Execution) -> Result<Vec<LossReport>> {
    let dataset = Dataset::open(root)?;
    let model = load_model(&dataset.config, checkpoint)?;
    let samples = exec.try_map(dataset.pairs.len(), |i| dataset.sample(i))?;
    let batches: Vec<&[PairSample]> = samples.chunks(dataset.config.batch_size).collect();
    let objective = dataset.config.objective();
    exec.try_map(batches.len(), |b| evaluate(batches[b], &model, &objective, Execution::Sequential))
}

/// JSON lines, one report per line.
pub fn write_reports(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r).expect("report serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Field-wise mean of the scalar losses.
pub fn mean_report(reports: &[LossReport]) -> Option<LossReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(LossReport {
        l_obj: mean(|r| r.l_obj),
        l_pts: mean(|r| r.l_pts),
        l_rec_coarse: mean(|r| r.l_rec_coarse),
        l_rec_detail: mean(|r| r.l_rec_detail),
        l_overall: mean(|r| r.l_overall),
        lambda_pts: first.lambda_pts,
        lambda_rec: first.lambda_rec,
        n_pairs: reports.iter().map(|r| r.n_pairs).sum(),
        n_instances: reports.iter().map(|r| r.n_instances).sum(),
        n_matches: reports.iter().map(|r| r.n_matches).sum(),
        mean_obj_negatives: mean(|r| r.mean_obj_negatives),
        mean_pts_negatives: mean(|r| r.mean_pts_negatives),
        gradients: None,
    })
}

/// Recomputes matches of a stored pair from its occluded geometry.
pub fn rematch(dataset: &Dataset, pair: usize, theta: f64, pool: CandidatePool, exec: Execution) -> Result<crate::correspondence::MatchSet> {
    let m = dataset.manifest(pair)?;
    let scene_type = dataset.distribution.scene_index(&m.scene_type).unwrap_or(0);
    let (a, b) = m.load_scenes(&dataset.pairs[pair], scene_type)?;
    let seeds_a = SeedSet::from_indices(&a.occluded, m.scene_a.seeds.clone())?;
    let candidates = match pool {
        CandidatePool::Foreground => SeedSet::all_foreground(&b.occluded),
        CandidatePool::Fps => SeedSet::from_indices(&b.occluded, m.scene_b.seeds.clone())?,
    };
    match_points(&a.occluded, &b.occluded, &seeds_a, &candidates, theta, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_default_scannet_parameters;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            n_scenes: 3,
            n_objects_per_scene: 4,
            points_per_object: 64,
            seeds: 16,
            model: ModelConfig {
                encoder_hidden: 8,
                feature_dim: 8,
                projection_dim: 8,
                offset_hidden: 8,
                fold_hidden: 8,
                ..ModelConfig::default()
            },
            seed: 7,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = PipelineConfig { theta: 0.0, ..tiny() };
        assert!(bad.validate().unwrap_err().to_string().starts_with("config.theta"));
        let bad = PipelineConfig { epsilon: 1.5, ..tiny() };
        assert!(bad.validate().unwrap_err().to_string().starts_with("config.epsilon"));
        let bad = PipelineConfig { tau: -1.0, ..tiny() };
        assert!(bad.validate().unwrap_err().to_string().starts_with("config.tau"));
        let mut bad = tiny();
        bad.model.grid_side = 0;
        assert!(bad.validate().unwrap_err().to_string().starts_with("config.model.grid_side"));
        assert!(PipelineConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn config_json_round_trip_and_hash() {
        let cfg = tiny();
        let back = PipelineConfig::from_json_str(&cfg.to_json_string()).unwrap();
        assert_eq!(back, cfg);
        let d = load_default_scannet_parameters();
        assert_eq!(config_hash(&cfg, &d), config_hash(&back, &d));
        let with_dir = PipelineConfig {
            output_dir: Some("/elsewhere".into()),
            ..cfg.clone()
        };
        assert_eq!(config_hash(&with_dir, &d), config_hash(&cfg, &d));
        let other = PipelineConfig { seed: 8, ..cfg.clone() };
        assert_ne!(config_hash(&other, &d), config_hash(&cfg, &d));
    }

    #[test]
    fn generation_round_trips_through_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let d = load_default_scannet_parameters();
        let summary = generate_dataset(&cfg, &d, dir.path(), Execution::default(), &|_| {}).unwrap();
        assert_eq!(summary.n_pairs, 3);
        assert_eq!(summary.scene_types.values().sum::<usize>(), 3);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.pairs.len(), 3);
        assert_eq!(ds.config_hash, summary.config_hash);
        let dist = d.with_epsilon(cfg.epsilon).unwrap();
        let assets = cfg.asset_source(&dist).unwrap();
        for i in 0..3 {
            let sample = ds.sample(i).unwrap();
            let (fresh, _) = build_pair(&cfg, &dist, assets.as_ref(), i, Execution::Sequential).unwrap();
            assert_eq!(sample.matches, fresh.sample.matches);
            assert_eq!(sample.a.seeds, fresh.sample.a.seeds);
            assert_eq!(sample.a.scene.labels, fresh.sample.a.scene.labels);
            assert_eq!(sample.a.targets.detail.len(), 9 * cfg.seeds);
            let err = sample
                .b
                .scene
                .points
                .iter()
                .zip(&fresh.sample.b.scene.points)
                .map(|(p, q)| (p - q).amax())
                .fold(0.0, f64::max);
            assert!(err < 1e-5);
        }
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { n_scenes: 1, ..tiny() };
        generate_dataset(&cfg, &load_default_scannet_parameters(), dir.path(), Execution::Sequential, &|_| {}).unwrap();
        let path = dir.path().join("pair_000000").join("manifest.json");
        let text = fs::read_to_string(&path).unwrap();
        let mut m: PairManifest = serde_json::from_str(&text).unwrap();
        m.config_hash = "0".repeat(64);
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        match ds.sample(0) {
            Err(Error::CorruptManifest { pair, .. }) => assert_eq!(pair, "pair_000000"),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "{").unwrap();
        assert!(matches!(ds.sample(0), Err(Error::CorruptManifest { .. })));
    }

    #[test]
    fn empty_dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = evaluate_losses(dir.path(), None, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
        assert!(err.is_invalid_input());
    }

    #[test]
    fn rematch_reproduces_stored_matches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            n_scenes: 1,
            format: CloudFormat::BinaryF32,
            ..tiny()
        };
        generate_dataset(&cfg, &load_default_scannet_parameters(), dir.path(), Execution::Sequential, &|_| {}).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let stored = ds.manifest(0).unwrap().matches;
        let again = rematch(&ds, 0, cfg.theta, cfg.candidate_pool, Execution::Sequential).unwrap();
        assert_eq!(again.pairs.len(), stored.pairs.len());
        for (a, b) in again.pairs.iter().zip(&stored.pairs) {
            assert_eq!((a.a_index, a.b_index, a.object_id), (b.a_index, b.b_index, b.object_id));
            assert!((a.distance - b.distance).abs() < 1e-5);
        }
    }
}
