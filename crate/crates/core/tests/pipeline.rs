use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use synthscene::catalog::load_default_scannet_parameters;
use synthscene::decoder::{Model, ModelConfig};
use synthscene::losses::chamfer_distance;
use synthscene::pipeline::{
    evaluate_losses, generate_dataset, rematch, CandidatePool, CloudFormat, Dataset, PipelineConfig,
};
use synthscene::{Error, Execution, Point};

fn tiny(n_scenes: usize) -> PipelineConfig {
    PipelineConfig {
        n_scenes,
        n_objects_per_scene: 3,
        points_per_object: 48,
        seeds: 12,
        model: ModelConfig {
            encoder_hidden: 8,
            feature_dim: 8,
            projection_dim: 8,
            offset_hidden: 8,
            fold_hidden: 8,
            ..ModelConfig::default()
        },
        seed: 11,
        ..PipelineConfig::default()
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_across_runs_and_modes() {
    let dist = load_default_scannet_parameters();
    for format in [CloudFormat::BinaryF32, CloudFormat::AsciiPly] {
        let cfg = PipelineConfig { format, ..tiny(6) };
        let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&cfg, &dist, x.path(), Execution::Parallel, &|_| {}).unwrap();
        generate_dataset(&cfg, &dist, y.path(), Execution::Sequential, &|_| {}).unwrap();
        let (tx, ty) = (tree(x.path()), tree(y.path()));
        assert_eq!(tx.len(), 3 + 6 * 5);
        assert_eq!(tx, ty);
    }
}

#[test]
fn different_seeds_give_different_datasets() {
    let dist = load_default_scannet_parameters();
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = generate_dataset(&tiny(2), &dist, x.path(), Execution::Parallel, &|_| {}).unwrap();
    let b = generate_dataset(&PipelineConfig { seed: 12, ..tiny(2) }, &dist, y.path(), Execution::Parallel, &|_| {})
        .unwrap();
    assert_ne!(a.config_hash, b.config_hash);
    assert_ne!(tree(x.path()), tree(y.path()));
}

#[test]
fn zero_checkpoint_losses_follow_seed_geometry() {
    let dist = load_default_scannet_parameters();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig { batch_size: 2, ..tiny(4) };
    generate_dataset(&cfg, &dist, dir.path(), Execution::Parallel, &|_| {}).unwrap();
    let ckpt = dir.path().join("zero.json");
    Model::zeros(&cfg.model).unwrap().to_tensors().save(&ckpt).unwrap();

    let reports = evaluate_losses(dir.path(), Some(&ckpt), Execution::Parallel).unwrap();
    assert_eq!(reports.len(), 2);
    let ds = Dataset::open(dir.path()).unwrap();
    for (b, report) in reports.iter().enumerate() {
        let (mut coarse, mut detail, mut obj) = (0.0, 0.0, 0.0);
        let mut cats = Vec::new();
        for i in [2 * b, 2 * b + 1] {
            let s = ds.sample(i).unwrap();
            cats.extend(s.categories.iter().copied());
            for scene in [&s.a, &s.b] {
                let seeds: Vec<Point> = scene.seeds.iter().map(|&k| scene.scene.points[k]).collect();
                coarse += chamfer_distance(&seeds, &scene.targets.coarse).unwrap();
                detail += chamfer_distance(&seeds, &scene.targets.detail).unwrap();
            }
        }
        for &c in &cats {
            obj += 2.0 * (1.0 + 2.0 * cats.iter().filter(|&&o| o != c).count() as f64).ln();
        }
        assert!((report.l_rec_coarse - coarse / 4.0).abs() < 1e-12);
        assert!((report.l_rec_detail - detail / 4.0).abs() < 1e-12);
        assert!((report.l_obj - obj / cats.len() as f64).abs() < 1e-12);
        assert!((report.l_overall - report.recomposed()).abs() < 1e-12);
    }
}

#[test]
fn stored_matches_are_reproduced_from_files() {
    let dist = load_default_scannet_parameters();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(3);
    generate_dataset(&cfg, &dist, dir.path(), Execution::Parallel, &|_| {}).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    for i in 0..3 {
        let stored = ds.sample(i).unwrap().matches;
        let again = rematch(&ds, i, cfg.theta, CandidatePool::Foreground, Execution::Sequential).unwrap();
        assert_eq!(stored.len(), again.len());
        for (s, a) in stored.pairs.iter().zip(&again.pairs) {
            assert_eq!((s.a_index, s.b_index, s.object_id), (a.a_index, a.b_index, a.object_id));
            assert!(a.distance < cfg.theta);
        }
    }
}

#[test]
fn scene_type_histogram_tracks_prior() {
    let dist = load_default_scannet_parameters();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        n_objects_per_scene: 1,
        points_per_object: 16,
        seeds: 2,
        model: ModelConfig { grid_side: 1, ..tiny(1).model },
        occlusion: false,
        ..tiny(1000)
    };
    let summary = generate_dataset(&cfg, &dist, dir.path(), Execution::Parallel, &|_| {}).unwrap();
    for (label, &p) in dist.scene_labels().iter().zip(dist.scene_prior()) {
        let got = *summary.scene_types.get(label).unwrap_or(&0) as f64 / 1000.0;
        assert!((got - p).abs() <= 0.025, "{label}: {got} vs {p}");
    }
}

#[test]
fn full_exploration_makes_categories_uniform() {
    let dist = load_default_scannet_parameters();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        n_objects_per_scene: 4,
        points_per_object: 16,
        seeds: 2,
        epsilon: 1.0,
        model: ModelConfig { grid_side: 1, ..tiny(1).model },
        occlusion: false,
        ..tiny(1000)
    };
    let summary = generate_dataset(&cfg, &dist, dir.path(), Execution::Parallel, &|_| {}).unwrap();
    let total = 4000.0;
    let k = dist.num_categories() as f64;
    let (mean, sd) = (total / k, (total * (1.0 / k) * (1.0 - 1.0 / k)).sqrt());
    for label in dist.category_labels() {
        let got = *summary.categories.get(label).unwrap_or(&0) as f64;
        assert!((got - mean).abs() <= 3.0 * sd, "{label}: {got} vs {mean} ± {sd}");
    }
}

#[test]
fn tampered_dataset_is_rejected() {
    let dist = load_default_scannet_parameters();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(1);
    generate_dataset(&cfg, &dist, dir.path(), Execution::Parallel, &|_| {}).unwrap();
    let config = dir.path().join("config.json");
    let text = fs::read_to_string(&config).unwrap().replace("\"theta\": 0.1", "\"theta\": 0.2");
    fs::write(&config, text).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(matches!(ds.sample(0), Err(Error::CorruptManifest { .. })));
}

#[test]
fn missing_dataset_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let err = evaluate_losses(&dir.path().join("nope"), None, Execution::Sequential).unwrap_err();
    assert!(err.is_invalid_input());
    let err = evaluate_losses(dir.path(), None, Execution::Sequential).unwrap_err();
    assert!(matches!(err, Error::EmptyDataset(_)));
}
