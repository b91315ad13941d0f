//! Categorical chain scene type → object category → object instance.
//!
//! Parameters are maximum-likelihood occurrence frequencies. A
//! [`SceneDistribution`] is validated on construction and immutable
//! afterwards, so it can be shared freely between samplers.

pub mod scannet;

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SUM_TOL: f64 = 1e-9;

/// Occurrence counts per label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTable {
    labels: Vec<String>,
    counts: Vec<u64>,
}

impl CategoryTable {
    pub fn new(labels: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if labels.len() != counts.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels but {} counts",
                labels.len(),
                counts.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::invalid("labels", format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels, counts })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, u64)>) -> Result<Self> {
        let (labels, counts): (Vec<_>, Vec<_>) =
            pairs.into_iter().map(|(l, c)| (l.to_string(), c)).unzip();
        Self::new(labels, counts)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Maximum-likelihood categorical parameters: `counts[k] / Σ counts`.
pub fn fit_categorical(table: &CategoryTable) -> Result<Vec<f64>> {
    let total = table.total();
    if total == 0 {
        return Err(Error::AllZeroCounts(format!(
            "table with labels {:?}",
            table.labels
        )));
    }
    let total = total as f64;
    Ok(table.counts.iter().map(|&c| c as f64 / total).collect())
}

/// Fitted parameters of the generative chain.
///
/// `category_given_scene[s]` is the category distribution for scene type `s`
/// and `instance_given_category[c]` the instance distribution for category
/// `c` (rows may have different lengths).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneDistribution {
    scene_labels: Vec<String>,
    category_labels: Vec<String>,
    scene_prior: Vec<f64>,
    category_given_scene: Vec<Vec<f64>>,
    instance_given_category: Vec<Vec<f64>>,
    epsilon: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistribution {
    scene_labels: Vec<String>,
    category_labels: Vec<String>,
    scene_prior: Vec<f64>,
    category_given_scene: Vec<Vec<f64>>,
    instance_given_category: Vec<Vec<f64>>,
    epsilon: f64,
}

fn check_probabilities(path: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(path, "empty probability vector"));
    }
    for (i, &v) in p.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(
                format!("{path}[{i}]"),
                format!("probability {v} is negative or non-finite"),
            ));
        }
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(path, format!("probabilities sum to {s}, expected 1")));
    }
    Ok(())
}

fn check_labels(path: &str, labels: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, l) in labels.iter().enumerate() {
        if !seen.insert(l.as_str()) {
            return Err(Error::invalid(format!("{path}[{i}]"), format!("duplicate label {l:?}")));
        }
    }
    Ok(())
}

impl SceneDistribution {
    /// Validates every invariant and rejects on the first violation.
    pub fn new(
        scene_labels: Vec<String>,
        category_labels: Vec<String>,
        scene_prior: Vec<f64>,
        category_given_scene: Vec<Vec<f64>>,
        instance_given_category: Vec<Vec<f64>>,
        epsilon: f64,
    ) -> Result<Self> {
        if scene_labels.is_empty() || category_labels.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        check_labels("scene_labels", &scene_labels)?;
        check_labels("category_labels", &category_labels)?;
        if scene_prior.len() != scene_labels.len() {
            return Err(Error::invalid(
                "scene_prior",
                format!("{} entries for {} scene labels", scene_prior.len(), scene_labels.len()),
            ));
        }
        check_probabilities("scene_prior", &scene_prior)?;
        if category_given_scene.len() != scene_labels.len() {
            return Err(Error::invalid(
                "category_given_scene",
                format!(
                    "{} rows for {} scene labels",
                    category_given_scene.len(),
                    scene_labels.len()
                ),
            ));
        }
        for (s, row) in category_given_scene.iter().enumerate() {
            let path = format!("category_given_scene[{s}]");
            if row.len() != category_labels.len() {
                return Err(Error::invalid(
                    path,
                    format!("{} entries for {} categories", row.len(), category_labels.len()),
                ));
            }
            check_probabilities(&path, row)?;
        }
        if instance_given_category.len() != category_labels.len() {
            return Err(Error::invalid(
                "instance_given_category",
                format!(
                    "{} rows for {} categories",
                    instance_given_category.len(),
                    category_labels.len()
                ),
            ));
        }
        for (c, row) in instance_given_category.iter().enumerate() {
            check_probabilities(&format!("instance_given_category[{c}]"), row)?;
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::invalid("epsilon", format!("{epsilon} is outside [0, 1]")));
        }
        Ok(Self {
            scene_labels,
            category_labels,
            scene_prior,
            category_given_scene,
            instance_given_category,
            epsilon,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::invalid("epsilon", format!("{epsilon} is outside [0, 1]")));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn scene_labels(&self) -> &[String] {
        &self.scene_labels
    }

    pub fn category_labels(&self) -> &[String] {
        &self.category_labels
    }

    pub fn scene_prior(&self) -> &[f64] {
        &self.scene_prior
    }

    pub fn category_given_scene(&self) -> &[Vec<f64>] {
        &self.category_given_scene
    }

    pub fn instance_given_category(&self) -> &[Vec<f64>] {
        &self.instance_given_category
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_scene_types(&self) -> usize {
        self.scene_labels.len()
    }

    pub fn num_categories(&self) -> usize {
        self.category_labels.len()
    }

    pub fn scene_index(&self, label: &str) -> Option<usize> {
        self.scene_labels.iter().position(|l| l == label)
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.category_labels.iter().position(|l| l == label)
    }

    /// Category frequencies implied by the prior and the conditional rows.
    pub fn category_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.num_categories()];
        for (row, &p) in self.category_given_scene.iter().zip(&self.scene_prior) {
            for (acc, &q) in m.iter_mut().zip(row) {
                *acc += p * q;
            }
        }
        m
    }

    pub fn sample_scene_type<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.scene_prior, rng)
    }

    /// ε-greedy category draw: uniform with probability ε, otherwise the
    /// fitted row of `scene_type`.
    pub fn sample_category<R: Rng + ?Sized>(&self, scene_type: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.epsilon {
            rng.random_range(0..self.num_categories())
        } else {
            sample_index(&self.category_given_scene[scene_type], rng)
        }
    }

    pub fn sample_instance<R: Rng + ?Sized>(&self, category: usize, rng: &mut R) -> usize {
        sample_index(&self.instance_given_category[category], rng)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawDistribution = serde_json::from_str(s).map_err(|e| Error::Json {
            path: "<distribution>".into(),
            source: e,
        })?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawDistribution) -> Result<Self> {
        Self::new(
            raw.scene_labels,
            raw.category_labels,
            raw.scene_prior,
            raw.category_given_scene,
            raw.instance_given_category,
            raw.epsilon,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: RawDistribution = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_raw(raw)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("distribution serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

impl<'de> Deserialize<'de> for SceneDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawDistribution::deserialize(d)?;
        Self::from_raw(raw).map_err(serde::de::Error::custom)
    }
}

/// Inverse-CDF draw. Zero-probability entries are never returned.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Fits the full chain from joint counts.
///
/// `object_tables[s]` holds category counts observed in scene type `s`; all
/// tables must share the same label order. Instance rows are uniform.
pub fn fit_scene_distribution(
    scene_table: &CategoryTable,
    object_tables: &[CategoryTable],
    instances_per_category: &[usize],
) -> Result<SceneDistribution> {
    if object_tables.len() != scene_table.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} object tables for {} scene types",
            object_tables.len(),
            scene_table.len()
        )));
    }
    let Some(first) = object_tables.first() else {
        return Err(Error::EmptyDistribution);
    };
    let category_labels = first.labels().to_vec();
    for (s, t) in object_tables.iter().enumerate() {
        if t.labels() != category_labels.as_slice() {
            return Err(Error::DimensionMismatch(format!(
                "object table {s} has a different category list"
            )));
        }
    }
    if instances_per_category.len() != category_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} instance counts for {} categories",
            instances_per_category.len(),
            category_labels.len()
        )));
    }
    if let Some(c) = instances_per_category.iter().position(|&n| n == 0) {
        return Err(Error::invalid(
            format!("instances_per_category[{c}]"),
            "each category needs at least one instance",
        ));
    }
    let scene_prior = fit_categorical(scene_table)?;
    let rows = object_tables
        .iter()
        .enumerate()
        .map(|(s, t)| {
            fit_categorical(t).map_err(|_| {
                Error::AllZeroCounts(format!("object table for scene {:?}", scene_table.labels[s]))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let instances = instances_per_category
        .iter()
        .map(|&n| vec![1.0 / n as f64; n])
        .collect();
    SceneDistribution::new(
        scene_table.labels().to_vec(),
        category_labels,
        scene_prior,
        rows,
        instances,
        scannet::DEFAULT_EPSILON,
    )
}

/// Occurrence counts as read from JSON.
///
/// ```json
/// {
///   "scenes": [["kitchen", 3], ["office", 2]],
///   "categories": ["chair", "table", "stove"],
///   "object_counts": [[4, 1, 2], [6, 3, 0]],
///   "instances_per_category": [8, 8, 4],
///   "epsilon": 0.1
/// }
/// ```
///
/// `object_counts[s]` holds category counts observed in scene type `s`. When
/// it is omitted, `category_counts` (one marginal count per category) is
/// spread over scene types in proportion to the scene prior, giving every
/// scene type the same category row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsFile {
    pub scenes: Vec<(String, u64)>,
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_counts: Option<Vec<Vec<u64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_counts: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances_per_category: Option<Vec<usize>>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    scannet::DEFAULT_EPSILON
}

impl CountsFile {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid("counts", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Maximum-likelihood fit of the whole chain.
    pub fn fit(&self) -> Result<SceneDistribution> {
        let scene_table = CategoryTable::from_pairs(self.scenes.iter().map(|(l, c)| (l.as_str(), *c)))?;
        let rows = match (&self.object_counts, &self.category_counts) {
            (Some(rows), None) => rows.clone(),
            (None, Some(marginal)) => vec![marginal.clone(); scene_table.len()],
            _ => {
                return Err(Error::invalid(
                    "counts",
                    "exactly one of object_counts and category_counts is required",
                ))
            }
        };
        let object_tables = rows
            .into_iter()
            .map(|r| CategoryTable::new(self.categories.clone(), r))
            .collect::<Result<Vec<_>>>()?;
        let instances = self
            .instances_per_category
            .clone()
            .unwrap_or_else(|| vec![scannet::DEFAULT_INSTANCES_PER_CATEGORY; self.categories.len()]);
        fit_scene_distribution(&scene_table, &object_tables, &instances)?.with_epsilon(self.epsilon)
    }

    /// The bundled scene and object marginals.
    pub fn scannet() -> Self {
        let objects = scannet::object_table();
        Self {
            scenes: scannet::SCENE_COUNTS.iter().map(|&(l, c)| (l.to_string(), c)).collect(),
            categories: objects.labels().to_vec(),
            object_counts: None,
            category_counts: Some(objects.counts().to_vec()),
            instances_per_category: None,
            epsilon: scannet::DEFAULT_EPSILON,
        }
    }
}

/// Bundled defaults built from the ScanNetV2 scene and object marginals.
pub fn load_default_scannet_parameters() -> SceneDistribution {
    scannet::default_distribution().expect("bundled parameters are valid")
}
