//! Viewpoint-based occlusion: for each object, drop the `⌊f·n⌋` points
//! furthest from a random viewpoint, with `f ~ U[0, 0.5]` drawn per object.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::scenegen::{ObjectInstance, SceneInstance, FLOOR_LABEL};
use crate::{Error, Point, Result};

pub const MAX_FRACTION: f64 = 0.5;
/// The viewpoint is drawn from the scene bounds grown by this fraction of
/// their extent (split evenly between both sides).
pub const VIEWPOINT_INFLATION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRecord {
    pub viewpoint: [f64; 3],
    pub fractions: Vec<f64>,
    /// Surviving indices within each object's point list, strictly increasing.
    pub kept: Vec<Vec<usize>>,
}

impl OcclusionRecord {
    pub fn removed(&self, object: usize, n_points: usize) -> usize {
        n_points - self.kept[object].len()
    }
}

/// Indices of `points` kept after removing the `⌊fraction·n⌋` furthest from
/// `viewpoint`. Equal distances keep the lower index first.
pub fn kept_indices(points: &[Point], viewpoint: &Point, fraction: f64) -> Vec<usize> {
    let n = points.len();
    let remove = ((fraction * n as f64).floor() as usize).min(n);
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - viewpoint).norm_squared(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order[..n - remove].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    kept
}

/// Applies fixed per-object fractions from a fixed viewpoint.
pub fn occlude_with(
    scene: &SceneInstance,
    viewpoint: Point,
    fractions: &[f64],
) -> Result<(SceneInstance, OcclusionRecord)> {
    if fractions.len() != scene.num_objects() {
        return Err(Error::DimensionMismatch(format!(
            "{} fractions for {} objects",
            fractions.len(),
            scene.num_objects()
        )));
    }
    let mut objects = Vec::with_capacity(scene.num_objects());
    let mut kept_all = Vec::with_capacity(scene.num_objects());
    for (k, (obj, &f)) in scene.objects.iter().zip(fractions).enumerate() {
        if obj.canonical.len() < 2 {
            return Err(Error::DegenerateObject {
                object: k,
                points: obj.canonical.len(),
            });
        }
        if !(0.0..=MAX_FRACTION).contains(&f) {
            return Err(Error::invalid(
                format!("fractions[{k}]"),
                format!("{f} outside [0, {MAX_FRACTION}]"),
            ));
        }
        let world: Vec<Point> = obj.world_points().collect();
        let kept = kept_indices(&world, &viewpoint, f);
        objects.push(ObjectInstance {
            category: obj.category,
            instance: obj.instance,
            canonical: kept.iter().map(|&i| obj.canonical[i]).collect(),
            transform: obj.transform.clone(),
        });
        kept_all.push(kept);
    }
    let floor: Vec<Point> = scene
        .points
        .iter()
        .zip(&scene.labels)
        .filter(|(_, &l)| l == FLOOR_LABEL)
        .map(|(p, _)| *p)
        .collect();
    let occluded = SceneInstance::assemble(scene.scene_type, objects, &floor);
    Ok((
        occluded,
        OcclusionRecord {
            viewpoint: viewpoint.into(),
            fractions: fractions.to_vec(),
            kept: kept_all,
        },
    ))
}

/// Random viewpoint in the inflated scene bounds and a random fraction per
/// object, then [`occlude_with`].
pub fn occlude_scene(scene: &SceneInstance, seed: u64) -> Result<(SceneInstance, OcclusionRecord)> {
    let bounds = scene.bounds().ok_or(Error::EmptySet)?;
    let pad = (bounds.max - bounds.min) * (VIEWPOINT_INFLATION / 2.0);
    let (lo, hi) = (bounds.min - pad, bounds.max + pad);
    let mut rng = rng_from_seed(seed);
    let viewpoint = Point::from_fn(|i, _| {
        if hi[i] > lo[i] {
            rng.random_range(lo[i]..=hi[i])
        } else {
            lo[i]
        }
    });
    let fractions: Vec<f64> = (0..scene.num_objects())
        .map(|_| rng.random_range(0.0..=MAX_FRACTION))
        .collect();
    occlude_with(scene, viewpoint, &fractions)
}
