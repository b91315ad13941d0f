//! Scene drafts (type plus object draws) and their realisation as labelled point clouds.

pub mod assets;
mod transform;

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::SceneDistribution;
use crate::rng::{derive_seed, rng_from_seed, STREAM_LAYOUT_A, STREAM_LAYOUT_B, STREAM_SPEC};
use crate::{Error, Point, Result};

pub use assets::{procedural_asset, AssetSource, DirectoryAssets, ProceduralAssets};
pub use transform::Transform;

/// Per-point label of floor-slab points; objects are labelled `0..K`.
pub const FLOOR_LABEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDraw {
    pub category: usize,
    pub instance: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_type: usize,
    pub objects: Vec<ObjectDraw>,
}

/// Draws a scene type, then `n_objects` ε-greedy categories and uniform
/// instances.
pub fn sample_scene_spec(dist: &SceneDistribution, n_objects: usize, seed: u64) -> Result<SceneSpec> {
    if dist.num_scene_types() == 0 || dist.num_categories() == 0 {
        return Err(Error::EmptyDistribution);
    }
    if n_objects == 0 {
        return Err(Error::invalid("n_objects", "at least one object per scene"));
    }
    let mut rng = rng_from_seed(seed);
    let scene_type = dist.sample_scene_type(&mut rng);
    let objects = (0..n_objects)
        .map(|_| {
            let category = dist.sample_category(scene_type, &mut rng);
            let instance = dist.sample_instance(category, &mut rng);
            ObjectDraw { category, instance }
        })
        .collect();
    Ok(SceneSpec {
        scene_type,
        objects,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutParams {
    /// Floor extent in x and y, centered at the origin.
    pub room_size: [f64; 2],
    pub scale_range: [f64; 2],
    /// Full SO(3) rotations instead of yaw only.
    pub full_rotation: bool,
    /// Placement attempts per object before giving up.
    pub max_attempts: usize,
    /// Grid spacing of an optional floor slab.
    pub floor_spacing: Option<f64>,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            room_size: [6.0, 6.0],
            scale_range: [0.9, 1.1],
            full_rotation: false,
            max_attempts: 1000,
            floor_spacing: None,
        }
    }
}

impl LayoutParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.room_size[0] > 0.0 && self.room_size[1] > 0.0) {
            return Err(Error::invalid("layout.room_size", "must be positive"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("layout.scale_range", "need 0 < lo <= hi"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("layout.max_attempts", "must be at least 1"));
        }
        if let Some(s) = self.floor_spacing {
            if !(s > 0.0) {
                return Err(Error::invalid("layout.floor_spacing", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub category: usize,
    pub instance: usize,
    /// Object-frame points; after occlusion only the surviving subset.
    pub canonical: Vec<Point>,
    pub transform: Transform,
}

impl ObjectInstance {
    pub fn world_points(&self) -> impl Iterator<Item = Point> + '_ {
        self.canonical.iter().map(|p| self.transform.apply(p))
    }
}

/// A realised scene: objects in order, their merged world-space cloud
/// (object points in object order, then floor points) and per-point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInstance {
    pub scene_type: usize,
    pub objects: Vec<ObjectInstance>,
    pub points: Vec<Point>,
    pub labels: Vec<u32>,
}

impl SceneInstance {
    /// Builds the merged cloud from the objects plus optional floor points.
    pub fn assemble(scene_type: usize, objects: Vec<ObjectInstance>, floor: &[Point]) -> Self {
        let n: usize = objects.iter().map(|o| o.canonical.len()).sum::<usize>() + floor.len();
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (k, o) in objects.iter().enumerate() {
            points.extend(o.world_points());
            labels.extend(std::iter::repeat_n(k as u32, o.canonical.len()));
        }
        points.extend_from_slice(floor);
        labels.extend(std::iter::repeat_n(FLOOR_LABEL, floor.len()));
        Self {
            scene_type,
            objects,
            points,
            labels,
        }
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn floor_points(&self) -> usize {
        self.labels.iter().filter(|&&l| l == FLOOR_LABEL).count()
    }

    /// Indices of points belonging to object `k`.
    pub fn object_indices(&self, k: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k as u32)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn foreground_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != FLOOR_LABEL)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        Aabb::of(self.points.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn of<'a>(points: impl IntoIterator<Item = &'a Point>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        Some(it.fold(Aabb { min: first, max: first }, |b, p| Aabb {
            min: b.min.inf(p),
            max: b.max.sup(p),
        }))
    }

    /// Closed-box intersection test.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    fn intersects_xy(&self, other: &Aabb) -> bool {
        (0..2).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    fn translated(&self, t: &Vector3<f64>) -> Aabb {
        Aabb {
            min: self.min + t,
            max: self.max + t,
        }
    }
}

fn random_rotation<R: Rng>(rng: &mut R, full: bool) -> UnitQuaternion<f64> {
    if full {
        let v = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(v))
    } else {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..std::f64::consts::TAU))
    }
}

fn floor_grid(room: [f64; 2], spacing: f64) -> Vec<Point> {
    let nx = (room[0] / spacing).floor() as usize + 1;
    let ny = (room[1] / spacing).floor() as usize + 1;
    let mut pts = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            pts.push(Point::new(
                -room[0] / 2.0 + i as f64 * spacing,
                -room[1] / 2.0 + j as f64 * spacing,
                0.0,
            ));
        }
    }
    pts
}

/// Places each object of `spec` with a random rotation, scale and
/// floor-plane position so that no two footprints overlap.
pub fn realize_scene(
    spec: &SceneSpec,
    assets: &dyn AssetSource,
    layout: &LayoutParams,
    seed: u64,
) -> Result<SceneInstance> {
    layout.validate()?;
    let mut rng = rng_from_seed(seed);
    let [lx, ly] = layout.room_size;
    let [smin, smax] = layout.scale_range;
    let mut placed: Vec<Aabb> = Vec::with_capacity(spec.objects.len());
    let mut objects = Vec::with_capacity(spec.objects.len());
    for (k, draw) in spec.objects.iter().enumerate() {
        let canonical = assets.points(draw.category, draw.instance)?;
        let mut done = None;
        for _ in 0..layout.max_attempts {
            let q = random_rotation(&mut rng, layout.full_rotation);
            let scale = if smax > smin { rng.random_range(smin..=smax) } else { smin };
            let posed = Transform::from_quaternion(q, Vector3::zeros(), scale);
            let local = Aabb::of(canonical.iter().map(|p| posed.apply(p)).collect::<Vec<_>>().iter())
                .ok_or(Error::EmptySet)?;
            let (x_lo, x_hi) = (-lx / 2.0 - local.min.x, lx / 2.0 - local.max.x);
            let (y_lo, y_hi) = (-ly / 2.0 - local.min.y, ly / 2.0 - local.max.y);
            if x_lo > x_hi || y_lo > y_hi {
                continue;
            }
            let t = Vector3::new(
                rng.random_range(x_lo..=x_hi),
                rng.random_range(y_lo..=y_hi),
                -local.min.z,
            );
            let bbox = local.translated(&t);
            if placed.iter().all(|b| !b.intersects_xy(&bbox)) {
                done = Some((posed.with_translation(t), bbox));
                break;
            }
        }
        let Some((transform, bbox)) = done else {
            return Err(Error::PlacementFailure {
                object: k,
                attempts: layout.max_attempts,
            });
        };
        placed.push(bbox);
        objects.push(ObjectInstance {
            category: draw.category,
            instance: draw.instance,
            canonical: canonical.to_vec(),
            transform,
        });
    }
    let floor = layout
        .floor_spacing
        .map(|s| floor_grid(layout.room_size, s))
        .unwrap_or_default();
    Ok(SceneInstance::assemble(spec.scene_type, objects, &floor))
}

/// Two independent layouts of one object draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub spec: SceneSpec,
    pub scene_a: SceneInstance,
    pub scene_b: SceneInstance,
}

impl ScenePair {
    pub fn categories(&self) -> Vec<usize> {
        self.spec.objects.iter().map(|o| o.category).collect()
    }
}

pub fn make_scene_pair(
    dist: &SceneDistribution,
    n_objects: usize,
    assets: &dyn AssetSource,
    layout: &LayoutParams,
    seed: u64,
) -> Result<ScenePair> {
    let spec = sample_scene_spec(dist, n_objects, derive_seed(seed, STREAM_SPEC))?;
    let scene_a = realize_scene(&spec, assets, layout, derive_seed(seed, STREAM_LAYOUT_A))?;
    let scene_b = realize_scene(&spec, assets, layout, derive_seed(seed, STREAM_LAYOUT_B))?;
    Ok(ScenePair {
        spec,
        scene_a,
        scene_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{load_default_scannet_parameters, SceneDistribution};
    use std::sync::Arc;

    struct Cubes;

    impl AssetSource for Cubes {
        fn points(&self, _: usize, _: usize) -> Result<Arc<Vec<Point>>> {
            let pts = (0..8)
                .map(|i| {
                    Point::new(
                        (i & 1) as f64 - 0.5,
                        ((i >> 1) & 1) as f64 - 0.5,
                        ((i >> 2) & 1) as f64 - 0.5,
                    )
                })
                .collect();
            Ok(Arc::new(pts))
        }
    }

    struct SmallCube;

    impl AssetSource for SmallCube {
        fn points(&self, c: usize, i: usize) -> Result<Arc<Vec<Point>>> {
            let p = Cubes.points(c, i)?;
            Ok(Arc::new(p.iter().map(|v| v * 0.2).collect()))
        }
    }

    fn two_cats(p: [f64; 2], eps: f64) -> SceneDistribution {
        SceneDistribution::new(
            vec!["s".into()],
            vec!["a".into(), "b".into()],
            vec![1.0],
            vec![p.to_vec()],
            vec![vec![1.0], vec![1.0]],
            eps,
        )
        .unwrap()
    }

    fn procedural() -> ProceduralAssets {
        let d = load_default_scannet_parameters();
        ProceduralAssets::new(d.category_labels().to_vec(), 128).unwrap()
    }

    #[test]
    fn degenerate_row_without_exploration() {
        let d = two_cats([0.0, 1.0], 0.0);
        let spec = sample_scene_spec(&d, 500, 4).unwrap();
        assert!(spec.objects.iter().all(|o| o.category == 1));
    }

    #[test]
    fn pure_exploration_is_uniform() {
        let d = two_cats([1.0, 0.0], 1.0);
        let n = 50_000;
        let spec = sample_scene_spec(&d, n, 9).unwrap();
        let ones = spec.objects.iter().filter(|o| o.category == 1).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones - n as f64 / 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn epsilon_mixture_frequency() {
        let d = two_cats([0.8, 0.2], 0.1);
        let spec = sample_scene_spec(&d, 100_000, 21).unwrap();
        let f = spec.objects.iter().filter(|o| o.category == 0).count() as f64 / 1e5;
        assert!((f - 0.77).abs() < 0.01, "{f}");
    }

    #[test]
    fn zero_objects_rejected() {
        let d = two_cats([0.5, 0.5], 0.1);
        assert!(sample_scene_spec(&d, 0, 1).is_err());
    }

    #[test]
    fn single_object_inside_unit_room() {
        let layout = LayoutParams {
            room_size: [1.0, 1.0],
            scale_range: [1.0, 1.0],
            ..Default::default()
        };
        let spec = SceneSpec {
            scene_type: 0,
            objects: vec![ObjectDraw { category: 0, instance: 0 }],
        };
        for seed in 0..20 {
            let s = realize_scene(&spec, &SmallCube, &layout, seed).unwrap();
            let t = s.objects[0].transform.translation();
            assert!(t.x.abs() <= 0.5 && t.y.abs() <= 0.5);
            for p in &s.points {
                assert!(p.x.abs() <= 0.5 + 1e-12 && p.y.abs() <= 0.5 + 1e-12 && p.z >= -1e-12);
            }
        }
    }

    #[test]
    fn two_cubes_disjoint_and_failure_reported() {
        let spec = SceneSpec {
            scene_type: 0,
            objects: vec![ObjectDraw { category: 0, instance: 0 }; 2],
        };
        let layout = LayoutParams {
            room_size: [4.0, 4.0],
            ..Default::default()
        };
        for seed in 0..20 {
            let s = realize_scene(&spec, &Cubes, &layout, seed).unwrap();
            let boxes: Vec<Aabb> = (0..2)
                .map(|k| Aabb::of(s.objects[k].world_points().collect::<Vec<_>>().iter()).unwrap())
                .collect();
            assert!(!boxes[0].intersects(&boxes[1]));
        }
        let tight = LayoutParams {
            room_size: [1.2, 1.2],
            scale_range: [1.0, 1.0],
            max_attempts: 50,
            ..Default::default()
        };
        let err = realize_scene(&spec, &Cubes, &tight, 0).unwrap_err();
        assert!(matches!(err, Error::PlacementFailure { object: 1, attempts: 50 }));
    }

    #[test]
    fn crowded_room_never_overlaps() {
        let d = load_default_scannet_parameters();
        let assets = procedural();
        let layout = LayoutParams::default();
        let mut placed = 0;
        for seed in 0..100 {
            let spec = sample_scene_spec(&d, 20, seed).unwrap();
            let s = match realize_scene(&spec, &assets, &layout, seed + 1000) {
                Ok(s) => s,
                Err(Error::PlacementFailure { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            placed += 1;
            let boxes: Vec<Aabb> = (0..s.num_objects())
                .map(|k| Aabb::of(s.objects[k].world_points().collect::<Vec<_>>().iter()).unwrap())
                .collect();
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    assert!(!boxes[i].intersects(&boxes[j]), "seed {seed}: {i} and {j}");
                }
            }
        }
        assert!(placed >= 50, "only {placed} of 100 crowded scenes placed");
    }

    #[test]
    fn merged_cloud_matches_transforms() {
        let d = load_default_scannet_parameters();
        let pair = make_scene_pair(&d, 6, &procedural(), &LayoutParams::default(), 5).unwrap();
        for scene in [&pair.scene_a, &pair.scene_b] {
            let mut seen = vec![false; scene.num_objects()];
            for (p, &l) in scene.points.iter().zip(&scene.labels) {
                seen[l as usize] = true;
                let _ = p;
            }
            assert!(seen.iter().all(|&s| s));
            for (k, o) in scene.objects.iter().enumerate() {
                let idx = scene.object_indices(k);
                assert_eq!(idx.len(), o.canonical.len());
                for (i, c) in idx.iter().zip(&o.canonical) {
                    let expect = o.transform.scale() * (o.transform.rotation() * c) + o.transform.translation();
                    assert!((scene.points[*i] - expect).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pair_shares_draw_and_maps_objects() {
        let d = load_default_scannet_parameters();
        let layout = LayoutParams::default();
        let pair = make_scene_pair(&d, 8, &procedural(), &layout, 77).unwrap();
        let again = make_scene_pair(&d, 8, &procedural(), &layout, 77).unwrap();
        assert_eq!(pair, again);
        for (a, b) in pair.scene_a.objects.iter().zip(&pair.scene_b.objects) {
            assert_eq!(a.instance, b.instance);
            assert_eq!(a.category, b.category);
            assert_ne!(a.transform, b.transform);
            let map = b.transform.compose(&a.transform.inverse());
            for (pa, pb) in a.world_points().zip(b.world_points()) {
                assert!((map.apply(&pa) - pb).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn floor_slab_is_labelled() {
        let d = load_default_scannet_parameters();
        let layout = LayoutParams {
            floor_spacing: Some(0.5),
            ..Default::default()
        };
        let spec = sample_scene_spec(&d, 3, 1).unwrap();
        let s = realize_scene(&spec, &procedural(), &layout, 2).unwrap();
        assert_eq!(s.floor_points(), 13 * 13);
        assert_eq!(s.foreground_indices().len(), 3 * 128);
    }

    #[test]
    fn full_rotation_transforms_are_valid() {
        let d = load_default_scannet_parameters();
        let layout = LayoutParams {
            full_rotation: true,
            ..Default::default()
        };
        let spec = sample_scene_spec(&d, 5, 3).unwrap();
        let s = realize_scene(&spec, &procedural(), &layout, 4).unwrap();
        for o in &s.objects {
            let t = &o.transform;
            assert!(Transform::new(*t.rotation(), *t.translation(), t.scale()).is_ok());
        }
        assert!(s.points.iter().all(|p| p.z >= -1e-9));
    }
}
