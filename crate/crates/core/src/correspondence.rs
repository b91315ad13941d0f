//! Seed sampling and relaxed object-aware matching between paired scenes.
//!
//! A seed of scene A on object `k` is mapped into scene B with
//! `T_k^B · (T_k^A)^{-1}` and paired with the nearest candidate of B lying on
//! the same object. Pairs whose residual distance is not below `θ` are
//! dropped, which masks counterparts removed by occlusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::scenegen::{SceneInstance, Transform, FLOOR_LABEL};
use crate::{Error, Execution, Point, Result};

pub const DEFAULT_SEEDS: usize = 100;
pub const DEFAULT_THETA: f64 = 0.1;

/// Greedy farthest point sampling from a fixed start index. Ties go to the
/// lowest index.
pub fn farthest_point_sample_from(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    if points.is_empty() || m > points.len() {
        return Err(Error::TooFewPoints {
            requested: m,
            available: points.len(),
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(m);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut current = start;
    for _ in 0..m {
        chosen.push(current);
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, (p, d)) in points.iter().zip(dist.iter_mut()).enumerate() {
            let dd = (p - c).norm_squared();
            if dd < *d {
                *d = dd;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
    }
    Ok(chosen)
}

/// FPS with a seeded random start.
pub fn farthest_point_sample(points: &[Point], m: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() || m > points.len() {
        return Err(Error::TooFewPoints {
            requested: m,
            available: points.len(),
        });
    }
    let start = rng_from_seed(seed).random_range(0..points.len());
    farthest_point_sample_from(points, m, start)
}

/// Seed points of a scene with their object labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    /// Indices into the scene's merged cloud.
    pub indices: Vec<usize>,
    pub coords: Vec<Point>,
    pub objects: Vec<u32>,
}

impl SeedSet {
    pub fn from_indices(scene: &SceneInstance, indices: Vec<usize>) -> Result<Self> {
        let mut coords = Vec::with_capacity(indices.len());
        let mut objects = Vec::with_capacity(indices.len());
        for &i in &indices {
            let (Some(p), Some(&l)) = (scene.points.get(i), scene.labels.get(i)) else {
                return Err(Error::invalid("seeds", format!("index {i} out of range")));
            };
            if l == FLOOR_LABEL {
                return Err(Error::invalid("seeds", format!("index {i} lies on the floor")));
            }
            coords.push(*p);
            objects.push(l);
        }
        Ok(Self {
            indices,
            coords,
            objects,
        })
    }

    /// FPS over foreground points only.
    pub fn sample(scene: &SceneInstance, m: usize, seed: u64) -> Result<Self> {
        let fg = scene.foreground_indices();
        let pts: Vec<Point> = fg.iter().map(|&i| scene.points[i]).collect();
        let picked = farthest_point_sample(&pts, m, seed)?;
        Self::from_indices(scene, picked.into_iter().map(|i| fg[i]).collect())
    }

    /// Every foreground point as a candidate.
    pub fn all_foreground(scene: &SceneInstance) -> Self {
        Self::from_indices(scene, scene.foreground_indices()).expect("foreground indices are valid")
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Maps a point of scene A into scene B: `t_b(t_a^{-1}(p))`.
pub fn translate_seed(p: &Point, t_a: &Transform, t_b: &Transform) -> Point {
    t_b.apply(&t_a.apply_inverse(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub a_index: usize,
    pub b_index: usize,
    pub distance: f64,
    pub object_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub theta: f64,
    pub pairs: Vec<PointMatch>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pairs every seed of A with its nearest same-object candidate in B.
/// Several A seeds may share one B point.
pub fn match_points(
    scene_a: &SceneInstance,
    scene_b: &SceneInstance,
    seeds_a: &SeedSet,
    candidates_b: &SeedSet,
    theta: f64,
    exec: Execution,
) -> Result<MatchSet> {
    if !(theta > 0.0) {
        return Err(Error::invalid("theta", format!("{theta} must be positive")));
    }
    if scene_a.num_objects() != scene_b.num_objects() {
        return Err(Error::DimensionMismatch(format!(
            "scene A has {} objects, scene B has {}",
            scene_a.num_objects(),
            scene_b.num_objects()
        )));
    }
    let mut by_object: Vec<Vec<usize>> = vec![Vec::new(); scene_b.num_objects()];
    for (slot, &obj) in candidates_b.objects.iter().enumerate() {
        if let Some(list) = by_object.get_mut(obj as usize) {
            list.push(slot);
        }
    }
    let found = exec.map(seeds_a.len(), |i| {
        let obj = seeds_a.objects[i] as usize;
        let target = translate_seed(
            &seeds_a.coords[i],
            &scene_a.objects[obj].transform,
            &scene_b.objects[obj].transform,
        );
        let mut best: Option<(f64, usize)> = None;
        for &slot in &by_object[obj] {
            let d = (candidates_b.coords[slot] - target).norm();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, slot));
            }
        }
        best.filter(|&(d, _)| d < theta).map(|(d, slot)| PointMatch {
            a_index: seeds_a.indices[i],
            b_index: candidates_b.indices[slot],
            distance: d,
            object_id: obj as u32,
        })
    });
    Ok(MatchSet {
        theta,
        pairs: found.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_default_scannet_parameters;
    use crate::occlusion::{occlude_scene, occlude_with};
    use crate::scenegen::{make_scene_pair, LayoutParams, ProceduralAssets, ScenePair};
    use nalgebra::{UnitQuaternion, Vector3};

    fn random_points(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| Point::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    fn min_pairwise(points: &[Point], idx: &[usize]) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..idx.len() {
            for j in i + 1..idx.len() {
                m = m.min((points[idx[i]] - points[idx[j]]).norm());
            }
        }
        m
    }

    fn pair(n_objects: usize, seed: u64) -> ScenePair {
        let d = load_default_scannet_parameters();
        let assets = ProceduralAssets::new(d.category_labels().to_vec(), 128).unwrap();
        make_scene_pair(&d, n_objects, &assets, &LayoutParams::default(), seed).unwrap()
    }

    #[test]
    fn fps_exhaustion() {
        let pts = random_points(30, 1);
        let mut got = farthest_point_sample(&pts, 30, 5).unwrap();
        got.sort();
        assert_eq!(got, (0..30).collect::<Vec<_>>());
        assert!(matches!(
            farthest_point_sample(&pts, 31, 5),
            Err(Error::TooFewPoints { requested: 31, available: 30 })
        ));
        assert!(farthest_point_sample(&[], 0, 5).is_err());
    }

    #[test]
    fn fps_collinear() {
        let pts = [0.0, 1.0, 10.0].map(|x| Point::new(x, 0.0, 0.0));
        assert_eq!(farthest_point_sample_from(&pts, 2, 0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fps_ties_lowest_index() {
        let pts = [0.0, -1.0, 1.0].map(|x| Point::new(x, 0.0, 0.0));
        assert_eq!(farthest_point_sample_from(&pts, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_spreads_better_than_random_subsets() {
        let pts = random_points(200, 2);
        let fps = farthest_point_sample(&pts, 50, 3).unwrap();
        let fps_min = min_pairwise(&pts, &fps);
        let mut rng = rng_from_seed(4);
        for _ in 0..100 {
            let subset = rand::seq::index::sample(&mut rng, 200, 50).into_vec();
            assert!(fps_min >= min_pairwise(&pts, &subset));
        }
    }

    #[test]
    fn translate_identity_and_pure_translation() {
        let p = Point::new(0.3, -1.0, 2.0);
        let t = Transform::from_yaw(0.7, Vector3::new(1.0, 2.0, 0.0), 1.05);
        assert!((translate_seed(&p, &t, &t) - p).norm() < 1e-12);
        let shift = Transform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(
            translate_seed(&p, &Transform::identity(), &shift),
            p + Vector3::new(1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn translate_via_canonical_coordinates() {
        let mut rng = rng_from_seed(8);
        for _ in 0..100 {
            let mk = |rng: &mut crate::rng::SceneRng| {
                Transform::from_quaternion(
                    UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random()),
                    Vector3::new(rng.random(), rng.random(), rng.random()) * 4.0,
                    rng.random_range(0.8..1.2),
                )
            };
            let (ta, tb) = (mk(&mut rng), mk(&mut rng));
            let p = Point::new(rng.random(), rng.random(), rng.random());
            let got = translate_seed(&ta.apply(&p), &ta, &tb);
            assert!((got - tb.apply(&p)).norm() < 1e-9);
        }
    }

    /// Exhaustive nearest neighbour over all B candidates of the same object.
    fn oracle(pair: &ScenePair, a: &SceneInstance, b: &SceneInstance, seeds: &SeedSet, cand: &SeedSet, theta: f64) -> Vec<PointMatch> {
        let _ = pair;
        let mut out = Vec::new();
        for i in 0..seeds.len() {
            let k = seeds.objects[i] as usize;
            let target = b.objects[k].transform.apply(&a.objects[k].transform.apply_inverse(&seeds.coords[i]));
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..cand.len() {
                if cand.objects[j] as usize == k {
                    let d = (cand.coords[j] - target).norm();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
            }
            if best.1 != usize::MAX && best.0 < theta {
                out.push(PointMatch {
                    a_index: seeds.indices[i],
                    b_index: cand.indices[best.1],
                    distance: best.0,
                    object_id: k as u32,
                });
            }
        }
        out
    }

    #[test]
    fn exact_counterparts_match_at_zero() {
        let p = pair(6, 1);
        let seeds = SeedSet::sample(&p.scene_a, 100, 2).unwrap();
        let cand = SeedSet::all_foreground(&p.scene_b);
        let m = match_points(&p.scene_a, &p.scene_b, &seeds, &cand, 0.1, Execution::Sequential).unwrap();
        assert_eq!(m.len(), 100);
        assert!(m.pairs.iter().all(|x| x.distance < 1e-9));
        for x in &m.pairs {
            assert_eq!(p.scene_a.labels[x.a_index], x.object_id);
            assert_eq!(p.scene_b.labels[x.b_index], x.object_id);
        }
    }

    #[test]
    fn removed_object_is_unmatched() {
        let p = pair(4, 3);
        // drop object 2 from B entirely by occluding it to two points then filtering candidates
        let seeds = SeedSet::sample(&p.scene_a, 60, 4).unwrap();
        let mut cand = SeedSet::all_foreground(&p.scene_b);
        let keep: Vec<usize> = (0..cand.len()).filter(|&i| cand.objects[i] != 2).collect();
        cand = SeedSet {
            indices: keep.iter().map(|&i| cand.indices[i]).collect(),
            coords: keep.iter().map(|&i| cand.coords[i]).collect(),
            objects: keep.iter().map(|&i| cand.objects[i]).collect(),
        };
        let m = match_points(&p.scene_a, &p.scene_b, &seeds, &cand, f64::INFINITY, Execution::Parallel).unwrap();
        assert!(m.pairs.iter().all(|x| x.object_id != 2));
        let expected = seeds.objects.iter().filter(|&&o| o != 2).count();
        assert_eq!(m.len(), expected);
    }

    #[test]
    fn occluded_pairs_agree_with_oracle() {
        for seed in 0..10 {
            let p = pair(8, 100 + seed);
            let (a, _) = occlude_scene(&p.scene_a, seed).unwrap();
            let (b, _) = occlude_scene(&p.scene_b, seed + 50).unwrap();
            let seeds = SeedSet::sample(&a, 100, seed).unwrap();
            for cand in [SeedSet::all_foreground(&b), SeedSet::sample(&b, 100, seed + 1).unwrap()] {
                let m = match_points(&a, &b, &seeds, &cand, 0.1, Execution::Parallel).unwrap();
                assert_eq!(m.pairs, oracle(&p, &a, &b, &seeds, &cand, 0.1));
                assert!(m.pairs.iter().all(|x| x.distance < 0.1));
            }
        }
    }

    #[test]
    fn occlusion_masks_some_seeds() {
        let p = pair(8, 5);
        let (b, _) = occlude_with(&p.scene_b, Point::new(0.0, 0.0, 1.0), &[0.5; 8]).unwrap();
        let seeds = SeedSet::sample(&p.scene_a, 100, 1).unwrap();
        let m = match_points(&p.scene_a, &b, &seeds, &SeedSet::all_foreground(&b), 0.01, Execution::Sequential).unwrap();
        assert!(m.len() < 100);
        assert!(!m.is_empty());
    }

    #[test]
    fn infinite_theta_matches_every_seed_with_candidates() {
        let p = pair(6, 9);
        let seeds = SeedSet::sample(&p.scene_a, 40, 1).unwrap();
        let cand = SeedSet::sample(&p.scene_b, 10, 2).unwrap();
        let m = match_points(&p.scene_a, &p.scene_b, &seeds, &cand, f64::INFINITY, Execution::Sequential).unwrap();
        let expected = seeds.objects.iter().filter(|o| cand.objects.contains(o)).count();
        assert_eq!(m.len(), expected);
    }

    #[test]
    fn rigid_motion_of_b_preserves_distances() {
        let p = pair(5, 11);
        let (b, _) = occlude_scene(&p.scene_b, 2).unwrap();
        let seeds = SeedSet::sample(&p.scene_a, 80, 3).unwrap();
        let cand = SeedSet::sample(&b, 80, 4).unwrap();
        let base = match_points(&p.scene_a, &b, &seeds, &cand, 0.5, Execution::Sequential).unwrap();

        let g = Transform::from_yaw(1.1, Vector3::new(3.0, -2.0, 0.5), 1.0);
        let mut moved = b.clone();
        for o in moved.objects.iter_mut() {
            o.transform = g.compose(&o.transform);
        }
        moved.points.iter_mut().for_each(|q| *q = g.apply(q));
        let cand_moved = SeedSet::from_indices(&moved, cand.indices.clone()).unwrap();
        let m = match_points(&p.scene_a, &moved, &seeds, &cand_moved, 0.5, Execution::Sequential).unwrap();
        assert_eq!(m.len(), base.len());
        for (x, y) in m.pairs.iter().zip(&base.pairs) {
            assert_eq!(x.b_index, y.b_index);
            assert!((x.distance - y.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn seeds_avoid_the_floor() {
        let d = load_default_scannet_parameters();
        let assets = ProceduralAssets::new(d.category_labels().to_vec(), 64).unwrap();
        let layout = LayoutParams {
            floor_spacing: Some(0.2),
            ..Default::default()
        };
        let p = make_scene_pair(&d, 5, &assets, &layout, 1).unwrap();
        let seeds = SeedSet::sample(&p.scene_a, 100, 2).unwrap();
        assert!(seeds.indices.iter().all(|&i| p.scene_a.labels[i] != FLOOR_LABEL));
        assert_eq!(seeds.len(), 100);
        let mut u = seeds.indices.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 100);
    }
}
