//! Canonical object point clouds.
//!
//! The procedural source builds each category from a few primitives (boxes,
//! cylinders, ellipsoids) whose dimensions are jittered per instance, then
//! samples points on their surfaces by area. Every cloud is centered so its
//! centroid sits at the origin.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::rng::{derive_seed, rng_from_seed, SceneRng, STREAM_ASSET};
use crate::{Error, Point, Result};

pub const MIN_OBJECT_POINTS: usize = 8;

/// Resolves `(category, instance)` to a canonical point cloud.
pub trait AssetSource: Send + Sync {
    fn points(&self, category: usize, instance: usize) -> Result<Arc<Vec<Point>>>;
}

pub fn center(points: &mut [Point]) {
    if points.is_empty() {
        return;
    }
    let c = points.iter().sum::<Point>() / points.len() as f64;
    points.iter_mut().for_each(|p| *p -= c);
}

pub fn centroid(points: &[Point]) -> Point {
    points.iter().sum::<Point>() / points.len().max(1) as f64
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Cuboid { center: Point, half: Point },
    /// Axis along z.
    Cylinder { center: Point, radius: f64, half_height: f64 },
    Ellipsoid { center: Point, radii: Point },
}

impl Primitive {
    fn cuboid(center: [f64; 3], size: [f64; 3]) -> Self {
        Primitive::Cuboid {
            center: Point::from(center),
            half: Point::from(size) / 2.0,
        }
    }

    fn cylinder(center: [f64; 3], radius: f64, height: f64) -> Self {
        Primitive::Cylinder {
            center: Point::from(center),
            radius,
            half_height: height / 2.0,
        }
    }

    fn ellipsoid(center: [f64; 3], radii: [f64; 3]) -> Self {
        Primitive::Ellipsoid {
            center: Point::from(center),
            radii: Point::from(radii),
        }
    }

    fn area(&self) -> f64 {
        match *self {
            Primitive::Cuboid { half, .. } => {
                8.0 * (half.x * half.y + half.y * half.z + half.x * half.z)
            }
            Primitive::Cylinder {
                radius,
                half_height,
                ..
            } => 2.0 * PI * radius * (2.0 * half_height) + 2.0 * PI * radius * radius,
            Primitive::Ellipsoid { radii, .. } => {
                // Knud Thomsen's approximation.
                let p = 1.6075;
                let (a, b, c) = (radii.x, radii.y, radii.z);
                4.0 * PI * (((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0).powf(1.0 / p)
            }
        }
    }

    fn sample(&self, rng: &mut SceneRng) -> Point {
        match *self {
            Primitive::Cuboid { center, half } => {
                let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if u < *a {
                        axis = i;
                        break;
                    }
                    u -= a;
                }
                let mut p = Point::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                p[axis] = if rng.random::<bool>() { 1.0 } else { -1.0 };
                center + p.component_mul(&half)
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let side = 2.0 * half_height;
                let cap = radius / 2.0;
                let theta = rng.random_range(0.0..2.0 * PI);
                if rng.random::<f64>() * (side + 2.0 * cap) < side {
                    center
                        + Point::new(
                            radius * theta.cos(),
                            radius * theta.sin(),
                            rng.random_range(-half_height..half_height),
                        )
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let z = if rng.random::<bool>() { half_height } else { -half_height };
                    center + Point::new(r * theta.cos(), r * theta.sin(), z)
                }
            }
            Primitive::Ellipsoid { center, radii } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let theta = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                center + Point::new(r * theta.cos(), r * theta.sin(), z).component_mul(&radii)
            }
        }
    }
}

fn legs(w: f64, d: f64, h: f64, t: f64) -> Vec<Primitive> {
    let (x, y) = (w / 2.0 - t / 2.0, d / 2.0 - t / 2.0);
    [(-x, -y), (x, -y), (-x, y), (x, y)]
        .iter()
        .map(|&(px, py)| Primitive::cuboid([px, py, h / 2.0], [t, t, h]))
        .collect()
}

fn jitter(rng: &mut SceneRng) -> f64 {
    rng.random_range(0.85..1.15)
}

/// Primitive composite for a category label. Dimensions in meters.
fn build_shape(label: &str, rng: &mut SceneRng) -> Vec<Primitive> {
    let (j1, j2, j3) = (jitter(rng), jitter(rng), jitter(rng));
    let boxed = |w: f64, d: f64, h: f64| {
        let (w, d, h) = (w * j1, d * j2, h * j3);
        vec![Primitive::cuboid([0.0, 0.0, h / 2.0], [w, d, h])]
    };
    match label {
        "chair" => {
            let (w, d, h) = (0.45 * j1, 0.45 * j2, 0.45 * j3);
            let mut p = legs(w, d, h, 0.04);
            p.push(Primitive::cuboid([0.0, 0.0, h], [w, d, 0.05]));
            p.push(Primitive::cuboid([0.0, d / 2.0, h + 0.25], [w, 0.05, 0.45]));
            p
        }
        "table" | "bench" => {
            let (w, d, h) = if label == "table" {
                (1.2 * j1, 0.7 * j2, 0.74 * j3)
            } else {
                (1.1 * j1, 0.35 * j2, 0.45 * j3)
            };
            let mut p = legs(w, d, h, 0.05);
            p.push(Primitive::cuboid([0.0, 0.0, h], [w, d, 0.04]));
            p
        }
        "sofa" => {
            let (w, d) = (1.7 * j1, 0.8 * j2);
            vec![
                Primitive::cuboid([0.0, 0.0, 0.2], [w, d, 0.4]),
                Primitive::cuboid([0.0, d / 2.0 - 0.1, 0.6 * j3], [w, 0.2, 0.4 * j3]),
                Primitive::cuboid([-w / 2.0 + 0.1, 0.0, 0.5], [0.2, d, 0.2]),
                Primitive::cuboid([w / 2.0 - 0.1, 0.0, 0.5], [0.2, d, 0.2]),
            ]
        }
        "bed" => {
            let (w, d) = (1.9 * j1, 1.4 * j2);
            vec![
                Primitive::cuboid([0.0, 0.0, 0.22], [w, d, 0.45 * j3]),
                Primitive::cuboid([-w / 2.0, 0.0, 0.5], [0.08, d, 0.9]),
                Primitive::ellipsoid([-w / 2.0 + 0.3, 0.0, 0.5], [0.15, 0.35, 0.08]),
            ]
        }
        "lamp" => {
            let h = 1.4 * j3;
            vec![
                Primitive::cylinder([0.0, 0.0, 0.02], 0.15 * j1, 0.04),
                Primitive::cylinder([0.0, 0.0, h / 2.0], 0.02, h),
                Primitive::cylinder([0.0, 0.0, h], 0.2 * j2, 0.25),
            ]
        }
        "trash can" => vec![Primitive::cylinder([0.0, 0.0, 0.22 * j3], 0.15 * j1, 0.45 * j3)],
        "mug" => vec![
            Primitive::cylinder([0.0, 0.0, 0.05 * j3], 0.04 * j1, 0.1 * j3),
            Primitive::ellipsoid([0.05 * j1, 0.0, 0.05], [0.02, 0.005, 0.03]),
        ],
        "bowl" => vec![Primitive::ellipsoid([0.0, 0.0, 0.04], [0.09 * j1, 0.09 * j2, 0.04 * j3])],
        "basket" => vec![Primitive::cylinder([0.0, 0.0, 0.15 * j3], 0.2 * j1, 0.3 * j3)],
        "clock" => vec![Primitive::ellipsoid([0.0, 0.0, 0.15], [0.15 * j1, 0.03, 0.15 * j1])],
        "pillow" => vec![Primitive::ellipsoid([0.0, 0.0, 0.06], [0.3 * j1, 0.2 * j2, 0.07 * j3])],
        "bag" => vec![Primitive::ellipsoid([0.0, 0.0, 0.2], [0.18 * j1, 0.1 * j2, 0.2 * j3])],
        "video display" => vec![
            Primitive::cuboid([0.0, 0.0, 0.45 * j3], [0.9 * j1, 0.05, 0.55 * j3]),
            Primitive::cuboid([0.0, 0.0, 0.08], [0.06, 0.06, 0.16]),
            Primitive::cuboid([0.0, 0.0, 0.01], [0.3, 0.2 * j2, 0.02]),
        ],
        "laptop" => vec![
            Primitive::cuboid([0.0, 0.0, 0.01], [0.34 * j1, 0.24 * j2, 0.02]),
            Primitive::cuboid([0.0, 0.12 * j2, 0.13 * j3], [0.34 * j1, 0.015, 0.24 * j3]),
        ],
        "bathtub" => {
            let (w, d, h, t) = (1.6 * j1, 0.75 * j2, 0.55 * j3, 0.06);
            vec![
                Primitive::cuboid([0.0, 0.0, t / 2.0], [w, d, t]),
                Primitive::cuboid([-w / 2.0, 0.0, h / 2.0], [t, d, h]),
                Primitive::cuboid([w / 2.0, 0.0, h / 2.0], [t, d, h]),
                Primitive::cuboid([0.0, -d / 2.0, h / 2.0], [w, t, h]),
                Primitive::cuboid([0.0, d / 2.0, h / 2.0], [w, t, h]),
            ]
        }
        "bookshelf" => {
            let (w, d, h) = (0.9 * j1, 0.35 * j2, 1.8 * j3);
            let mut p = vec![
                Primitive::cuboid([-w / 2.0, 0.0, h / 2.0], [0.03, d, h]),
                Primitive::cuboid([w / 2.0, 0.0, h / 2.0], [0.03, d, h]),
                Primitive::cuboid([0.0, d / 2.0, h / 2.0], [w, 0.02, h]),
            ];
            for k in 0..5 {
                let z = h * k as f64 / 4.0;
                p.push(Primitive::cuboid([0.0, 0.0, z], [w, d, 0.03]));
            }
            p
        }
        "piano" => vec![
            Primitive::cuboid([0.0, 0.1, 0.55 * j3], [1.45 * j1, 0.35 * j2, 1.1 * j3]),
            Primitive::cuboid([0.0, -0.15, 0.72], [1.45 * j1, 0.3, 0.06]),
        ],
        "guitar" => vec![
            Primitive::ellipsoid([0.0, 0.0, 0.25], [0.19 * j1, 0.06, 0.23 * j3]),
            Primitive::cuboid([0.0, 0.0, 0.75 * j3], [0.05, 0.03, 0.55 * j3]),
        ],
        "cabinet" => boxed(0.8, 0.5, 0.9),
        "microwave" => boxed(0.5, 0.35, 0.3),
        "printer" => boxed(0.45, 0.4, 0.3),
        "dishwasher" | "washer" => boxed(0.6, 0.6, 0.85),
        "stove" => boxed(0.75, 0.65, 0.9),
        "mailbox" => boxed(0.4, 0.3, 0.5),
        "loudspeaker" => boxed(0.25, 0.25, 0.4),
        "computer" => boxed(0.2, 0.45, 0.45),
        "telephone" => boxed(0.2, 0.18, 0.08),
        _ => {
            let s = rng.random_range(0.2..0.8);
            boxed(s, s * 0.8, s * 1.2)
        }
    }
}

pub fn procedural_points(label: &str, category: usize, instance: usize, n_points: usize) -> Vec<Point> {
    let mut rng = rng_from_seed(derive_seed(
        derive_seed(STREAM_ASSET, category as u64),
        instance as u64,
    ));
    let shape = build_shape(label, &mut rng);
    let areas: Vec<f64> = shape.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    let mut points: Vec<Point> = (0..n_points)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut k = shape.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if u < *a {
                    k = i;
                    break;
                }
                u -= a;
            }
            shape[k].sample(&mut rng)
        })
        .collect();
    center(&mut points);
    points
}

/// Built-in generator keyed by category label.
#[derive(Clone, Debug)]
pub struct ProceduralAssets {
    labels: Vec<String>,
    n_points: usize,
}

impl ProceduralAssets {
    pub fn new(labels: Vec<String>, n_points: usize) -> Result<Self> {
        if n_points < MIN_OBJECT_POINTS {
            return Err(Error::invalid(
                "points_per_object",
                format!("{n_points} < {MIN_OBJECT_POINTS}"),
            ));
        }
        Ok(Self { labels, n_points })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }
}

/// Canonical cloud for `(category, instance)` drawn from the procedural
/// generator; the category is resolved against `labels`.
pub fn procedural_asset(
    labels: &[String],
    category: usize,
    instance: usize,
    n_points: usize,
) -> Result<Vec<Point>> {
    let label = labels.get(category).ok_or(Error::UnknownCategory(category))?;
    if n_points < MIN_OBJECT_POINTS {
        return Err(Error::TooFewPoints {
            requested: MIN_OBJECT_POINTS,
            available: n_points,
        });
    }
    Ok(procedural_points(label, category, instance, n_points))
}

impl AssetSource for ProceduralAssets {
    fn points(&self, category: usize, instance: usize) -> Result<Arc<Vec<Point>>> {
        procedural_asset(&self.labels, category, instance, self.n_points).map(Arc::new)
    }
}

type AssetCache = Mutex<HashMap<(usize, usize), Arc<Vec<Point>>>>;

/// Loads `<root>/<category label>/<file>` where files are `.ply` or `.bin`
/// point clouds; instance `i` is the `i`-th file in name order.
pub struct DirectoryAssets {
    root: PathBuf,
    labels: Vec<String>,
    cache: AssetCache,
}

impl DirectoryAssets {
    pub fn new(root: impl Into<PathBuf>, labels: Vec<String>) -> Self {
        Self {
            root: root.into(),
            labels,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn instance_files(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("ply") | Some("bin")
                )
            })
            .collect();
        files.sort();
        Ok(files)
    }
}

impl AssetSource for DirectoryAssets {
    fn points(&self, category: usize, instance: usize) -> Result<Arc<Vec<Point>>> {
        if let Some(p) = self.cache.lock().unwrap().get(&(category, instance)) {
            return Ok(p.clone());
        }
        let label = self.labels.get(category).ok_or(Error::UnknownCategory(category))?;
        let dir = self.root.join(label);
        let files = Self::instance_files(&dir)?;
        let file = files.get(instance).ok_or_else(|| {
            Error::invalid(
                dir.display().to_string(),
                format!("instance {instance} requested but only {} files", files.len()),
            )
        })?;
        let mut points = crate::pipeline::io::read_point_cloud(file)?;
        if points.len() < MIN_OBJECT_POINTS {
            return Err(Error::Format {
                path: file.clone(),
                reason: format!("{} points, at least {MIN_OBJECT_POINTS} required", points.len()),
            });
        }
        center(&mut points);
        let points = Arc::new(points);
        self.cache
            .lock()
            .unwrap()
            .insert((category, instance), points.clone());
        Ok(points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::scannet::OBJECT_COUNTS;

    fn labels() -> Vec<String> {
        OBJECT_COUNTS.iter().map(|(l, _)| l.to_string()).collect()
    }

    #[test]
    fn deterministic_and_centered() {
        let l = labels();
        for c in 0..l.len() {
            let a = procedural_asset(&l, c, 3, 200).unwrap();
            let b = procedural_asset(&l, c, 3, 200).unwrap();
            assert_eq!(a, b);
            assert!(centroid(&a).norm() < 1e-6, "{}", l[c]);
            assert!(a.iter().all(|p| p.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn instances_differ() {
        let l = labels();
        for c in 0..l.len() {
            let a = procedural_asset(&l, c, 0, 64).unwrap();
            let b = procedural_asset(&l, c, 1, 64).unwrap();
            let max = a.iter().zip(&b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
            assert!(max > 0.0);
        }
    }

    #[test]
    fn unknown_category_and_small_n() {
        let l = labels();
        assert!(matches!(
            procedural_asset(&l, 99, 0, 64),
            Err(Error::UnknownCategory(99))
        ));
        assert!(procedural_asset(&l, 0, 0, 4).is_err());
        assert!(ProceduralAssets::new(l, 7).is_err());
    }

    #[test]
    fn directory_source_reads_and_centers() {
        let dir = tempfile::tempdir().unwrap();
        let cat = dir.path().join("cube");
        std::fs::create_dir(&cat).unwrap();
        let pts: Vec<Point> = (0..8)
            .map(|i| Point::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64 + 5.0))
            .collect();
        crate::pipeline::io::write_point_cloud(&cat.join("a.ply"), &pts, crate::pipeline::io::CloudFormat::AsciiPly)
            .unwrap();
        let src = DirectoryAssets::new(dir.path(), vec!["cube".into()]);
        let got = src.points(0, 0).unwrap();
        assert_eq!(got.len(), 8);
        assert!(centroid(&got).norm() < 1e-6);
        assert!(src.points(0, 1).is_err());
        assert!(matches!(src.points(1, 0), Err(Error::UnknownCategory(1))));
    }
}
