//! Bundled ScanNetV2 marginals.
//!
//! Scene counts are out of 1513 scans; the 13 major scene types account for
//! 1480 of them and the remainder is kept as `Other` so the published
//! percentages are reproduced exactly. Object counts are the 29 major
//! categories.
//!
//! Only marginals are available, so the per-scene category rows are built by
//! masking each scene type to plausible categories and scaling the masked
//! joint table until both marginals match (iterative proportional fitting).

use super::{CategoryTable, SceneDistribution};
use crate::Result;

pub const SCENE_COUNTS: [(&str, u64); 14] = [
    ("Hotel", 273),
    ("Lounge", 224),
    ("Bathroom", 212),
    ("Room", 206),
    ("Office", 173),
    ("Kitchen", 108),
    ("Library", 67),
    ("Lobby", 54),
    ("Apartment", 40),
    ("Classroom", 37),
    ("Misc.", 35),
    ("Hallway", 32),
    ("Storage", 19),
    ("Other", 33),
];

pub const OBJECT_COUNTS: [(&str, u64); 29] = [
    ("chair", 4848),
    ("cabinet", 1798),
    ("trash can", 1375),
    ("table", 1368),
    ("pillow", 946),
    ("sofa", 503),
    ("lamp", 444),
    ("bed", 389),
    ("bag", 387),
    ("bookshelf", 253),
    ("computer", 246),
    ("video display", 220),
    ("mug", 166),
    ("telephone", 164),
    ("bathtub", 144),
    ("microwave", 141),
    ("laptop", 111),
    ("printer", 109),
    ("stove", 96),
    ("bench", 77),
    ("clock", 58),
    ("basket", 48),
    ("dishwasher", 43),
    ("loudspeaker", 43),
    ("washer", 42),
    ("piano", 39),
    ("mailbox", 35),
    ("guitar", 28),
    ("bowl", 24),
];

pub const DEFAULT_INSTANCES_PER_CATEGORY: usize = 8;
pub const DEFAULT_EPSILON: f64 = 0.1;

const ALL: &[&str] = &[];

/// Categories considered plausible per scene type. An empty list means every
/// category is allowed.
const SCENE_MASKS: [(&str, &[&str]); 14] = [
    (
        "Hotel",
        &[
            "chair", "cabinet", "trash can", "table", "pillow", "sofa", "lamp", "bed", "bag",
            "video display", "telephone", "mug", "clock", "loudspeaker", "laptop", "bowl",
            "basket", "microwave",
        ],
    ),
    (
        "Lounge",
        &[
            "chair", "cabinet", "trash can", "table", "pillow", "sofa", "lamp", "bag",
            "bookshelf", "video display", "mug", "telephone", "clock", "loudspeaker", "piano",
            "guitar", "bench", "laptop", "bowl", "basket",
        ],
    ),
    (
        "Bathroom",
        &[
            "chair", "cabinet", "trash can", "bathtub", "basket", "washer", "lamp", "bag", "mug",
            "clock",
        ],
    ),
    (
        "Room",
        &[
            "chair", "cabinet", "trash can", "table", "pillow", "sofa", "lamp", "bed", "bag",
            "bookshelf", "computer", "video display", "mug", "telephone", "laptop", "clock",
            "basket", "guitar", "loudspeaker", "piano", "bowl", "printer",
        ],
    ),
    (
        "Office",
        &[
            "chair", "cabinet", "trash can", "table", "lamp", "bag", "bookshelf", "computer",
            "video display", "mug", "telephone", "laptop", "printer", "clock", "loudspeaker",
            "mailbox", "sofa", "basket",
        ],
    ),
    (
        "Kitchen",
        &[
            "chair", "cabinet", "trash can", "table", "microwave", "stove", "dishwasher", "mug",
            "bowl", "basket", "washer", "clock", "telephone",
        ],
    ),
    (
        "Library",
        &[
            "chair", "cabinet", "trash can", "table", "bookshelf", "computer", "video display",
            "lamp", "bag", "laptop", "printer", "clock", "sofa", "bench",
        ],
    ),
    (
        "Lobby",
        &[
            "chair", "cabinet", "trash can", "table", "sofa", "lamp", "bench", "mailbox",
            "clock", "telephone", "video display", "bag", "piano",
        ],
    ),
    ("Apartment", ALL),
    (
        "Classroom",
        &[
            "chair", "table", "cabinet", "trash can", "computer", "video display", "bookshelf",
            "bag", "laptop", "clock", "printer", "loudspeaker", "piano",
        ],
    ),
    ("Misc.", ALL),
    (
        "Hallway",
        &[
            "chair", "cabinet", "trash can", "bench", "mailbox", "clock", "table", "lamp", "bag",
            "washer",
        ],
    ),
    (
        "Storage",
        &[
            "chair", "cabinet", "trash can", "bag", "basket", "table", "washer", "bookshelf",
            "printer",
        ],
    ),
    ("Other", ALL),
];

pub fn scene_table() -> CategoryTable {
    CategoryTable::from_pairs(SCENE_COUNTS.iter().map(|&(l, c)| (l, c)))
        .expect("bundled scene table is valid")
}

pub fn object_table() -> CategoryTable {
    CategoryTable::from_pairs(OBJECT_COUNTS.iter().map(|&(l, c)| (l, c)))
        .expect("bundled object table is valid")
}

fn mask() -> Vec<Vec<bool>> {
    SCENE_MASKS
        .iter()
        .map(|(_, allowed)| {
            OBJECT_COUNTS
                .iter()
                .map(|(cat, _)| allowed.is_empty() || allowed.contains(cat))
                .collect()
        })
        .collect()
}

/// Scale the masked joint table until its row sums equal `rows` and its
/// column sums equal `cols`. Returns the joint table.
pub(crate) fn proportional_fit(
    mask: &[Vec<bool>],
    rows: &[f64],
    cols: &[f64],
    max_iters: usize,
    tol: f64,
) -> Vec<Vec<f64>> {
    let mut joint: Vec<Vec<f64>> = mask
        .iter()
        .map(|r| r.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..max_iters {
        for (row, &target) in joint.iter_mut().zip(rows) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v *= target / s);
            }
        }
        let mut worst = 0.0f64;
        for (l, &target) in cols.iter().enumerate() {
            let s: f64 = joint.iter().map(|r| r[l]).sum();
            if s > 0.0 {
                joint.iter_mut().for_each(|r| r[l] *= target / s);
            }
            worst = worst.max(((s - target) / target).abs());
        }
        if worst < tol {
            break;
        }
    }
    joint
}

pub fn default_distribution() -> Result<SceneDistribution> {
    let scenes = scene_table();
    let objects = object_table();
    let prior = super::fit_categorical(&scenes)?;
    let marginal = super::fit_categorical(&objects)?;
    let joint = proportional_fit(&mask(), &prior, &marginal, 20_000, 1e-13);
    let rows = joint
        .iter()
        .zip(&prior)
        .map(|(row, &p)| {
            let s: f64 = row.iter().sum();
            debug_assert!((s - p).abs() < 1e-9);
            row.iter().map(|v| v / s).collect()
        })
        .collect();
    let instances = vec![DEFAULT_INSTANCES_PER_CATEGORY; objects.len()];
    SceneDistribution::new(
        scenes.labels().to_vec(),
        objects.labels().to_vec(),
        prior,
        rows,
        instances
            .iter()
            .map(|&n| vec![1.0 / n as f64; n])
            .collect(),
        DEFAULT_EPSILON,
    )
}
