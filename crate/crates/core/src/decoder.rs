//! Toy point encoder and coarse-to-fine completion decoder.
//!
//! The encoder is a shared per-point MLP whose hidden activations are
//! max-pooled per object and broadcast back before a linear feature layer,
//! followed by a linear projection head for the contrastive losses.
//!
//! The decoder predicts per-seed offsets of coordinates and features
//! (coarse completion) and then folds a `u × u` grid around every coarse
//! point (detail completion).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::correspondence::{farthest_point_sample, farthest_point_sample_from, MatchSet};
use crate::losses::{
    chamfer_pinned, object_level_loss, overall_loss, point_level_loss, LossReport, ObjectiveParams,
    PairFeatures, PairGrads, SceneFeatures, TermGradients,
};
use crate::nn::{gate_backward, gated_relu, Dense, TensorSet};
use crate::rng::rng_from_seed;
use crate::scenegen::SceneInstance;
use crate::{Error, Execution, Point, Result};

pub const DEFAULT_GRID_SIDE: usize = 3;
pub const DEFAULT_GRID_EXTENT: f64 = 0.05;

/// Layer sizes of the encoder and decoder heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_hidden: usize,
    /// Backbone feature width `s`.
    pub feature_dim: usize,
    /// Contrastive embedding width `d`.
    pub projection_dim: usize,
    pub offset_hidden: usize,
    pub fold_hidden: usize,
    /// Grid side `u`; every coarse point spawns `u²` detail points.
    pub grid_side: usize,
    /// Grid coordinates span `[-g, g]²`.
    pub grid_extent: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 64,
            feature_dim: 32,
            projection_dim: 128,
            offset_hidden: 64,
            fold_hidden: 64,
            grid_side: DEFAULT_GRID_SIDE,
            grid_extent: DEFAULT_GRID_EXTENT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("encoder_hidden", self.encoder_hidden),
            ("feature_dim", self.feature_dim),
            ("projection_dim", self.projection_dim),
            ("offset_hidden", self.offset_hidden),
            ("fold_hidden", self.fold_hidden),
            ("grid_side", self.grid_side),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name}"), "must be at least 1"));
            }
        }
        if !(self.grid_extent >= 0.0 && self.grid_extent.is_finite()) {
            return Err(Error::invalid(
                "model.grid_extent",
                format!("{} must be non-negative and finite", self.grid_extent),
            ));
        }
        Ok(())
    }
}

/// Shared per-point MLP with a per-object max-pool broadcast.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    /// `3 → H`, followed by ReLU.
    pub point: Dense,
    /// `2H → s` on `[a, maxpool(a)]`.
    pub mix: Dense,
    /// `s → d` projection head.
    pub project: Dense,
}

/// Encoder activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Backbone features, `n × s`.
    pub z: DMatrix<f64>,
    /// Projected features, `n × d`.
    pub h: DMatrix<f64>,
    input: DMatrix<f64>,
    gate: Vec<bool>,
    concat: DMatrix<f64>,
    group_of: Vec<usize>,
    /// Row index of the maximum per (group, hidden unit).
    argmax: Vec<Vec<usize>>,
}

fn groups(labels: &[u32]) -> (Vec<usize>, usize) {
    let mut keys: Vec<u32> = Vec::new();
    let group_of = labels
        .iter()
        .map(|l| match keys.iter().position(|k| k == l) {
            Some(g) => g,
            None => {
                keys.push(*l);
                keys.len() - 1
            }
        })
        .collect();
    (group_of, keys.len())
}

fn points_matrix(points: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 3, |i, j| points[i][j])
}

impl ToyEncoder {
    fn init<R: rand::Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            point: Dense::init(3, cfg.encoder_hidden, rng),
            mix: Dense::init(2 * cfg.encoder_hidden, cfg.feature_dim, rng),
            project: Dense::init(cfg.feature_dim, cfg.projection_dim, rng),
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            point: Dense::zeros(3, cfg.encoder_hidden),
            mix: Dense::zeros(2 * cfg.encoder_hidden, cfg.feature_dim),
            project: Dense::zeros(cfg.feature_dim, cfg.projection_dim),
        }
    }

    /// Points sharing a label (the floor included) form one pooling group.
    pub fn forward(&self, points: &[Point], labels: &[u32]) -> Result<EncoderOutput> {
        self.forward_pinned(points, labels, None)
    }

    /// Forward pass with the ReLU gate and pooling winners optionally pinned
    /// to those of an earlier pass on the same points.
    pub fn forward_pinned(&self, points: &[Point], labels: &[u32], pin: Option<&EncoderPattern>) -> Result<EncoderOutput> {
        if points.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        let hidden = self.point.fan_out();
        let input = points_matrix(points);
        let pre = self.point.forward(&input);
        let (act, gate) = gated_relu(&pre, pin.map(|p| p.gate.as_slice()));
        let (group_of, n_groups) = groups(labels);
        let argmax = match pin {
            Some(p) => p.argmax.clone(),
            None => {
                let mut argmax = vec![vec![usize::MAX; hidden]; n_groups];
                for (i, &g) in group_of.iter().enumerate() {
                    for j in 0..hidden {
                        let best = &mut argmax[g][j];
                        if *best == usize::MAX || act[(i, j)] > act[(*best, j)] {
                            *best = i;
                        }
                    }
                }
                argmax
            }
        };
        if argmax.len() != n_groups || gate.len() != pre.len() {
            return Err(Error::DimensionMismatch("pinned pattern does not fit the scene".into()));
        }
        let concat = DMatrix::from_fn(points.len(), 2 * hidden, |i, j| {
            if j < hidden {
                act[(i, j)]
            } else {
                act[(argmax[group_of[i]][j - hidden], j - hidden)]
            }
        });
        let z = self.mix.forward(&concat);
        let h = self.project.forward(&z);
        Ok(EncoderOutput {
            z,
            h,
            input,
            gate,
            concat,
            group_of,
            argmax,
        })
    }

    pub fn pattern(out: &EncoderOutput) -> EncoderPattern {
        EncoderPattern {
            gate: out.gate.clone(),
            argmax: out.argmax.clone(),
        }
    }

    /// Accumulates parameter gradients given `dL/dh` and an extra `dL/dz`.
    pub fn backward(&self, out: &EncoderOutput, dh: &DMatrix<f64>, dz_extra: Option<&DMatrix<f64>>, grad: &mut ToyEncoder) {
        let hidden = self.point.fan_out();
        let mut dz = self.project.backward(&out.z, dh, &mut grad.project);
        if let Some(extra) = dz_extra {
            dz += extra;
        }
        let dconcat = self.mix.backward(&out.concat, &dz, &mut grad.mix);
        let mut dact = dconcat.columns(0, hidden).into_owned();
        for (i, &g) in out.group_of.iter().enumerate() {
            for j in 0..hidden {
                dact[(out.argmax[g][j], j)] += dconcat[(i, hidden + j)];
            }
        }
        let dpre = gate_backward(&out.gate, &dact);
        self.point.backward(&out.input, &dpre, &mut grad.point);
    }
}

/// Offset head `φ_c` and folding head `φ_d`, both two-layer ReLU MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHeads {
    /// `(3+s) → H_c`.
    pub offset_hidden: Dense,
    /// `H_c → (3+s)`.
    pub offset_out: Dense,
    /// `(2+3+s) → H_d`.
    pub fold_hidden: Dense,
    /// `H_d → 3`.
    pub fold_out: Dense,
    pub grid_side: usize,
    pub grid_extent: f64,
}

/// Coarse and detailed completions for one set of seeds.
#[derive(Clone, Debug)]
pub struct ReconstructionOutput {
    pub y_coarse: Vec<Point>,
    /// `n × (3+s)`; the first three columns equal `y_coarse`.
    pub h_coarse: DMatrix<f64>,
    /// `u²n` points; block `i` holds the children of coarse point `i`.
    pub y_detail: Vec<Point>,
    input: DMatrix<f64>,
    offset_gate: Vec<bool>,
    offset_act: DMatrix<f64>,
    fold_input: DMatrix<f64>,
    fold_gate: Vec<bool>,
    fold_act: DMatrix<f64>,
}

impl DecoderHeads {
    fn init<R: rand::Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let width = 3 + cfg.feature_dim;
        Self {
            offset_hidden: Dense::init(width, cfg.offset_hidden, rng),
            offset_out: Dense::init(cfg.offset_hidden, width, rng),
            fold_hidden: Dense::init(2 + width, cfg.fold_hidden, rng),
            fold_out: Dense::init(cfg.fold_hidden, 3, rng),
            grid_side: cfg.grid_side,
            grid_extent: cfg.grid_extent,
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let width = 3 + cfg.feature_dim;
        Self {
            offset_hidden: Dense::zeros(width, cfg.offset_hidden),
            offset_out: Dense::zeros(cfg.offset_hidden, width),
            fold_hidden: Dense::zeros(2 + width, cfg.fold_hidden),
            fold_out: Dense::zeros(cfg.fold_hidden, 3),
            grid_side: cfg.grid_side,
            grid_extent: cfg.grid_extent,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.offset_hidden.fan_in() - 3
    }

    /// The `u²` grid offsets, row-major over a `u × u` lattice of `[-g, g]²`.
    pub fn grid(&self) -> Vec<[f64; 2]> {
        let u = self.grid_side;
        let coord = |k: usize| {
            if u == 1 {
                0.0
            } else {
                -self.grid_extent + 2.0 * self.grid_extent * k as f64 / (u - 1) as f64
            }
        };
        (0..u * u).map(|j| [coord(j / u), coord(j % u)]).collect()
    }

    pub fn decode(&self, seed_coords: &[Point], seed_features: &DMatrix<f64>) -> Result<ReconstructionOutput> {
        decode(seed_coords, seed_features, self)
    }

    /// Accumulates parameter gradients and returns `dL/dz` for the seed
    /// features.
    pub fn backward(
        &self,
        out: &ReconstructionOutput,
        d_coarse: &[Point],
        d_detail: &[Point],
        grad: &mut DecoderHeads,
    ) -> DMatrix<f64> {
        let n = out.y_coarse.len();
        let uu = self.grid_side * self.grid_side;
        let d_fold = DMatrix::from_fn(n * uu, 3, |r, c| d_detail[r][c]);
        let d_fold_act = self.fold_out.backward(&out.fold_act, &d_fold, &mut grad.fold_out);
        let d_fold_pre = gate_backward(&out.fold_gate, &d_fold_act);
        let d_fold_input = self.fold_hidden.backward(&out.fold_input, &d_fold_pre, &mut grad.fold_hidden);

        let width = out.h_coarse.ncols();
        let mut d_h = DMatrix::zeros(n, width);
        for i in 0..n {
            for c in 0..3 {
                d_h[(i, c)] += d_coarse[i][c];
            }
            for j in 0..uu {
                let r = i * uu + j;
                for c in 0..3 {
                    d_h[(i, c)] += d_detail[r][c];
                }
                for c in 0..width {
                    d_h[(i, c)] += d_fold_input[(r, 2 + c)];
                }
            }
        }
        // h_coarse = input + δ
        let d_offset_act = self.offset_out.backward(&out.offset_act, &d_h, &mut grad.offset_out);
        let d_offset_pre = gate_backward(&out.offset_gate, &d_offset_act);
        let d_input = self.offset_hidden.backward(&out.input, &d_offset_pre, &mut grad.offset_hidden) + d_h;
        d_input.columns(3, width - 3).into_owned()
    }
}

/// Coarse completion `P̄ + δ[:, :3]` and grid-folded detail completion.
pub fn decode(seed_coords: &[Point], seed_features: &DMatrix<f64>, heads: &DecoderHeads) -> Result<ReconstructionOutput> {
    decode_pinned(seed_coords, seed_features, heads, None)
}

/// [`decode`] with both ReLU gates optionally pinned (offset head, folding
/// head).
pub fn decode_pinned(
    seed_coords: &[Point],
    seed_features: &DMatrix<f64>,
    heads: &DecoderHeads,
    pin: Option<(&[bool], &[bool])>,
) -> Result<ReconstructionOutput> {
    let n = seed_coords.len();
    let s = heads.feature_dim();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if seed_features.nrows() != n || seed_features.ncols() != s {
        return Err(Error::DimensionMismatch(format!(
            "seed features are {}x{}, expected {n}x{s}",
            seed_features.nrows(),
            seed_features.ncols()
        )));
    }
    let width = 3 + s;
    let input = DMatrix::from_fn(n, width, |i, c| {
        if c < 3 {
            seed_coords[i][c]
        } else {
            seed_features[(i, c - 3)]
        }
    });
    let offset_pre = heads.offset_hidden.forward(&input);
    let (offset_act, offset_gate) = gated_relu(&offset_pre, pin.map(|p| p.0));
    let h_coarse = &input + heads.offset_out.forward(&offset_act);
    let y_coarse: Vec<Point> = (0..n)
        .map(|i| Point::new(h_coarse[(i, 0)], h_coarse[(i, 1)], h_coarse[(i, 2)]))
        .collect();

    let grid = heads.grid();
    let uu = grid.len();
    let fold_input = DMatrix::from_fn(n * uu, 2 + width, |r, c| {
        let (i, j) = (r / uu, r % uu);
        if c < 2 {
            grid[j][c]
        } else {
            h_coarse[(i, c - 2)]
        }
    });
    let fold_pre = heads.fold_hidden.forward(&fold_input);
    let (fold_act, fold_gate) = gated_relu(&fold_pre, pin.map(|p| p.1));
    if offset_gate.len() != offset_pre.len() || fold_gate.len() != fold_pre.len() {
        return Err(Error::DimensionMismatch("pinned pattern does not fit the seeds".into()));
    }
    let fold = heads.fold_out.forward(&fold_act);
    let y_detail = (0..n * uu)
        .map(|r| y_coarse[r / uu] + Point::new(fold[(r, 0)], fold[(r, 1)], fold[(r, 2)]))
        .collect();
    Ok(ReconstructionOutput {
        y_coarse,
        h_coarse,
        y_detail,
        input,
        offset_gate,
        offset_act,
        fold_input,
        fold_gate,
        fold_act,
    })
}

/// Encoder plus decoder heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: ToyEncoder,
    pub heads: DecoderHeads,
}

impl Model {
    /// Seeded uniform initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let encoder = ToyEncoder::init(cfg, &mut rng);
        let heads = DecoderHeads::init(cfg, &mut rng);
        Ok(Self { encoder, heads })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: ToyEncoder::zeros(cfg),
            heads: DecoderHeads::zeros(cfg),
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder_hidden: self.encoder.point.fan_out(),
            feature_dim: self.encoder.mix.fan_out(),
            projection_dim: self.encoder.project.fan_out(),
            offset_hidden: self.heads.offset_hidden.fan_out(),
            fold_hidden: self.heads.fold_hidden.fan_out(),
            grid_side: self.heads.grid_side,
            grid_extent: self.heads.grid_extent,
        }
    }

    fn layers(&self) -> [(&'static str, &Dense); 7] {
        [
            ("encoder.point", &self.encoder.point),
            ("encoder.mix", &self.encoder.mix),
            ("encoder.project", &self.encoder.project),
            ("heads.offset.hidden", &self.heads.offset_hidden),
            ("heads.offset.out", &self.heads.offset_out),
            ("heads.fold.hidden", &self.heads.fold_hidden),
            ("heads.fold.out", &self.heads.fold_out),
        ]
    }

    fn layers_mut(&mut self) -> [(&'static str, &mut Dense); 7] {
        [
            ("encoder.point", &mut self.encoder.point),
            ("encoder.mix", &mut self.encoder.mix),
            ("encoder.project", &mut self.encoder.project),
            ("heads.offset.hidden", &mut self.heads.offset_hidden),
            ("heads.offset.out", &mut self.heads.offset_out),
            ("heads.fold.hidden", &mut self.heads.fold_hidden),
            ("heads.fold.out", &mut self.heads.fold_out),
        ]
    }

    /// Parameters as `<layer>.weight` / `<layer>.bias` tensors.
    pub fn to_tensors(&self) -> TensorSet {
        let mut set = TensorSet::new();
        for (name, layer) in self.layers() {
            set.push(format!("{name}.weight"), layer.weight.clone());
            set.push(format!("{name}.bias"), layer.bias.clone());
        }
        set
    }

    /// Rebuilds a model of shape `cfg`; every tensor must be present with
    /// the expected shape and no extra tensors are allowed.
    pub fn from_tensors(cfg: &ModelConfig, tensors: &TensorSet) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        let mut expected = 0;
        for (name, layer) in model.layers_mut() {
            for (suffix, slot) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
                let key = format!("{name}.{suffix}");
                let value = tensors
                    .get(&key)
                    .ok_or_else(|| Error::invalid(format!("checkpoint.{key}"), "missing tensor"))?;
                if value.shape() != slot.shape() {
                    return Err(Error::invalid(
                        format!("checkpoint.{key}"),
                        format!("shape {:?}, expected {:?}", value.shape(), slot.shape()),
                    ));
                }
                *slot = value.clone();
                expected += 1;
            }
        }
        if tensors.len() != expected {
            let extra = tensors
                .names()
                .find(|n| !model.to_tensors().names().any(|m| m == *n))
                .unwrap_or_default()
                .to_string();
            return Err(Error::invalid(format!("checkpoint.{extra}"), "unexpected tensor"));
        }
        Ok(model)
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable view of parameter `index` in [`Model::to_tensors`] order.
    pub fn parameter_mut(&mut self, tensor: usize, row: usize, col: usize) -> &mut f64 {
        let (_, layer) = self.layers_mut().into_iter().nth(tensor / 2).expect("tensor index");
        if tensor.is_multiple_of(2) {
            &mut layer.weight[(row, col)]
        } else {
            &mut layer.bias[(row, col)]
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(&self.config()).expect("config of a built model is valid")
    }

    fn accumulate(&mut self, other: &Model, alpha: f64) {
        for ((_, a), (_, b)) in self.layers_mut().into_iter().zip(other.layers()) {
            a.weight += &b.weight * alpha;
            a.bias += &b.bias * alpha;
        }
    }
}

/// Nested FPS ground truths of a complete scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub coarse: Vec<Point>,
    pub detail: Vec<Point>,
}

/// `detail` = FPS of the scene to `u²n` points, `coarse` = FPS of `detail`
/// to `n` points starting from its first point, so `coarse ⊂ detail`.
pub fn build_targets(complete: &SceneInstance, n: usize, u: usize, seed: u64) -> Result<Targets> {
    if n == 0 || u == 0 {
        return Err(Error::invalid("targets", "n and u must be at least 1"));
    }
    let idx = farthest_point_sample(&complete.points, u * u * n, seed)?;
    let detail: Vec<Point> = idx.iter().map(|&i| complete.points[i]).collect();
    let coarse = farthest_point_sample_from(&detail, n, 0)?
        .into_iter()
        .map(|i| detail[i])
        .collect();
    Ok(Targets { coarse, detail })
}

/// One occluded scene with its seeds and reconstruction targets.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub scene: SceneInstance,
    /// Seed rows into `scene.points`.
    pub seeds: Vec<usize>,
    pub targets: Targets,
}

/// Everything the objective needs for one scene pair.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub a: SceneSample,
    pub b: SceneSample,
    /// Category of each object, shared by both scenes.
    pub categories: Vec<usize>,
    pub matches: MatchSet,
}

/// ReLU gates and pooling winners of the encoder on one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPattern {
    gate: Vec<bool>,
    argmax: Vec<Vec<usize>>,
}

/// Every discrete choice made by a forward pass on one scene: ReLU gates,
/// pooling winners and Chamfer nearest-neighbour assignments. Within one
/// pattern the losses are smooth functions of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePattern {
    encoder: EncoderPattern,
    offset_gate: Vec<bool>,
    fold_gate: Vec<bool>,
    coarse_nn: (Vec<usize>, Vec<usize>),
    detail_nn: (Vec<usize>, Vec<usize>),
}

/// Patterns of all scenes of a batch, A then B per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPattern {
    scenes: Vec<ScenePattern>,
}

struct SceneForward {
    enc: EncoderOutput,
    rec: ReconstructionOutput,
    coarse: f64,
    detail: f64,
    d_coarse: Vec<Point>,
    d_detail: Vec<Point>,
}

fn forward_scene(model: &Model, s: &SceneSample, pin: Option<&ScenePattern>, exec: Execution) -> Result<(SceneForward, ScenePattern)> {
    let enc = model
        .encoder
        .forward_pinned(&s.scene.points, &s.scene.labels, pin.map(|p| &p.encoder))?;
    let coords: Vec<Point> = s.seeds.iter().map(|&i| s.scene.points[i]).collect();
    let feats = enc.z.select_rows(s.seeds.iter());
    let rec = decode_pinned(
        &coords,
        &feats,
        &model.heads,
        pin.map(|p| (p.offset_gate.as_slice(), p.fold_gate.as_slice())),
    )?;
    let nn = |sel: fn(&ScenePattern) -> &(Vec<usize>, Vec<usize>)| pin.map(|p| {
        let (a, b) = sel(p);
        (a.as_slice(), b.as_slice())
    });
    let c = chamfer_pinned(&rec.y_coarse, &s.targets.coarse, nn(|p| &p.coarse_nn), exec)?;
    let d = chamfer_pinned(&rec.y_detail, &s.targets.detail, nn(|p| &p.detail_nn), exec)?;
    let pattern = ScenePattern {
        encoder: ToyEncoder::pattern(&enc),
        offset_gate: rec.offset_gate.clone(),
        fold_gate: rec.fold_gate.clone(),
        coarse_nn: (c.nn_x, c.nn_y),
        detail_nn: (d.nn_x, d.nn_y),
    };
    Ok((
        SceneForward {
            enc,
            rec,
            coarse: c.value,
            detail: d.value,
            d_coarse: c.grad_x,
            d_detail: d.grad_x,
        },
        pattern,
    ))
}

/// Losses on a batch of pairs, without gradients.
pub fn evaluate(batch: &[PairSample], model: &Model, params: &ObjectiveParams, exec: Execution) -> Result<LossReport> {
    run(batch, model, params, exec, false, None).map(|(r, _)| r)
}

/// [`evaluate`] that also returns the activation pattern, optionally
/// pinning every discrete choice to `pin`.
pub fn evaluate_pinned(
    batch: &[PairSample],
    model: &Model,
    params: &ObjectiveParams,
    pin: Option<&ActivationPattern>,
    exec: Execution,
) -> Result<(LossReport, ActivationPattern)> {
    run(batch, model, params, exec, false, pin)
}

/// Losses on a batch of pairs with per-term gradients with respect to every
/// model parameter. Reconstruction terms are averaged over the `2B` scenes.
pub fn forward_backward(batch: &[PairSample], model: &Model, params: &ObjectiveParams, exec: Execution) -> Result<LossReport> {
    run(batch, model, params, exec, true, None).map(|(r, _)| r)
}

fn run(
    batch: &[PairSample],
    model: &Model,
    params: &ObjectiveParams,
    exec: Execution,
    with_grad: bool,
    pin: Option<&ActivationPattern>,
) -> Result<(LossReport, ActivationPattern)> {
    params.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scenes: Vec<&SceneSample> = batch.iter().flat_map(|p| [&p.a, &p.b]).collect();
    // Outer loop is parallel, inner Chamfer searches run sequentially.
    if pin.is_some_and(|p| p.scenes.len() != scenes.len()) {
        return Err(Error::DimensionMismatch("pinned pattern does not fit the batch".into()));
    }
    let (fwd, patterns): (Vec<SceneForward>, Vec<ScenePattern>) = exec
        .try_map(scenes.len(), |i| {
            forward_scene(model, scenes[i], pin.map(|p| &p.scenes[i]), Execution::Sequential)
        })?
        .into_iter()
        .unzip();

    let features: Vec<PairFeatures> = batch
        .iter()
        .enumerate()
        .map(|(p, pair)| PairFeatures {
            a: SceneFeatures {
                features: &fwd[2 * p].enc.h,
                labels: &pair.a.scene.labels,
            },
            b: SceneFeatures {
                features: &fwd[2 * p + 1].enc.h,
                labels: &pair.b.scene.labels,
            },
            categories: &pair.categories,
        })
        .collect();
    let matches: Vec<MatchSet> = batch.iter().map(|p| p.matches.clone()).collect();
    let obj = object_level_loss(&features, params.tau)?;
    let pts = point_level_loss(&features, &matches, params.tau)?;
    let n_scenes = scenes.len() as f64;
    let l_rec_coarse = fwd.iter().map(|f| f.coarse).sum::<f64>() / n_scenes;
    let l_rec_detail = fwd.iter().map(|f| f.detail).sum::<f64>() / n_scenes;
    let l_overall = overall_loss(
        obj.value,
        pts.value,
        l_rec_coarse + l_rec_detail,
        params.lambda_pts,
        params.lambda_rec,
    );

    let gradients = if with_grad {
        let side = |g: &PairGrads, i: usize| if i.is_multiple_of(2) { g.a.clone() } else { g.b.clone() };
        let per_scene = exec.map(scenes.len(), |i| {
            let f = &fwd[i];
            let mut g_obj = model.zeros_like();
            model
                .encoder
                .backward(&f.enc, &side(&obj.grads[i / 2], i), None, &mut g_obj.encoder);
            let mut g_pts = model.zeros_like();
            model
                .encoder
                .backward(&f.enc, &side(&pts.grads[i / 2], i), None, &mut g_pts.encoder);

            let mut g_rec = model.zeros_like();
            let scale = 1.0 / n_scenes;
            let dc: Vec<Point> = f.d_coarse.iter().map(|g| g * scale).collect();
            let dd: Vec<Point> = f.d_detail.iter().map(|g| g * scale).collect();
            let dz_seeds = model.heads.backward(&f.rec, &dc, &dd, &mut g_rec.heads);
            let mut dz = DMatrix::zeros(f.enc.z.nrows(), f.enc.z.ncols());
            for (r, &i) in scenes[i].seeds.iter().enumerate() {
                let mut row = dz.row_mut(i);
                row += dz_seeds.row(r);
            }
            let dh = DMatrix::zeros(f.enc.h.nrows(), f.enc.h.ncols());
            model.encoder.backward(&f.enc, &dh, Some(&dz), &mut g_rec.encoder);
            (g_obj, g_pts, g_rec)
        });
        let (mut g_obj, mut g_pts, mut g_rec) = (model.zeros_like(), model.zeros_like(), model.zeros_like());
        for (o, p, r) in &per_scene {
            g_obj.accumulate(o, 1.0);
            g_pts.accumulate(p, 1.0);
            g_rec.accumulate(r, 1.0);
        }
        let mut g_all = g_obj.clone();
        g_all.accumulate(&g_pts, params.lambda_pts);
        g_all.accumulate(&g_rec, params.lambda_rec);
        Some(TermGradients {
            obj: g_obj.to_tensors(),
            pts: g_pts.to_tensors(),
            rec: g_rec.to_tensors(),
            overall: g_all.to_tensors(),
        })
    } else {
        None
    };

    let report = LossReport {
        l_obj: obj.value,
        l_pts: pts.value,
        l_rec_coarse,
        l_rec_detail,
        l_overall,
        lambda_pts: params.lambda_pts,
        lambda_rec: params.lambda_rec,
        n_pairs: batch.len(),
        n_instances: obj.positives,
        n_matches: pts.positives,
        mean_obj_negatives: obj.mean_negatives,
        mean_pts_negatives: pts.mean_negatives,
        gradients,
    };
    Ok((report, ActivationPattern { scenes: patterns }))
}
