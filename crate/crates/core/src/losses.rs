//! Contrastive and reconstruction objectives with analytic gradients.
//!
//! Features are L2-normalized inside the losses and gradients are returned
//! with respect to the raw (pre-normalization) feature rows.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::nn::TensorSet;
use crate::scenegen::FLOOR_LABEL;
use crate::correspondence::MatchSet;
use crate::{Error, Execution, Point, Result};

pub const DEFAULT_TAU: f64 = 0.03;
pub const DEFAULT_LAMBDA_PTS: f64 = 0.1;
pub const DEFAULT_LAMBDA_REC: f64 = 100.0;
/// Norm floor used when normalizing features.
pub const NORM_EPS: f64 = 1e-12;

/// Temperature and term weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveParams {
    pub tau: f64,
    pub lambda_pts: f64,
    pub lambda_rec: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda_pts: DEFAULT_LAMBDA_PTS,
            lambda_rec: DEFAULT_LAMBDA_REC,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", format!("{} must be positive and finite", self.tau)));
        }
        for (name, v) in [("lambda_pts", self.lambda_pts), ("lambda_rec", self.lambda_rec)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be non-negative and finite")));
            }
        }
        Ok(())
    }
}

/// `L_obj + λ_pts·L_pts + λ_rec·L_rec`.
pub fn overall_loss(l_obj: f64, l_pts: f64, l_rec: f64, lambda_pts: f64, lambda_rec: f64) -> f64 {
    l_obj + lambda_pts * l_pts + lambda_rec * l_rec
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

/// `log(1 + Σ exp(d_n))` for shifted logits `d_n = (a·n − a·p)/τ`, computed
/// stably; also returns the softmax weights of the negatives.
fn shifted_lse(deltas: &[f64]) -> (f64, Vec<f64>) {
    let m = deltas.iter().copied().fold(0.0f64, f64::max);
    let base = (-m).exp();
    let exps: Vec<f64> = deltas.iter().map(|d| (d - m).exp()).collect();
    let z = base + exps.iter().sum::<f64>();
    (m + z.ln(), exps.into_iter().map(|e| e / z).collect())
}

/// `−log[exp(a·p/τ) / (exp(a·p/τ) + Σ exp(a·n/τ))]` on already normalized
/// vectors.
pub fn info_nce_pairwise(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be positive")));
    }
    check_finite(anchor)?;
    check_finite(positive)?;
    for n in negatives {
        check_finite(n)?;
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let sp = dot(anchor, positive) / tau;
    let deltas: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / tau - sp).collect();
    Ok(shifted_lse(&deltas).0)
}

struct NceGrad {
    loss: f64,
    anchor: DVector<f64>,
    positive: DVector<f64>,
    negatives: Vec<DVector<f64>>,
}

fn info_nce_grad(anchor: &DVector<f64>, positive: &DVector<f64>, negatives: &[&DVector<f64>], tau: f64) -> NceGrad {
    let sp = anchor.dot(positive) / tau;
    let deltas: Vec<f64> = negatives.iter().map(|n| anchor.dot(n) / tau - sp).collect();
    let (loss, w) = shifted_lse(&deltas);
    let w_pos = 1.0 - w.iter().sum::<f64>();
    // dℓ/ds_p = w_p − 1, dℓ/ds_n = w_n, with s = a·x/τ.
    let mut g_anchor = positive * ((w_pos - 1.0) / tau);
    for (n, &wn) in negatives.iter().zip(&w) {
        g_anchor.axpy(wn / tau, n, 1.0);
    }
    NceGrad {
        loss,
        anchor: g_anchor,
        positive: anchor * ((w_pos - 1.0) / tau),
        negatives: w.iter().map(|&wn| anchor * (wn / tau)).collect(),
    }
}

/// Unit vector and the backward map of `x / max(‖x‖, ε)`.
#[derive(Clone, Debug)]
struct Normalized {
    unit: DVector<f64>,
    norm: f64,
}

impl Normalized {
    fn new(x: DVector<f64>) -> Self {
        let norm = x.norm();
        let unit = x / norm.max(NORM_EPS);
        Self { unit, norm }
    }

    fn backward(&self, g: &DVector<f64>) -> DVector<f64> {
        if self.norm > NORM_EPS {
            (g - &self.unit * self.unit.dot(g)) / self.norm
        } else {
            g / NORM_EPS
        }
    }
}

/// Projected per-point features of one scene with object labels.
#[derive(Clone, Copy, Debug)]
pub struct SceneFeatures<'a> {
    /// `n × d`, one row per point.
    pub features: &'a DMatrix<f64>,
    pub labels: &'a [u32],
}

#[derive(Clone, Copy, Debug)]
pub struct PairFeatures<'a> {
    pub a: SceneFeatures<'a>,
    pub b: SceneFeatures<'a>,
    /// Category of each object, shared by both scenes.
    pub categories: &'a [usize],
}

/// Gradient of a loss with respect to the feature rows of scenes A and B.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrads {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub grads: Vec<PairGrads>,
    /// Anchored positives (instances for the object loss, matches for the
    /// point loss).
    pub positives: usize,
    /// Mean negative-set size per positive.
    pub mean_negatives: f64,
}

fn zero_grads(batch: &[PairFeatures]) -> Vec<PairGrads> {
    batch
        .iter()
        .map(|p| PairGrads {
            a: DMatrix::zeros(p.a.features.nrows(), p.a.features.ncols()),
            b: DMatrix::zeros(p.b.features.nrows(), p.b.features.ncols()),
        })
        .collect()
}

fn check_batch(batch: &[PairFeatures]) -> Result<usize> {
    let Some(first) = batch.first() else {
        return Err(Error::EmptyBatch);
    };
    let d = first.a.features.ncols();
    for (i, p) in batch.iter().enumerate() {
        for (side, s) in [("a", &p.a), ("b", &p.b)] {
            if s.features.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "pair {i} scene {side}: feature dim {} != {d}",
                    s.features.ncols()
                )));
            }
            if s.features.nrows() != s.labels.len() {
                return Err(Error::DimensionMismatch(format!(
                    "pair {i} scene {side}: {} rows but {} labels",
                    s.features.nrows(),
                    s.labels.len()
                )));
            }
            check_finite(s.features.as_slice())?;
        }
    }
    Ok(d)
}

fn row(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

/// Mean of the feature rows per object label (`None` for absent objects).
pub fn pool_objects(scene: &SceneFeatures, n_objects: usize) -> Vec<Option<(DVector<f64>, usize)>> {
    let d = scene.features.ncols();
    let mut sums = vec![DVector::zeros(d); n_objects];
    let mut counts = vec![0usize; n_objects];
    for (i, &l) in scene.labels.iter().enumerate() {
        if l != FLOOR_LABEL && (l as usize) < n_objects {
            sums[l as usize] += scene.features.row(i).transpose();
            counts[l as usize] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| (s / c as f64, c)))
        .collect()
}

/// Category-aware object-level InfoNCE, summed over both directions and
/// averaged over all instances in the batch. Negatives for instance `k` are
/// the pooled features of both scenes of every pair whose category differs
/// from `k`'s.
pub fn object_level_loss(batch: &[PairFeatures], tau: f64) -> Result<ContrastiveLoss> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be positive")));
    }
    check_batch(batch)?;

    struct Entry {
        pair: usize,
        side: usize,
        object: usize,
        category: usize,
        count: usize,
        norm: Normalized,
    }
    let mut entries = Vec::new();
    let mut anchors = Vec::new();
    for (p, pf) in batch.iter().enumerate() {
        let k_objects = pf.categories.len();
        let pooled = [pool_objects(&pf.a, k_objects), pool_objects(&pf.b, k_objects)];
        for (k, (pa, pb)) in pooled[0].iter().zip(&pooled[1]).enumerate() {
            if let (Some((fa, na)), Some((fb, nb))) = (pa, pb) {
                let ia = entries.len();
                for (side, f, n) in [(0, fa, *na), (1, fb, *nb)] {
                    entries.push(Entry {
                        pair: p,
                        side,
                        object: k,
                        category: pf.categories[k],
                        count: n,
                        norm: Normalized::new(f.clone()),
                    });
                }
                anchors.push((ia, ia + 1));
            }
        }
    }
    if anchors.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let mut g_unit: Vec<DVector<f64>> = entries
        .iter()
        .map(|e| DVector::zeros(e.norm.unit.len()))
        .collect();
    let scale = 1.0 / anchors.len() as f64;
    let mut total = 0.0;
    let mut neg_total = 0usize;
    for &(ia, ib) in &anchors {
        let cat = entries[ia].category;
        let negs: Vec<usize> = (0..entries.len()).filter(|&j| entries[j].category != cat).collect();
        neg_total += negs.len();
        let neg_vecs: Vec<&DVector<f64>> = negs.iter().map(|&j| &entries[j].norm.unit).collect();
        for (anc, pos) in [(ia, ib), (ib, ia)] {
            let g = info_nce_grad(&entries[anc].norm.unit, &entries[pos].norm.unit, &neg_vecs, tau);
            total += g.loss;
            g_unit[anc].axpy(scale, &g.anchor, 1.0);
            g_unit[pos].axpy(scale, &g.positive, 1.0);
            for (&j, gn) in negs.iter().zip(&g.negatives) {
                g_unit[j].axpy(scale, gn, 1.0);
            }
        }
    }

    let mut grads = zero_grads(batch);
    for (e, gu) in entries.iter().zip(&g_unit) {
        let g_pooled = e.norm.backward(gu) / e.count as f64;
        let (labels, target) = if e.side == 0 {
            (batch[e.pair].a.labels, &mut grads[e.pair].a)
        } else {
            (batch[e.pair].b.labels, &mut grads[e.pair].b)
        };
        for (i, &l) in labels.iter().enumerate() {
            if l == e.object as u32 {
                let mut r = target.row_mut(i);
                r += g_pooled.transpose();
            }
        }
    }
    Ok(ContrastiveLoss {
        value: total * scale,
        grads,
        positives: anchors.len(),
        mean_negatives: neg_total as f64 / anchors.len() as f64,
    })
}

/// Object-aware point-level InfoNCE over matched seed pairs. Negatives for a
/// match on object `k` of pair `p` are the features of every matched
/// endpoint (either scene, any pair) that belongs to a different object.
/// Returns zero loss and gradients when there are no matches.
pub fn point_level_loss(batch: &[PairFeatures], matches: &[MatchSet], tau: f64) -> Result<ContrastiveLoss> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be positive")));
    }
    check_batch(batch)?;
    if matches.len() != batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} match sets for {} pairs",
            matches.len(),
            batch.len()
        )));
    }

    struct Endpoint {
        pair: usize,
        side: usize,
        index: usize,
        object: u32,
        norm: Normalized,
    }
    let mut endpoints: Vec<Endpoint> = Vec::new();
    let mut lookup: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut pairs = Vec::new();
    for (p, (pf, ms)) in batch.iter().zip(matches).enumerate() {
        for m in &ms.pairs {
            let mut slot = |side: usize, index: usize| -> Result<usize> {
                let scene = if side == 0 { &pf.a } else { &pf.b };
                if index >= scene.labels.len() || scene.labels[index] != m.object_id {
                    return Err(Error::DimensionMismatch(format!(
                        "pair {p}: match index {index} is not on object {}",
                        m.object_id
                    )));
                }
                Ok(*lookup.entry((p, side, index)).or_insert_with(|| {
                    endpoints.push(Endpoint {
                        pair: p,
                        side,
                        index,
                        object: m.object_id,
                        norm: Normalized::new(row(scene.features, index)),
                    });
                    endpoints.len() - 1
                }))
            };
            let ia = slot(0, m.a_index)?;
            let ib = slot(1, m.b_index)?;
            pairs.push((ia, ib));
        }
    }
    let mut grads = zero_grads(batch);
    if pairs.is_empty() {
        return Ok(ContrastiveLoss {
            value: 0.0,
            grads,
            positives: 0,
            mean_negatives: 0.0,
        });
    }

    let mut g_unit: Vec<DVector<f64>> = endpoints
        .iter()
        .map(|e| DVector::zeros(e.norm.unit.len()))
        .collect();
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    let mut neg_total = 0usize;
    for &(ia, ib) in &pairs {
        let key = (endpoints[ia].pair, endpoints[ia].object);
        let negs: Vec<usize> = (0..endpoints.len())
            .filter(|&j| (endpoints[j].pair, endpoints[j].object) != key)
            .collect();
        neg_total += negs.len();
        let neg_vecs: Vec<&DVector<f64>> = negs.iter().map(|&j| &endpoints[j].norm.unit).collect();
        for (anc, pos) in [(ia, ib), (ib, ia)] {
            let g = info_nce_grad(&endpoints[anc].norm.unit, &endpoints[pos].norm.unit, &neg_vecs, tau);
            total += g.loss;
            g_unit[anc].axpy(scale, &g.anchor, 1.0);
            g_unit[pos].axpy(scale, &g.positive, 1.0);
            for (&j, gn) in negs.iter().zip(&g.negatives) {
                g_unit[j].axpy(scale, gn, 1.0);
            }
        }
    }
    for (e, gu) in endpoints.iter().zip(&g_unit) {
        let g = e.norm.backward(gu);
        let target = if e.side == 0 {
            &mut grads[e.pair].a
        } else {
            &mut grads[e.pair].b
        };
        let mut r = target.row_mut(e.index);
        r += g.transpose();
    }
    Ok(ContrastiveLoss {
        value: total * scale,
        grads,
        positives: pairs.len(),
        mean_negatives: neg_total as f64 / pairs.len() as f64,
    })
}

/// Index and squared distance of the nearest point of `set` (lowest index on ties).
fn nearest(p: &Point, set: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in set.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Two-sided Chamfer distance with squared Euclidean terms.
pub fn chamfer_distance(x: &[Point], y: &[Point]) -> Result<f64> {
    chamfer_with_grad(x, y, Execution::Sequential).map(|c| c.value)
}

#[derive(Clone, Debug)]
pub struct Chamfer {
    pub value: f64,
    pub grad_x: Vec<Point>,
    pub grad_y: Vec<Point>,
    /// Nearest `y` index of every `x` point.
    pub nn_x: Vec<usize>,
    /// Nearest `x` index of every `y` point.
    pub nn_y: Vec<usize>,
}

pub fn chamfer_with_grad(x: &[Point], y: &[Point], exec: Execution) -> Result<Chamfer> {
    chamfer_pinned(x, y, None, exec)
}

/// Chamfer distance with the nearest-neighbour assignment either searched or
/// pinned to `nn = (nn_x, nn_y)`.
pub fn chamfer_pinned(x: &[Point], y: &[Point], nn: Option<(&[usize], &[usize])>, exec: Execution) -> Result<Chamfer> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySet);
    }
    let (nn_x, nn_y): (Vec<usize>, Vec<usize>) = match nn {
        Some((a, b)) => {
            if a.len() != x.len() || b.len() != y.len() || a.iter().any(|&j| j >= y.len()) || b.iter().any(|&i| i >= x.len()) {
                return Err(Error::DimensionMismatch("pinned assignment does not fit the point sets".into()));
            }
            (a.to_vec(), b.to_vec())
        }
        None => (
            exec.map(x.len(), |i| nearest(&x[i], y).0),
            exec.map(y.len(), |j| nearest(&y[j], x).0),
        ),
    };
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let mut grad_x = vec![Point::zeros(); x.len()];
    let mut grad_y = vec![Point::zeros(); y.len()];
    let mut sx = 0.0;
    for (i, &j) in nn_x.iter().enumerate() {
        let diff = x[i] - y[j];
        sx += diff.norm_squared();
        let g = diff * (2.0 / nx);
        grad_x[i] += g;
        grad_y[j] -= g;
    }
    let mut sy = 0.0;
    for (j, &i) in nn_y.iter().enumerate() {
        let diff = y[j] - x[i];
        sy += diff.norm_squared();
        let g = diff * (2.0 / ny);
        grad_y[j] += g;
        grad_x[i] -= g;
    }
    Ok(Chamfer {
        value: sx / nx + sy / ny,
        grad_x,
        grad_y,
        nn_x,
        nn_y,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionLoss {
    pub coarse: f64,
    pub detail: f64,
    pub total: f64,
}

pub fn reconstruction_loss(
    y_coarse: &[Point],
    y_detail: &[Point],
    gt_coarse: &[Point],
    gt_detail: &[Point],
) -> Result<ReconstructionLoss> {
    let coarse = chamfer_distance(y_coarse, gt_coarse)?;
    let detail = chamfer_distance(y_detail, gt_detail)?;
    Ok(ReconstructionLoss {
        coarse,
        detail,
        total: coarse + detail,
    })
}

/// Per-term parameter gradients. `overall` is the λ-weighted combination.
#[derive(Clone, Debug, PartialEq)]
pub struct TermGradients {
    pub obj: TensorSet,
    pub pts: TensorSet,
    pub rec: TensorSet,
    pub overall: TensorSet,
}

/// Scalar losses of one batch. Serialized field names are fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_obj: f64,
    pub l_pts: f64,
    pub l_rec_coarse: f64,
    pub l_rec_detail: f64,
    pub l_overall: f64,
    pub lambda_pts: f64,
    pub lambda_rec: f64,
    pub n_pairs: usize,
    pub n_instances: usize,
    pub n_matches: usize,
    pub mean_obj_negatives: f64,
    pub mean_pts_negatives: f64,
    #[serde(skip)]
    pub gradients: Option<TermGradients>,
}

impl LossReport {
    pub fn l_rec(&self) -> f64 {
        self.l_rec_coarse + self.l_rec_detail
    }

    /// Recomputes the weighted total from the reported terms.
    pub fn recomposed(&self) -> f64 {
        overall_loss(self.l_obj, self.l_pts, self.l_rec(), self.lambda_pts, self.lambda_rec)
    }
}
