//! Central finite-difference check of every model parameter gradient.
//!
//! The losses are piecewise smooth: ReLU gates, max-pool winners and Chamfer
//! nearest neighbours switch at isolated parameter values. When `θ ± h`
//! lands on a different piece than `θ`, the difference is taken on the
//! piece of `θ` by pinning those discrete choices, which is the piece whose
//! gradient backpropagation returns. Such coordinates are counted in the
//! report.

use serde::Serialize;

use crate::catalog::load_default_scannet_parameters;
use crate::decoder::{evaluate_pinned, forward_backward, Model, ModelConfig, PairSample};
use crate::losses::{LossReport, ObjectiveParams};
use crate::pipeline::{build_pair, PipelineConfig};
use crate::{Error, Execution, Result};

/// Problem size and tolerances of the check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub pairs: usize,
    pub objects: usize,
    pub points_per_object: usize,
    pub seeds: usize,
    pub model: ModelConfig,
    pub objective: ObjectiveParams,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            pairs: 2,
            objects: 4,
            points_per_object: 64,
            seeds: 24,
            model: ModelConfig {
                encoder_hidden: 16,
                feature_dim: 16,
                projection_dim: 16,
                offset_hidden: 16,
                fold_hidden: 16,
                ..ModelConfig::default()
            },
            objective: ObjectiveParams::default(),
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            seed: 2024,
        }
    }
}

pub const TERMS: [&str; 4] = ["l_obj", "l_pts", "l_rec", "l_overall"];

/// Worst agreement over one parameter tensor for one loss term.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub term: &'static str,
    pub tensor: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub parameters: usize,
    pub evaluations: usize,
    /// Coordinates whose central difference straddled a switch and was
    /// evaluated with the activation pattern of `θ` pinned.
    pub pinned_coordinates: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub checks: Vec<TensorCheck>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn terms(r: &LossReport) -> [f64; 4] {
    [r.l_obj, r.l_pts, r.l_rec(), r.l_overall]
}

/// The batch and model used by the check.
pub fn gradcheck_problem(cfg: &GradcheckConfig) -> Result<(Vec<PairSample>, Model)> {
    let pipeline = PipelineConfig {
        n_scenes: cfg.pairs,
        n_objects_per_scene: cfg.objects,
        points_per_object: cfg.points_per_object,
        seeds: cfg.seeds,
        model: cfg.model,
        tau: cfg.objective.tau,
        lambda_pts: cfg.objective.lambda_pts,
        lambda_rec: cfg.objective.lambda_rec,
        batch_size: cfg.pairs,
        seed: cfg.seed,
        ..PipelineConfig::default()
    };
    pipeline.validate()?;
    let dist = load_default_scannet_parameters().with_epsilon(pipeline.epsilon)?;
    let assets = pipeline.asset_source(&dist)?;
    let batch = (0..cfg.pairs)
        .map(|i| build_pair(&pipeline, &dist, assets.as_ref(), i, Execution::Sequential).map(|(p, _)| p.sample))
        .collect::<Result<Vec<_>>>()?;
    let model = Model::init(&cfg.model, cfg.seed)?;
    Ok((batch, model))
}

/// Compares analytic gradients of every loss term against central
/// differences for every scalar parameter.
pub fn run_gradcheck(cfg: &GradcheckConfig, exec: Execution) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::invalid("step", "must be positive"));
    }
    let (batch, model) = gradcheck_problem(cfg)?;
    let analytic = forward_backward(&batch, &model, &cfg.objective, exec)?
        .gradients
        .expect("forward_backward returns gradients");
    let term_sets = [&analytic.obj, &analytic.pts, &analytic.rec, &analytic.overall];

    let tensors = model.to_tensors();
    let coords: Vec<(usize, usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(t, (_, m))| (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| (t, r, c))))
        .collect();
    let (_, base) = evaluate_pinned(&batch, &model, &cfg.objective, None, Execution::Sequential)?;
    let results = exec.try_map(coords.len(), |k| -> Result<([f64; 4], bool)> {
        let (t, r, c) = coords[k];
        let shifted = |delta: f64, pin| {
            let mut m = model.clone();
            *m.parameter_mut(t, r, c) += delta;
            evaluate_pinned(&batch, &m, &cfg.objective, pin, Execution::Sequential).map(|(r, p)| (terms(&r), p))
        };
        let diff = |plus: [f64; 4], minus: [f64; 4]| -> [f64; 4] {
            std::array::from_fn(|i| (plus[i] - minus[i]) / (2.0 * cfg.step))
        };
        let ((plus, p_plus), (minus, p_minus)) = (shifted(cfg.step, None)?, shifted(-cfg.step, None)?);
        if p_plus == base && p_minus == base {
            return Ok((diff(plus, minus), false));
        }
        let ((plus, _), (minus, _)) = (shifted(cfg.step, Some(&base))?, shifted(-cfg.step, Some(&base))?);
        Ok((diff(plus, minus), true))
    })?;
    let pinned_coordinates = results.iter().filter(|(_, pinned)| *pinned).count();
    let numeric: Vec<[f64; 4]> = results.into_iter().map(|(n, _)| n).collect();

    let mut checks = Vec::new();
    for (term_idx, term) in TERMS.iter().enumerate() {
        let mut k = 0;
        for (t, (name, _)) in tensors.iter().enumerate() {
            let grad = term_sets[term_idx].iter().nth(t).expect("same tensor order").1;
            let mut check = TensorCheck {
                term,
                tensor: name.to_string(),
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                max_abs_gradient: 0.0,
            };
            let (rows, cols) = grad.shape();
            for r in 0..rows {
                for c in 0..cols {
                    let a = grad[(r, c)];
                    let n = numeric[k][term_idx];
                    k += 1;
                    check.max_rel_error = check.max_rel_error.max(relative_error(a, n, cfg.floor));
                    check.max_abs_error = check.max_abs_error.max((a - n).abs());
                    check.max_abs_gradient = check.max_abs_gradient.max(a.abs());
                }
            }
            checks.push(check);
        }
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        parameters: coords.len(),
        evaluations: 2 * coords.len() + 2 * pinned_coordinates,
        pinned_coordinates,
        tolerance: cfg.tolerance,
        max_rel_error,
        passed: max_rel_error <= cfg.tolerance,
        checks,
    })
}
