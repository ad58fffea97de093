//! Joint training of part weights `u` and part filters `w` by block
//! coordinate descent on
//!
//! ```text
//! O(u, w) = λ_w‖w‖² + λ_u‖u‖² + Σᵢ max{0, 1 + max_{y≠yᵢ} (u_y − u_{yᵢ})·r(xᵢ, w)}
//! ```
//!
//! Step 1 fixes `w` and solves a multi-class SVM for `u`. Step 2 fixes `u` and
//! runs the concave-convex procedure on `w`, minimizing a convex bound that
//! touches `O` at the current filters.

mod bound;

pub use bound::{bound_b, build_bound, BoundContext};

use serde::{Deserialize, Serialize};

use crate::cache::{optimize_with_cache, Cache, CacheConfig, CacheEntry, CacheRound, EntryKey};
use crate::error::{Error, Result};
use crate::model::{argmax_lowest, dot, PartBank, PartWeights, TrainingSet};
use crate::qpsolver::{cutting_plane, CuttingPlaneConfig, CuttingPlaneResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointObjectiveConfig {
    pub lambda_w: f64,
    pub lambda_u: f64,
    pub outer_max_iters: usize,
    pub cccp_max_iters: usize,
    /// Stop when the relative decrease of the objective falls below this.
    pub rel_tol: f64,
    /// Step 1 solver tolerance, relative to the number of examples (the
    /// objective at `u = 0`).
    pub step1_rel_gap: f64,
    /// Step 2 cutting-plane tolerance, relative to the number of examples.
    pub step2_rel_eps: f64,
    pub cache_max_rounds: usize,
    pub solver_max_rounds: usize,
}

impl Default for JointObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_w: 1e-2,
            lambda_u: 1e-2,
            outer_max_iters: 20,
            cccp_max_iters: 10,
            rel_tol: 1e-4,
            step1_rel_gap: 1e-5,
            step2_rel_eps: 1e-3,
            cache_max_rounds: 50,
            solver_max_rounds: 1000,
        }
    }
}

impl JointObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_w > 0.0 && self.lambda_u > 0.0) {
            return Err(Error::InvalidParameter("lambda_w and lambda_u must be positive".into()));
        }
        if !(self.rel_tol >= 0.0 && self.step1_rel_gap > 0.0 && self.step2_rel_eps > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        Ok(())
    }

    fn step1_solver(&self, k: usize) -> CuttingPlaneConfig {
        CuttingPlaneConfig {
            epsilon: Some(self.step1_rel_gap * k.max(1) as f64),
            max_rounds: self.solver_max_rounds,
            ..Default::default()
        }
    }

    fn cache_config(&self, k: usize) -> CacheConfig {
        CacheConfig {
            max_rounds: self.cache_max_rounds,
            evict_patience: CacheConfig::default().evict_patience,
            stall_rounds: CacheConfig::default().stall_rounds,
            solver: CuttingPlaneConfig {
                epsilon: Some(self.step2_rel_eps * k.max(1) as f64),
                max_rounds: self.solver_max_rounds,
                ..Default::default()
            },
        }
    }
}

/// `Σᵢ max{0, 1 + max_{y≠yᵢ} (u_y − u_{yᵢ})·rᵢ}`.
pub fn hinge_sum(u: &PartWeights, responses: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (r, &yi) in responses.iter().zip(labels) {
        if r.len() != u.cols() {
            return Err(Error::DimensionMismatch {
                expected: u.cols(),
                actual: r.len(),
            });
        }
        let own = dot(u.row(yi), r);
        let mut worst = 0.0f64;
        for y in (0..u.n_classes).filter(|&y| y != yi) {
            worst = worst.max(1.0 + dot(u.row(y), r) - own);
        }
        total += worst;
    }
    Ok(total)
}

pub fn objective_o(u: &PartWeights, w: &PartBank, data: &TrainingSet, lambda_w: f64, lambda_u: f64) -> Result<f64> {
    if u.n_parts != w.len() || u.n_regions != data.n_regions() {
        return Err(Error::DimensionMismatch {
            expected: w.len() * data.n_regions(),
            actual: u.cols(),
        });
    }
    let responses = data.response_matrix(w);
    Ok(lambda_w * w.norm_sq() + lambda_u * u.norm_sq() + hinge_sum(u, &responses, &data.labels())?)
}

/// Step 1: `min_u λ_u‖u‖² + Σᵢ hingeᵢ(u)` for fixed responses, solved as a
/// 1-slack problem whose cache holds every class of every example.
pub fn step1_train_u(
    responses: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    n_parts: usize,
    n_regions: usize,
    lambda_u: f64,
    solver: &CuttingPlaneConfig,
) -> Result<(PartWeights, CuttingPlaneResult)> {
    let cols = n_parts * n_regions;
    if responses.is_empty() {
        return Err(Error::InsufficientData("no training responses".into()));
    }
    let dim = n_classes * cols;
    let mut cache = Cache::base(labels, dim);
    for (i, (r, &yi)) in responses.iter().zip(labels).enumerate() {
        if r.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                actual: r.len(),
            });
        }
        for y in (0..n_classes).filter(|&y| y != yi) {
            let mut f = vec![0.0; dim];
            f[y * cols..(y + 1) * cols].copy_from_slice(r);
            for (a, b) in f[yi * cols..(yi + 1) * cols].iter_mut().zip(r) {
                *a = -b;
            }
            cache.insert(CacheEntry {
                key: EntryKey {
                    example: i as u32,
                    class: y as u32,
                    latent: vec![],
                },
                feature: f,
                delta: 1.0,
                easy_rounds: 0,
            })?;
        }
    }
    let sol = cutting_plane(&cache, lambda_u, solver)?;
    let u = PartWeights::from_data(n_classes, n_parts, n_regions, sol.w.clone())?;
    Ok((u, sol))
}

#[derive(Clone, Debug)]
pub struct Step2Outcome {
    pub bank: PartBank,
    /// `O(u, w_t)` for `t = 0, 1, …`, starting at `w_init`.
    pub objectives: Vec<f64>,
    pub cache_rounds: Vec<Vec<CacheRound>>,
}

/// Step 2: concave-convex iterations on `w` for fixed `u`. An iterate that
/// would raise `O` (possible only within solver tolerance) is discarded and
/// the iteration stops.
pub fn step2_minimize_bound(
    u: &PartWeights,
    w_init: &PartBank,
    data: &TrainingSet,
    config: &JointObjectiveConfig,
) -> Result<Step2Outcome> {
    config.validate()?;
    let (lw, lu) = (config.lambda_w, config.lambda_u);
    let cache_cfg = config.cache_config(data.len());
    let mut w = w_init.clone();
    let mut current = objective_o(u, &w, data, lw, lu)?;
    let mut objectives = vec![current];
    let mut cache_rounds = Vec::new();
    let mut warm: Option<Cache> = None;
    for t in 1..=config.cccp_max_iters {
        let ctx = build_bound(u, &w, data)?;
        let out = optimize_with_cache(&ctx, data, lw, warm.as_ref(), &cache_cfg)?;
        let next = objective_o(u, &out.bank, data, lw, lu)?;
        cache_rounds.push(out.rounds);
        if next > current {
            log::debug!("concave-convex step {t} raised the objective ({current} -> {next}); keeping previous filters");
            break;
        }
        let rel = (current - next) / current.abs().max(f64::MIN_POSITIVE);
        w = out.bank;
        current = next;
        objectives.push(current);
        warm = Some(out.cache);
        if rel < config.rel_tol {
            break;
        }
    }
    Ok(Step2Outcome {
        bank: w,
        objectives,
        cache_rounds,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub stage: String,
    pub objective: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct JointResult {
    pub u: PartWeights,
    pub bank: PartBank,
    pub trace: Vec<TraceRecord>,
    /// Objective after every completed step, including the concave-convex
    /// iterations inside each Step 2.
    pub objectives: Vec<f64>,
    /// Cache rounds of every bound minimization, in order.
    pub cache_rounds: Vec<Vec<CacheRound>>,
}

fn train_accuracy(u: &PartWeights, responses: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = responses
        .iter()
        .zip(labels)
        .filter(|(r, &y)| argmax_lowest(&(0..u.n_classes).map(|c| dot(u.row(c), r)).collect::<Vec<_>>()) == y)
        .count();
    correct as f64 / responses.len().max(1) as f64
}

/// Alternates Step 1 and Step 2 from `w_init` until the relative decrease of
/// the objective over an outer iteration is below `rel_tol`.
pub fn joint_train(data: &TrainingSet, w_init: &PartBank, config: &JointObjectiveConfig) -> Result<JointResult> {
    joint_train_observed(data, w_init, config, |_, _, _| {})
}

/// [`joint_train`] that hands the model to `checkpoint` after every outer
/// iteration.
pub fn joint_train_observed(
    data: &TrainingSet,
    w_init: &PartBank,
    config: &JointObjectiveConfig,
    mut checkpoint: impl FnMut(usize, &PartWeights, &PartBank),
) -> Result<JointResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let (lw, lu) = (config.lambda_w, config.lambda_u);
    let labels = data.labels();
    let (m, r) = (w_init.len(), data.n_regions());
    let mut w = w_init.clone();
    let mut u = PartWeights::zeros(data.n_classes, m, r);
    let mut responses = data.response_matrix(&w);
    let mut current = objective_o(&u, &w, data, lw, lu)?;
    let mut trace = vec![TraceRecord {
        iter: 0,
        stage: "init".into(),
        objective: current,
        train_accuracy: train_accuracy(&u, &responses, &labels),
    }];
    let mut objectives = vec![current];
    let mut cache_rounds = Vec::new();
    let check = |prev: f64, next: f64, what: &str| -> Result<()> {
        if next > prev + 1e-9 {
            return Err(Error::NonMonotone(format!(
                "{what} raised the objective from {prev} to {next}"
            )));
        }
        Ok(())
    };

    for iter in 1..=config.outer_max_iters {
        let start = current;

        let (u_new, _) = step1_train_u(
            &responses,
            &labels,
            data.n_classes,
            m,
            r,
            lu,
            &config.step1_solver(data.len()),
        )?;
        let o1 = lw * w.norm_sq() + lu * u_new.norm_sq() + hinge_sum(&u_new, &responses, &labels)?;
        if o1 <= current {
            u = u_new;
            current = o1;
        } else {
            log::debug!("step 1 at iteration {iter} did not improve ({current} -> {o1}); keeping u");
        }
        objectives.push(current);
        trace.push(TraceRecord {
            iter,
            stage: "step1".into(),
            objective: current,
            train_accuracy: train_accuracy(&u, &responses, &labels),
        });

        let s2 = step2_minimize_bound(&u, &w, data, config)?;
        for pair in s2.objectives.windows(2) {
            check(pair[0], pair[1], "step 2")?;
        }
        check(current, s2.objectives[0], "step 2 start")?;
        objectives.extend_from_slice(&s2.objectives[1..]);
        cache_rounds.extend(s2.cache_rounds);
        w = s2.bank;
        current = *s2.objectives.last().unwrap();
        responses = data.response_matrix(&w);
        trace.push(TraceRecord {
            iter,
            stage: "step2".into(),
            objective: current,
            train_accuracy: train_accuracy(&u, &responses, &labels),
        });

        let rel = (start - current) / start.abs().max(f64::MIN_POSITIVE);
        log::info!("joint iteration {iter}: objective {current:.6} (relative decrease {rel:.3e})");
        checkpoint(iter, &u, &w);
        if rel < config.rel_tol {
            break;
        }
    }
    Ok(JointResult {
        u,
        bank: w,
        trace,
        objectives,
        cache_rounds,
    })
}
