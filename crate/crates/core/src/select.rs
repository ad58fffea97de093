//! Part selection with a smoothed group-lasso penalty on the columns of `u`.
//!
//! All `n·R` weights of a part form one group with norm `ρ_j`. The penalty
//! `λ Σ_j τ(ρ_j)` uses the Huber-style smoothing `τ(ρ) = ρ` for `ρ > ε` and
//! `ρ²/(2ε) + ε/2` otherwise, and is minimized together with the
//! multi-class hinge loss by stochastic subgradient descent. Parts whose group
//! norm ends up above a small threshold are kept.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jointtrain::{hinge_sum, step1_train_u};
use crate::model::{dot, PartWeights};
use crate::qpsolver::CuttingPlaneConfig;

/// Precomputed responses and labels of a training corpus.
#[derive(Clone, Debug)]
pub struct ResponseSet {
    pub responses: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub n_parts: usize,
    pub n_regions: usize,
}

impl ResponseSet {
    pub fn new(
        responses: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
        n_parts: usize,
        n_regions: usize,
    ) -> Result<Self> {
        if responses.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: responses.len(),
                actual: labels.len(),
            });
        }
        if let Some(r) = responses.iter().find(|r| r.len() != n_parts * n_regions) {
            return Err(Error::DimensionMismatch {
                expected: n_parts * n_regions,
                actual: r.len(),
            });
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::InvalidParameter("label out of range".into()));
        }
        Ok(Self {
            responses,
            labels,
            n_classes,
            n_parts,
            n_regions,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Restricts the responses to the columns of the listed parts.
    pub fn subset_parts(&self, parts: &[usize]) -> Self {
        let r = self.n_regions;
        Self {
            responses: self
                .responses
                .iter()
                .map(|v| {
                    parts
                        .iter()
                        .flat_map(|&j| v[j * r..(j + 1) * r].iter().copied())
                        .collect()
                })
                .collect(),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            n_parts: parts.len(),
            n_regions: r,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupLassoConfig {
    pub lambda: f64,
    /// Smoothing width; `None` derives it from an unpenalized run.
    pub epsilon: Option<f64>,
    /// Initial step in units of `1 / mean ‖r‖²`, which makes the iteration
    /// independent of the response scale.
    pub eta0: f64,
    /// Epochs over which the rate halves.
    pub t0: f64,
    pub epochs: usize,
    /// Examples per stochastic step.
    pub batch_size: usize,
    pub seed: u64,
    /// Group norms above this count as selected; `None` uses `2ε`.
    pub zero_threshold: Option<f64>,
}

impl Default for GroupLassoConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epsilon: None,
            eta0: 0.25,
            t0: 10.0,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            zero_threshold: None,
        }
    }
}

/// `ρ_j` for every part.
pub fn group_norms(u: &PartWeights) -> Vec<f64> {
    let r = u.n_regions;
    (0..u.n_parts)
        .map(|j| {
            let mut s = 0.0;
            for y in 0..u.n_classes {
                for v in &u.row(y)[j * r..(j + 1) * r] {
                    s += v * v;
                }
            }
            s.sqrt()
        })
        .collect()
}

pub fn smoothed_norm(rho: f64, eps: f64) -> f64 {
    if rho > eps {
        rho
    } else {
        rho * rho / (2.0 * eps) + eps / 2.0
    }
}

/// `dτ/dρ`.
pub fn smoothed_norm_derivative(rho: f64, eps: f64) -> f64 {
    if rho > eps {
        1.0
    } else {
        rho / eps
    }
}

/// `λ Σ_j τ(ρ_j) + Σᵢ hingeᵢ(u)`.
pub fn selection_objective(u: &PartWeights, data: &ResponseSet, lambda: f64, eps: f64) -> Result<f64> {
    check_shape(u, data)?;
    let penalty: f64 = group_norms(u).iter().map(|&r| smoothed_norm(r, eps)).sum();
    Ok(lambda * penalty + hinge_sum(u, &data.responses, &data.labels)?)
}

fn check_shape(u: &PartWeights, data: &ResponseSet) -> Result<()> {
    if u.n_parts != data.n_parts || u.n_regions != data.n_regions || u.n_classes != data.n_classes {
        return Err(Error::DimensionMismatch {
            expected: data.n_classes * data.n_parts * data.n_regions,
            actual: u.data.len(),
        });
    }
    Ok(())
}

/// Gradient of the penalty, `λ τ'(ρ_j) u / ρ_j` per group (`λ u / ε` on the
/// quadratic branch).
fn penalty_gradient(u: &PartWeights, lambda: f64, eps: f64, out: &mut [f64]) {
    let r = u.n_regions;
    let rho = group_norms(u);
    for y in 0..u.n_classes {
        for c in 0..u.cols() {
            let j = c / r;
            let scale = if rho[j] > eps { 1.0 / rho[j] } else { 1.0 / eps };
            out[y * u.cols() + c] += lambda * scale * u.get(y, c);
        }
    }
}

/// Adds the hinge subgradient of example `(r, yi)` scaled by `weight`. The
/// rival is the single maximizing class, lowest index on ties.
fn add_hinge_subgradient(u: &PartWeights, r: &[f64], yi: usize, weight: f64, out: &mut [f64]) {
    let own = dot(u.row(yi), r);
    let mut worst: Option<(f64, usize)> = None;
    for y in (0..u.n_classes).filter(|&y| y != yi) {
        let v = 1.0 + dot(u.row(y), r) - own;
        if worst.is_none_or(|(b, _)| v > b) {
            worst = Some((v, y));
        }
    }
    if let Some((v, y)) = worst {
        if v > 0.0 {
            let cols = u.cols();
            for c in 0..cols {
                out[y * cols + c] += weight * r[c];
                out[yi * cols + c] -= weight * r[c];
            }
        }
    }
}

/// Subgradient of `λ Σ τ(ρ_j) + Σ_{i ∈ batch} hingeᵢ(u)`.
pub fn selection_subgradient(
    u: &PartWeights,
    data: &ResponseSet,
    batch: &[usize],
    lambda: f64,
    eps: f64,
) -> Result<PartWeights> {
    check_shape(u, data)?;
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let mut g = vec![0.0; u.data.len()];
    penalty_gradient(u, lambda, eps, &mut g);
    for &i in batch {
        add_hinge_subgradient(u, &data.responses[i], data.labels[i], 1.0, &mut g);
    }
    PartWeights::from_data(u.n_classes, u.n_parts, u.n_regions, g)
}

#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub u: PartWeights,
    pub epsilon: f64,
    pub zero_threshold: f64,
    /// Full objective of the averaged iterate after each epoch.
    pub epoch_objectives: Vec<f64>,
}

/// Default smoothing width: `1e-3` times the median group norm of an
/// unpenalized run, or `1e-3` when that median is zero.
pub fn default_epsilon(data: &ResponseSet, config: &GroupLassoConfig) -> Result<f64> {
    let free = sgd(data, 0.0, 1.0, config)?;
    let mut rho = group_norms(&free.0);
    rho.sort_by(f64::total_cmp);
    let med = rho[rho.len() / 2];
    Ok(if med > 0.0 { 1e-3 * med } else { 1e-3 })
}

/// Mini-batch stochastic subgradient descent on the per-example average of
/// the selection objective, with rate `η₀ / (L (1 + t/T₀))` where `L` is the
/// mean squared response norm, and the average of
/// the last epoch's iterates as the result.
///
/// Each step takes the hinge step first and the penalty step second. The
/// penalty step on a group is clamped so that it never moves the group past
/// zero, which keeps the `1/ε` curvature of the quadratic branch from making
/// the iteration oscillate.
fn sgd(data: &ResponseSet, lambda: f64, eps: f64, config: &GroupLassoConfig) -> Result<(PartWeights, Vec<f64>)> {
    let k = data.len();
    if k == 0 {
        return Err(Error::InsufficientData("no responses to select on".into()));
    }
    let (n, m, r) = (data.n_classes, data.n_parts, data.n_regions);
    let mut u = PartWeights::zeros(n, m, r);
    let mut last = None;
    let initial = selection_objective(&u, data, lambda, eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..k).collect();
    let mut g = vec![0.0; u.data.len()];
    let mut avg = vec![0.0; u.data.len()];
    let mut objectives = Vec::with_capacity(config.epochs);
    let mut t = 0usize;
    let lam = lambda / k as f64;
    let batch = config.batch_size.clamp(1, k);
    let steps_per_epoch = k.div_ceil(batch) as f64;
    let r2 = data
        .responses
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / k as f64;
    let eta0 = config.eta0 / r2.max(1e-12);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        avg.iter_mut().for_each(|v| *v = 0.0);
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let eta = eta0 / (1.0 + t as f64 / (config.t0 * steps_per_epoch));
            t += 1;
            steps += 1;
            g.iter_mut().for_each(|v| *v = 0.0);
            let wgt = 1.0 / chunk.len() as f64;
            for &i in chunk {
                add_hinge_subgradient(&u, &data.responses[i], data.labels[i], wgt, &mut g);
            }
            for (a, b) in u.data.iter_mut().zip(&g) {
                *a -= eta * b;
            }
            if lam > 0.0 {
                let rho = group_norms(&u);
                for j in 0..m {
                    let denom = if rho[j] > eps { rho[j] } else { eps };
                    let shrink = 1.0 - (eta * lam / denom).min(1.0);
                    for y in 0..n {
                        for v in &mut u.row_mut(y)[j * r..(j + 1) * r] {
                            *v *= shrink;
                        }
                    }
                }
            }
            for (a, b) in avg.iter_mut().zip(&u.data) {
                *a += b;
            }
        }
        let mean = PartWeights::from_data(n, m, r, avg.iter().map(|v| v / steps as f64).collect())?;
        let obj = selection_objective(&mean, data, lambda, eps)?;
        if !obj.is_finite() || obj > 10.0 * initial.max(1.0) {
            return Err(Error::Diverged(format!(
                "selection objective grew to {obj:.3e} at epoch {epoch} (initial {initial:.3e}); reduce eta0 or t0"
            )));
        }
        objectives.push(obj);
        last = Some(mean);
    }
    Ok((last.unwrap_or(u), objectives))
}

pub fn train_selection(data: &ResponseSet, config: &GroupLassoConfig) -> Result<SelectionOutcome> {
    if config.lambda < 0.0 {
        return Err(Error::InvalidParameter("lambda must be non-negative".into()));
    }
    let eps = match config.epsilon {
        Some(e) if e > 0.0 => e,
        Some(_) => return Err(Error::InvalidParameter("epsilon must be positive".into())),
        None => default_epsilon(data, config)?,
    };
    let (u, epoch_objectives) = sgd(data, config.lambda, eps, config)?;
    Ok(SelectionOutcome {
        u,
        epsilon: eps,
        zero_threshold: config.zero_threshold.unwrap_or(2.0 * eps),
        epoch_objectives,
    })
}

/// Indices of parts with `ρ_j > zero_threshold`, in order.
pub fn select_parts(u: &PartWeights, zero_threshold: f64) -> Vec<usize> {
    group_norms(u)
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > zero_threshold)
        .map(|(j, _)| j)
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub selected: usize,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub lambda: f64,
    pub selected: Vec<usize>,
    pub u: PartWeights,
    /// Whether the count landed in `[target, 1.2·target]`.
    pub hit: bool,
    pub history: Vec<SweepPoint>,
    pub epsilon: f64,
}

/// Bisection on `log λ` for a selection of `target` to `1.2·target` parts.
/// The search starts from the bracket `λ/k ∈ [1e-4, 10]` and moves the upper
/// end up by decades while it still keeps too many parts. After 20 trainings
/// the run closest to the range is returned with `hit = false`.
const MAX_SWEEP_RUNS: usize = 20;

pub fn lambda_sweep(data: &ResponseSet, target: usize, config: &GroupLassoConfig) -> Result<SweepOutcome> {
    let k = data.len().max(1) as f64;
    let eps = match config.epsilon {
        Some(e) => e,
        None => default_epsilon(data, config)?,
    };
    let upper = (1.2 * target as f64).floor() as usize;
    let in_range = |c: usize| c >= target && c <= upper;
    let distance = |c: usize| {
        if c < target {
            target - c
        } else {
            c.saturating_sub(upper)
        }
    };
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<usize>, PartWeights)> = None;
    let mut run = |lambda: f64, history: &mut Vec<SweepPoint>| -> Result<usize> {
        let cfg = GroupLassoConfig {
            lambda,
            epsilon: Some(eps),
            ..config.clone()
        };
        let out = train_selection(data, &cfg)?;
        let sel = select_parts(&out.u, out.zero_threshold);
        let c = sel.len();
        history.push(SweepPoint { lambda, selected: c });
        if best.as_ref().is_none_or(|(d, _, _, _)| distance(c) < *d) {
            best = Some((distance(c), lambda, sel, out.u));
        }
        Ok(c)
    };
    let (mut lo, mut hi) = ((1e-4 * k).ln(), (10.0 * k).ln());
    let c_lo = run(lo.exp(), &mut history)?;
    if c_lo > upper {
        // widen the bracket a decade at a time while λ is still too weak
        let mut c_hi = run(hi.exp(), &mut history)?;
        while c_hi > upper && history.len() < MAX_SWEEP_RUNS {
            lo = hi;
            hi += 10f64.ln();
            c_hi = run(hi.exp(), &mut history)?;
        }
        if c_hi > upper {
            log::warn!("even lambda = {:.3e} keeps {c_hi} parts", hi.exp());
        } else if !in_range(c_hi) {
            while history.len() < MAX_SWEEP_RUNS {
                let mid = 0.5 * (lo + hi);
                let c = run(mid.exp(), &mut history)?;
                if in_range(c) {
                    break;
                }
                if c > upper {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
    }
    let (d, lambda, selected, u) = best.expect("at least one run");
    if d > 0 {
        log::warn!(
            "lambda sweep missed the target of {target} parts; closest has {}",
            selected.len()
        );
    }
    Ok(SweepOutcome {
        lambda,
        selected,
        u,
        hit: d == 0,
        history,
        epsilon: eps,
    })
}

/// Retrains `u` with an ℓ2 penalty on the selected parts only.
pub fn retrain_l2(
    data: &ResponseSet,
    selected: &[usize],
    lambda_u: f64,
    solver: &CuttingPlaneConfig,
) -> Result<PartWeights> {
    if selected.is_empty() {
        return Err(Error::InvalidParameter("no parts were selected".into()));
    }
    let sub = data.subset_parts(selected);
    let (u, _) = step1_train_u(
        &sub.responses,
        &sub.labels,
        sub.n_classes,
        sub.n_parts,
        sub.n_regions,
        lambda_u,
        solver,
    )?;
    Ok(u)
}
