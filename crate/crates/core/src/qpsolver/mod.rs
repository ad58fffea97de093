//! 1-slack cutting-plane solver for `min_w λ‖w‖² + Σᵢ max_{e ∈ Cᵢ} (wᵀf + δ)`.
//!
//! A constraint picks one cache entry per example. Its loss
//! `Σᵢ (wᵀfᵢ + δᵢ)` is linear in `w`, and the objective equals
//! `λ‖w‖² + max_ω loss(ω, w)`. The solver grows a working set of constraints
//! from the most violated one, solving the dual over the working set each
//! round.

mod dual;

pub use dual::{dual_objective, solve_dual, solve_dual_active_set, DualOptions, DualSolution};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::cache::Cache;
use crate::error::{Error, Result};
use crate::model::dot;
use crate::par;

/// One entry per example, stored through its aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    /// Entry index within each example's cache group.
    pub choices: Vec<u32>,
    /// `Σᵢ fᵢ`, unscaled.
    pub feature_sum: Vec<f64>,
    /// `Σᵢ δᵢ`.
    pub delta_sum: f64,
    /// Consecutive rounds with a zero multiplier.
    pub idle_rounds: usize,
}

impl Constraint {
    /// Offset `b = −Σδ` of the dual.
    pub fn offset(&self) -> f64 {
        -self.delta_sum
    }

    /// Gram entry `φ(ω)·φ(ω′)` with `φ = (2λ)^{-1/2} Σf`.
    pub fn gram(&self, other: &Constraint, lambda: f64) -> f64 {
        dot(&self.feature_sum, &other.feature_sum) / (2.0 * lambda)
    }
}

/// `Σᵢ (wᵀfᵢ + δᵢ)`.
pub fn constraint_loss(c: &Constraint, w: &[f64]) -> f64 {
    dot(w, &c.feature_sum) + c.delta_sum
}

/// The constraint maximizing the loss at `w`. The loss decomposes over
/// examples, so each example contributes its own best entry (the first in key
/// order on ties).
pub fn most_violated_constraint(cache: &Cache, w: &[f64]) -> Constraint {
    let idx: Vec<usize> = (0..cache.n_examples()).collect();
    let picks = par::map(&idx, |&i| {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (k, e) in cache.entries(i).iter().enumerate() {
            let v = e.value(w);
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        best as u32
    });
    build_constraint(cache, picks)
}

pub fn build_constraint(cache: &Cache, choices: Vec<u32>) -> Constraint {
    let mut feature_sum = vec![0.0; cache.dim()];
    let mut delta_sum = 0.0;
    for (i, &k) in choices.iter().enumerate() {
        let e = &cache.entries(i)[k as usize];
        for (a, b) in feature_sum.iter_mut().zip(&e.feature) {
            *a += b;
        }
        delta_sum += e.delta;
    }
    Constraint {
        choices,
        feature_sum,
        delta_sum,
        idle_rounds: 0,
    }
}

/// `w = −(1/2λ) Σ_ω α_ω Σᵢ f_{ω,i}`.
pub fn recover_primal(alpha: &[f64], working_set: &[Constraint], lambda: f64, dim: usize) -> Vec<f64> {
    let mut w = vec![0.0; dim];
    for (a, c) in alpha.iter().zip(working_set) {
        if *a == 0.0 {
            continue;
        }
        for (wi, f) in w.iter_mut().zip(&c.feature_sum) {
            *wi += a * f;
        }
    }
    let s = -1.0 / (2.0 * lambda);
    w.iter_mut().for_each(|v| *v *= s);
    w
}

#[derive(Clone, Copy, Debug)]
pub struct CuttingPlaneConfig {
    /// Absolute tolerance on the slack. `None` uses `1e-3 · k`.
    pub epsilon: Option<f64>,
    pub max_rounds: usize,
    pub prune_patience: usize,
    /// Dual tolerance as a fraction of `ε`.
    pub dual_tol_fraction: f64,
    pub dual_max_iter: usize,
}

impl Default for CuttingPlaneConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_rounds: 1000,
            prune_patience: 10,
            dual_tol_fraction: 0.1,
            dual_max_iter: DualOptions::default().max_iter,
        }
    }
}

impl CuttingPlaneConfig {
    pub fn epsilon_for(&self, n_examples: usize) -> f64 {
        self.epsilon.unwrap_or(1e-3 * n_examples.max(1) as f64)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub working_set: usize,
    pub dual_obj: f64,
    /// Slack over the working set at this round's iterate.
    pub xi: f64,
    /// Loss of the most violated constraint at this round's iterate.
    pub violation: f64,
    pub pruned: usize,
    pub alpha_sum: f64,
    pub alpha_min: f64,
    pub active: usize,
}

#[derive(Clone, Debug)]
pub struct CuttingPlaneResult {
    /// The iterate with the lowest objective seen.
    pub w: Vec<f64>,
    /// Exact slack of `w`: the loss of the most violated constraint,
    /// clipped at zero.
    pub xi: f64,
    /// `λ‖w‖² + ξ`, which equals `B_C(w)`.
    pub objective: f64,
    /// Optimal value of the last working-set problem; a lower bound on the
    /// minimum of `B_C`.
    pub lower_bound: f64,
    pub epsilon: f64,
    pub rounds: usize,
    pub working_set: Vec<Constraint>,
    pub alpha: Vec<f64>,
    pub history: Vec<RoundRecord>,
}

impl CuttingPlaneResult {
    pub fn gap(&self) -> f64 {
        self.objective - self.lower_bound
    }
}

/// Minimizes `B_C` over the cache. Returns the best iterate once its
/// objective is within `ε` of the largest dual lower bound.
///
/// Each working-set dual is solved to a pair gap `τ < ε`, which bounds the
/// working-set duality gap by `τ`. A most violated constraint with loss at
/// most `ξ + ε − τ` then certifies the iterate, so any other constraint is
/// added as a cut.
pub fn cutting_plane(cache: &Cache, lambda: f64, config: &CuttingPlaneConfig) -> Result<CuttingPlaneResult> {
    if lambda <= 0.0 {
        return Err(Error::InvalidParameter("regularization weight must be positive".into()));
    }
    let eps = config.epsilon_for(cache.n_examples());
    if eps <= 0.0 {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    let dim = cache.dim();
    let mut working: Vec<Constraint> = Vec::new();
    let mut gram: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut lower = f64::NEG_INFINITY;
    if !(config.dual_tol_fraction > 0.0 && config.dual_tol_fraction < 1.0) {
        return Err(Error::InvalidParameter("dual_tol_fraction must be in (0, 1)".into()));
    }
    let dual_opts = DualOptions {
        tol: config.dual_tol_fraction * eps,
        max_iter: config.dual_max_iter,
    };

    for round in 1..=config.max_rounds {
        let n = working.len();
        let m = DMatrix::from_fn(n, n, |i, j| gram[i][j]);
        let b: Vec<f64> = working.iter().map(Constraint::offset).collect();
        let sol = solve_dual(&m, &b, Some(&alpha), dual_opts)?;
        alpha = sol.alpha;
        let w = recover_primal(&alpha, &working, lambda, dim);
        let reg = lambda * dot(&w, &w);
        let xi_ws = working.iter().map(|c| constraint_loss(c, &w)).fold(0.0, f64::max);
        lower = lower.max(-sol.objective);

        // pruning only touches zero multipliers, so `w` is unaffected
        let mut pruned = 0;
        if config.prune_patience > 0 {
            for (c, a) in working.iter_mut().zip(&alpha) {
                c.idle_rounds = if *a > 0.0 { 0 } else { c.idle_rounds + 1 };
            }
            let keep: Vec<bool> = working.iter().map(|c| c.idle_rounds < config.prune_patience).collect();
            if keep.iter().any(|k| !k) {
                let mut it = keep.iter();
                working.retain(|_| *it.next().unwrap());
                let mut it = keep.iter();
                alpha.retain(|_| *it.next().unwrap());
                let mut it = keep.iter();
                gram.retain(|_| *it.next().unwrap());
                for row in &mut gram {
                    let mut it = keep.iter();
                    row.retain(|_| *it.next().unwrap());
                }
                pruned = keep.iter().filter(|k| !**k).count();
            }
        }

        let cand = most_violated_constraint(cache, &w);
        let violation = constraint_loss(&cand, &w);
        let obj = reg + violation.max(0.0);
        if best.as_ref().is_none_or(|(o, _, _)| obj < *o) {
            best = Some((obj, w, violation.max(0.0)));
        }
        history.push(RoundRecord {
            round,
            working_set: n,
            dual_obj: sol.objective,
            xi: xi_ws,
            violation,
            pruned,
            alpha_sum: alpha.iter().sum(),
            alpha_min: alpha.iter().copied().fold(f64::INFINITY, f64::min),
            active: alpha.iter().filter(|a| **a > 0.0).count(),
        });
        let best_obj = best.as_ref().unwrap().0;
        let covered = violation <= xi_ws + eps - dual_opts.tol;
        if best_obj <= lower + eps || covered {
            if !covered {
                log::debug!("cutting plane: accepted at round {round} on the dual certificate");
            } else if best_obj > lower + eps {
                // only reachable through round-off in the dual solve
                log::warn!(
                    "cutting plane: gap {:.3e} above epsilon {eps:.3e} with no cut left",
                    best_obj - lower
                );
            }
            let (objective, w, xi) = best.unwrap();
            return Ok(CuttingPlaneResult {
                w,
                xi,
                objective,
                lower_bound: lower,
                epsilon: eps,
                rounds: round,
                working_set: working,
                alpha,
                history,
            });
        }

        // grow the gram matrix by one row and column
        let mut row: Vec<f64> = working.iter().map(|c| c.gram(&cand, lambda)).collect();
        row.push(cand.gram(&cand, lambda));
        for (g, v) in gram.iter_mut().zip(&row) {
            g.push(*v);
        }
        gram.push(row);
        working.push(cand);
        alpha.push(0.0);

        // spot-check one stored entry against a fresh product
        let k = working.len();
        let (i, j) = (round % k, k - 1);
        let fresh = working[i].gram(&working[j], lambda);
        if (fresh - gram[i][j]).abs() > 1e-8 * (1.0 + fresh.abs()) {
            log::debug!("gram drift at ({i}, {j}), rebuilding");
            for a in 0..k {
                for c in 0..k {
                    gram[a][c] = working[a].gram(&working[c], lambda);
                }
            }
        }
    }
    let (objective, _, _) = best.unwrap_or((f64::NAN, vec![], 0.0));
    Err(Error::NotConverged(format!(
        "cutting plane hit {} rounds; objective {objective:.6e}, lower bound {lower:.6e}, gap {:.3e} (epsilon {eps:.3e})",
        config.max_rounds,
        objective - lower
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{CacheEntry, EntryKey};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cache(rng: &mut ChaCha8Rng, k: usize, per: usize, dim: usize) -> Cache {
        let mut c = Cache::base(&vec![0; k], dim);
        for i in 0..k {
            for e in 0..per {
                c.insert(CacheEntry {
                    key: EntryKey {
                        example: i as u32,
                        class: 1,
                        latent: vec![(0, e as u32)],
                    },
                    feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    delta: 1.0,
                    easy_rounds: 0,
                })
                .unwrap();
            }
        }
        c
    }

    fn brute_max_loss(cache: &Cache, w: &[f64]) -> f64 {
        let k = cache.n_examples();
        let sizes: Vec<usize> = (0..k).map(|i| cache.entries(i).len()).collect();
        let mut idx = vec![0usize; k];
        let mut best = f64::NEG_INFINITY;
        loop {
            let mut loss = 0.0;
            for i in 0..k {
                loss += cache.entries(i)[idx[i]].value(w);
            }
            best = best.max(loss);
            let mut p = 0;
            while p < k {
                idx[p] += 1;
                if idx[p] < sizes[p] {
                    break;
                }
                idx[p] = 0;
                p += 1;
            }
            if p == k {
                return best;
            }
        }
    }

    #[test]
    fn loss_arithmetic() {
        let mut c = Cache::base(&[0], 2);
        c.insert(CacheEntry {
            key: EntryKey {
                example: 0,
                class: 1,
                latent: vec![],
            },
            feature: vec![1.0, 0.0],
            delta: 1.0,
            easy_rounds: 0,
        })
        .unwrap();
        let w = [2.0, 5.0];
        let cons = build_constraint(&c, vec![1]);
        assert_eq!(constraint_loss(&cons, &w), 3.0);
        let zero = build_constraint(&c, vec![0]);
        assert_eq!(constraint_loss(&zero, &w), 0.0);
    }

    #[test]
    fn most_violated_matches_product_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = random_cache(&mut rng, 3, 1, 4);
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = constraint_loss(&most_violated_constraint(&c, &w), &w);
            assert!((got - brute_max_loss(&c, &w)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_w_picks_unit_loss_rivals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cache(&mut rng, 4, 2, 3);
        let cons = most_violated_constraint(&c, &[0.0; 3]);
        assert_eq!(cons.delta_sum, 4.0);
    }

    #[test]
    fn base_cache_terminates_immediately() {
        let c = Cache::base(&[0, 1, 0], 5);
        let r = cutting_plane(&c, 0.1, &CuttingPlaneConfig::default()).unwrap();
        assert_eq!(r.rounds, 1);
        assert!(r.w.iter().all(|v| *v == 0.0));
        assert_eq!(r.xi, 0.0);
    }

    #[test]
    fn recovery_formula() {
        let c = Cache::base(&[0], 2);
        let mut cons = build_constraint(&c, vec![0]);
        cons.feature_sum = vec![1.0, -2.0];
        assert_eq!(
            recover_primal(&[0.0], std::slice::from_ref(&cons), 0.5, 2),
            vec![0.0, 0.0]
        );
        assert_eq!(recover_primal(&[0.25], &[cons], 0.5, 2), vec![-0.25, 0.5]);
    }

    /// Projected-free subgradient descent with averaging on the exact
    /// objective, as an independent reference.
    fn subgradient_min(cache: &Cache, lambda: f64, iters: usize) -> f64 {
        let dim = cache.dim();
        let mut w = vec![0.0; dim];
        let mut best = f64::INFINITY;
        for t in 1..=iters {
            let obj = crate::cache::cache_objective(&w, cache, lambda).unwrap();
            best = best.min(obj);
            let cons = most_violated_constraint(cache, &w);
            let step = 1.0 / (2.0 * lambda * t as f64);
            for (d, wi) in w.iter_mut().enumerate() {
                let g = 2.0 * lambda * *wi + cons.feature_sum[d];
                *wi -= step * g;
            }
        }
        best
    }

    #[test]
    fn cutting_plane_reaches_reference_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let c = random_cache(&mut rng, 4, 3, 3);
            let lambda = 0.3;
            let cfg = CuttingPlaneConfig {
                epsilon: Some(1e-6),
                ..Default::default()
            };
            let r = cutting_plane(&c, lambda, &cfg).unwrap();
            let reference = subgradient_min(&c, lambda, 200_000);
            let exact = crate::cache::cache_objective(&r.w, &c, lambda).unwrap();
            assert!((exact - r.objective).abs() < 1e-9);
            assert!(r.objective <= reference + 1e-6, "{} vs {}", r.objective, reference);
            assert!(r.gap() <= r.epsilon + 1e-12);
            for h in &r.history {
                assert!(h.alpha_min >= 0.0 || h.working_set == 0);
                assert!(h.alpha_sum <= 1.0 + 1e-12);
            }
            // lower bounds recorded over rounds never decrease
            let mut prev = f64::NEG_INFINITY;
            for h in &r.history {
                assert!(-h.dual_obj >= prev - 1e-9);
                prev = -h.dual_obj;
            }
        }
    }

    #[test]
    fn tighter_epsilon_never_worsens_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cache(&mut rng, 6, 3, 4);
        let mut prev = f64::INFINITY;
        for e in [1e-1, 5e-2, 2.5e-2, 1.25e-2, 6.25e-3] {
            let cfg = CuttingPlaneConfig {
                epsilon: Some(e),
                ..Default::default()
            };
            let r = cutting_plane(&c, 0.2, &cfg).unwrap();
            assert!(r.objective <= prev + 1e-9);
            prev = r.objective;
        }
    }

    #[test]
    fn recovery_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cache(&mut rng, 3, 2, 3);
        let r = cutting_plane(
            &c,
            0.5,
            &CuttingPlaneConfig {
                epsilon: Some(1e-6),
                ..Default::default()
            },
        )
        .unwrap();
        let rebuilt: Vec<Constraint> = r
            .working_set
            .iter()
            .map(|w| build_constraint(&c, w.choices.clone()))
            .collect();
        let a = recover_primal(&r.alpha, &r.working_set, 0.5, 3);
        let b = recover_primal(&r.alpha, &rebuilt, 0.5, 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
