//! The dual of the 1-slack QP:
//!
//! ```text
//! min_α  ½ αᵀMα + αᵀb   s.t.  α ≥ 0,  Σα ≤ 1
//! ```
//!
//! The inequality is turned into an equality with an implicit slack variable
//! whose gradient is always zero; the problem then lives on a simplex and is
//! solved by exchanging mass between the most violating pair of coordinates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct DualOptions {
    /// Tolerance on the maximal violating-pair gradient gap. On the simplex
    /// this gap bounds the distance of the objective from its minimum. It is
    /// raised to the round-off level of the gradient when smaller.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// ½αᵀMα + αᵀb at `alpha`.
    pub objective: f64,
    pub iterations: usize,
    /// Final violating-pair gap.
    pub kkt_gap: f64,
}

pub fn dual_objective(m: &DMatrix<f64>, b: &[f64], alpha: &[f64]) -> f64 {
    let n = b.len();
    let mut q = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * alpha[j];
        }
        q += alpha[i] * row;
    }
    0.5 * q + alpha.iter().zip(b).map(|(a, bb)| a * bb).sum::<f64>()
}

fn check_psd(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        if m[(i, i)] < -tol {
            return Err(Error::NotPsd(m[(i, i)]));
        }
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * (1.0 + m[(i, j)].abs()) {
                return Err(Error::InvalidParameter("gram matrix is not symmetric".into()));
            }
            let bound = (m[(i, i)].max(0.0) * m[(j, j)].max(0.0)).sqrt();
            if m[(i, j)].abs() > bound + tol * (1.0 + bound) {
                return Err(Error::NotPsd(bound - m[(i, j)].abs()));
            }
        }
    }
    Ok(())
}

/// Solves the dual by pairwise coordinate exchange, optionally warm-started
/// from a feasible `init`.
pub fn solve_dual(m: &DMatrix<f64>, b: &[f64], init: Option<&[f64]>, opts: DualOptions) -> Result<DualSolution> {
    let n = b.len();
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: m.nrows(),
        });
    }
    if n == 0 {
        return Ok(DualSolution {
            alpha: vec![],
            objective: 0.0,
            iterations: 0,
            kkt_gap: 0.0,
        });
    }
    let scale = 1.0 + (0..n).map(|i| m[(i, i)].abs().max(b[i].abs())).fold(0.0, f64::max);
    check_psd(m, 1e-9 * scale)?;

    // x[0..n] = α, x[n] = slack
    let mut x = vec![0.0; n + 1];
    match init {
        Some(a) if a.len() == n && a.iter().all(|v| *v >= 0.0) && a.iter().sum::<f64>() <= 1.0 => {
            x[..n].copy_from_slice(a);
        }
        _ => {}
    }
    x[n] = (1.0 - x[..n].iter().sum::<f64>()).max(0.0);

    let entry = |i: usize, j: usize| if i < n && j < n { m[(i, j)] } else { 0.0 };
    let mut g = vec![0.0; n + 1];
    // Recomputes the gradient and returns the round-off floor of its entries.
    let refresh = |x: &[f64], g: &mut [f64]| -> f64 {
        let mut mag: f64 = 0.0;
        for i in 0..n {
            let mut acc = b[i];
            let mut abs = b[i].abs();
            for j in 0..n {
                let t = m[(i, j)] * x[j];
                acc += t;
                abs += t.abs();
            }
            g[i] = acc;
            mag = mag.max(abs);
        }
        1e-13 * (1.0 + mag)
    };
    let mut floor = refresh(&x, &mut g);
    let mut fresh = true;
    let refresh_every = 10 * (n + 1);

    let mut iterations = 0;
    let mut gap;
    loop {
        // first index: the largest gradient among coordinates holding mass
        let mut up = usize::MAX;
        let mut low = 0;
        for k in 0..=n {
            if x[k] > 0.0 && (up == usize::MAX || g[k] > g[up]) {
                up = k;
            }
            if g[k] < g[low] {
                low = k;
            }
        }
        gap = g[up] - g[low];
        if gap <= opts.tol.max(floor) {
            if !fresh {
                // confirm against an exact gradient before stopping
                floor = refresh(&x, &mut g);
                fresh = true;
                continue;
            }
            break;
        }
        if iterations >= opts.max_iter {
            if n <= 3 {
                return solve_dual_active_set(m, b);
            }
            return Err(Error::NotConverged(format!(
                "dual solver hit {} iterations with KKT gap {gap:e}",
                opts.max_iter
            )));
        }
        // second index: the largest predicted decrease
        let gu = g[up];
        let muu = entry(up, up);
        let mut best_gain = -1.0;
        for k in 0..=n {
            let d = gu - g[k];
            if d <= 0.0 {
                continue;
            }
            let curv = (muu + entry(k, k) - 2.0 * entry(up, k)).max(1e-12 * scale);
            let gain = d * d / curv;
            if gain > best_gain {
                best_gain = gain;
                low = k;
            }
        }
        iterations += 1;
        let d = gu - g[low];
        let curvature = muu + entry(low, low) - 2.0 * entry(up, low);
        let mut t = x[up];
        if curvature > 0.0 {
            t = t.min(d / curvature);
        }
        x[up] -= t;
        x[low] += t;
        if x[up] < 1e-300 {
            x[up] = 0.0;
        }
        for k in 0..n {
            g[k] += t * (entry(k, low) - entry(k, up));
        }
        fresh = false;
        if iterations % refresh_every == 0 {
            if iterations % (4 * refresh_every) == 0 {
                support_newton_step(m, b, &mut x);
            }
            floor = refresh(&x, &mut g);
            fresh = true;
        }
    }
    let alpha = x[..n].to_vec();
    Ok(DualSolution {
        objective: dual_objective(m, b, &alpha),
        alpha,
        iterations,
        kkt_gap: gap,
    })
}

/// Moves `x` toward the minimizer over the affine hull of its support, as far
/// as feasibility allows. Exchange steps alone crawl when `M` is badly
/// conditioned; this finishes the job once the support has settled.
fn support_newton_step(m: &DMatrix<f64>, b: &[f64], x: &mut [f64]) {
    let n = b.len();
    let support: Vec<usize> = (0..=n).filter(|&k| x[k] > 0.0).collect();
    let k = support.len();
    if k < 2 {
        return;
    }
    let entry = |i: usize, j: usize| if i < n && j < n { m[(i, j)] } else { 0.0 };
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for (a, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            kkt[(a, c)] = entry(i, j);
        }
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
        rhs[a] = if i < n { -b[i] } else { 0.0 };
    }
    rhs[k] = 1.0;
    let eps = 1e-13 * kkt.amax().max(1.0);
    let Ok(sol) = kkt.svd(true, true).solve(&rhs, eps) else {
        return;
    };
    let mut t: f64 = 1.0;
    for (a, &i) in support.iter().enumerate() {
        let d = sol[a] - x[i];
        if !d.is_finite() {
            return;
        }
        if d < 0.0 {
            t = t.min(-x[i] / d);
        }
    }
    let before = dual_objective(m, b, &x[..n]);
    let mut y = x.to_vec();
    for (a, &i) in support.iter().enumerate() {
        y[i] = (x[i] + t * (sol[a] - x[i])).max(0.0);
    }
    let total: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= total);
    if dual_objective(m, b, &y[..n]) < before {
        x.copy_from_slice(&y);
    }
}

/// Exact solution by enumerating active sets. Exponential in `n`; intended
/// for `n ≤ 3` as a fallback and as an independent check.
pub fn solve_dual_active_set(m: &DMatrix<f64>, b: &[f64]) -> Result<DualSolution> {
    let n = b.len();
    if n > 16 {
        return Err(Error::InvalidParameter(
            "active-set enumeration is limited to 16 constraints".into(),
        ));
    }
    let feas_tol = 1e-12;
    let mut best = DualSolution {
        alpha: vec![0.0; n],
        objective: 0.0,
        iterations: 0,
        kkt_gap: 0.0,
    };
    for mask in 1u32..(1u32 << n) {
        let s: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = s.len();
        let mss = DMatrix::from_fn(k, k, |i, j| m[(s[i], s[j])]);
        let bs = DVector::from_iterator(k, s.iter().map(|&i| -b[i]));
        let mut candidates = Vec::new();
        if let Some(a) = mss.clone().lu().solve(&bs) {
            candidates.push(a);
        }
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        kkt.view_mut((0, 0), (k, k)).copy_from(&mss);
        for i in 0..k {
            kkt[(i, k)] = 1.0;
            kkt[(k, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(k + 1);
        rhs.rows_mut(0, k).copy_from(&bs);
        rhs[k] = 1.0;
        if let Some(sol) = kkt.lu().solve(&rhs) {
            candidates.push(sol.rows(0, k).into_owned());
        }
        for a in candidates {
            if a.iter().any(|v| !v.is_finite() || *v < -feas_tol) || a.sum() > 1.0 + feas_tol {
                continue;
            }
            let mut alpha = vec![0.0; n];
            for (i, &si) in s.iter().enumerate() {
                alpha[si] = a[i].max(0.0);
            }
            let obj = dual_objective(m, b, &alpha);
            if obj < best.objective {
                best = DualSolution {
                    alpha,
                    objective: obj,
                    iterations: 0,
                    kkt_gap: 0.0,
                };
            }
        }
    }
    Ok(best)
}
