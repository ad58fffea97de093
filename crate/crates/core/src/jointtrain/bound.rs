//! The convex upper bound on the joint objective as a function of the part
//! filters, for fixed part weights and a reference filter bank.
//!
//! For a rival class `y` of example `i`, slot `s` enters the hinge with
//! coefficient `c_s = u_{y,s} − u_{yᵢ,s}`. Slots with `c_s ≥ 0` keep the
//! maximization over locations (convex in `w`); slots with `c_s < 0` have
//! their location fixed at the maximizer under the reference bank, which
//! lower-bounds the max and hence upper-bounds `c_s · r_s`.

use crate::cache::{Cache, CacheEntry, EntryKey};
use crate::error::{Error, Result};
use crate::model::{combine_views, PartBank, PartWeights, TrainingSet};
use crate::par;

#[derive(Clone, Debug)]
pub struct BoundContext {
    w_old: PartBank,
    u: PartWeights,
    /// Per example, the maximizing location index under `w_old`, indexed
    /// `slot * n_views + view`.
    anchors: Vec<Vec<Option<u32>>>,
    /// Row `y * n + y'` holds the slots where `u_y − u_{y'} ≥ 0`; its
    /// complement is the anchored set.
    masks: Vec<Vec<bool>>,
}

/// Per-example scores of every part at every location of every view.
struct ScoreTable {
    /// `[part][view][location]`
    scores: Vec<Vec<Vec<f64>>>,
}

impl ScoreTable {
    fn new(data: &TrainingSet, i: usize, w: &PartBank) -> Self {
        let ex = &data.examples[i];
        Self {
            scores: w
                .parts
                .iter()
                .map(|p| ex.views.iter().map(|v| v.scores(&p.weights)).collect())
                .collect(),
        }
    }
}

pub fn build_bound(u: &PartWeights, w_old: &PartBank, data: &TrainingSet) -> Result<BoundContext> {
    if u.n_parts != w_old.len() || u.n_regions != data.n_regions() || u.n_classes != data.n_classes {
        return Err(Error::DimensionMismatch {
            expected: w_old.len() * data.n_regions(),
            actual: u.cols(),
        });
    }
    if w_old.part_len() != data.part_len() {
        return Err(Error::DimensionMismatch {
            expected: data.part_len(),
            actual: w_old.part_len(),
        });
    }
    let anchors = data.responses(w_old).into_iter().map(|r| r.argmax).collect();
    let n = u.n_classes;
    let mut masks = Vec::with_capacity(n * n);
    for y in 0..n {
        for yp in 0..n {
            masks.push((0..u.cols()).map(|s| u.get(y, s) - u.get(yp, s) >= 0.0).collect());
        }
    }
    Ok(BoundContext {
        w_old: w_old.clone(),
        u: u.clone(),
        anchors,
        masks,
    })
}

impl BoundContext {
    pub fn w_old(&self) -> &PartBank {
        &self.w_old
    }

    pub fn u(&self) -> &PartWeights {
        &self.u
    }

    /// Anchor indices of example `i`, `slot * n_views + view`.
    pub fn anchors(&self, i: usize) -> &[Option<u32>] {
        &self.anchors[i]
    }

    /// Diagonal of `S_{y,y'}`.
    pub fn mask(&self, y: usize, y_prime: usize) -> &[bool] {
        &self.masks[y * self.u.n_classes + y_prime]
    }

    /// Bound values `1 + Σ_s c_s · r̃_s` of every class for example `i` under
    /// `w` (0 for the example's own class), with the free maximizers.
    fn class_values(&self, i: usize, w: &PartBank, data: &TrainingSet) -> (Vec<f64>, Vec<Option<u32>>) {
        let ex = &data.examples[i];
        let nv = ex.views.len();
        let r = data.n_regions();
        let table = ScoreTable::new(data, i, w);
        let n_slots = w.len() * r;
        let mut free = vec![0.0; n_slots];
        let mut anchored = vec![0.0; n_slots];
        let mut free_arg = vec![None; n_slots * nv];
        let mut fv = vec![0.0; nv];
        let mut av = vec![0.0; nv];
        for j in 0..w.len() {
            for rho in 0..r {
                let s = j * r + rho;
                for (v, view) in ex.views.iter().enumerate() {
                    let (best, arg) = view.region_max(&table.scores[j][v], rho);
                    fv[v] = best;
                    free_arg[s * nv + v] = arg;
                    av[v] = self.anchors[i][s * nv + v].map_or(0.0, |a| table.scores[j][v][a as usize]);
                }
                free[s] = combine_views(&fv);
                anchored[s] = combine_views(&av);
            }
        }
        let yi = ex.label;
        let values = (0..self.u.n_classes)
            .map(|y| {
                if y == yi {
                    return 0.0;
                }
                let mask = self.mask(y, yi);
                let mut v = 1.0;
                for s in 0..n_slots {
                    let c = self.u.get(y, s) - self.u.get(yi, s);
                    v += c * if mask[s] { free[s] } else { anchored[s] };
                }
                v
            })
            .collect();
        (values, free_arg)
    }

    /// `max(0, max_{y≠yᵢ} …)` for example `i`.
    pub fn example_bound(&self, i: usize, w: &PartBank, data: &TrainingSet) -> f64 {
        self.class_values(i, w, data).0.into_iter().fold(0.0, f64::max)
    }

    /// The loss-augmented argmax hypothesis of example `i` as a cache entry.
    pub fn hardest_hypothesis(&self, i: usize, w: &PartBank, data: &TrainingSet) -> CacheEntry {
        let (values, free_arg) = self.class_values(i, w, data);
        let y = crate::model::argmax_lowest(&values);
        let dim = w.len() * w.part_len();
        let yi = data.examples[i].label;
        if y == yi {
            return CacheEntry::zero(i, yi, dim);
        }
        let nv = data.examples[i].views.len();
        let n_slots = w.len() * data.n_regions();
        let mut latent = Vec::new();
        for s in 0..n_slots {
            if self.u.get(y, s) - self.u.get(yi, s) > 0.0 {
                for v in 0..nv {
                    if let Some(z) = free_arg[s * nv + v] {
                        latent.push(((s * nv + v) as u32, z));
                    }
                }
            }
        }
        self.entry(i, y, latent, data)
    }

    /// Builds the entry for hypothesis `(y, latent)` of example `i`. Slots
    /// with a positive coefficient use the recorded location, or the anchor
    /// when none is recorded; slots with a negative coefficient use the
    /// anchor.
    pub fn entry(&self, i: usize, y: usize, latent: Vec<(u32, u32)>, data: &TrainingSet) -> CacheEntry {
        let ex = &data.examples[i];
        let nv = ex.views.len();
        let r = data.n_regions();
        let pl = data.part_len();
        let m = self.w_old.len();
        let yi = ex.label;
        let mut feature = vec![0.0; m * pl];
        if y != yi {
            let mut chosen = self.anchors[i].clone();
            for &(sv, z) in &latent {
                let s = sv as usize / nv;
                if self.u.get(y, s) - self.u.get(yi, s) > 0.0 {
                    chosen[sv as usize] = Some(z);
                }
            }
            let wv = ex.view_weight();
            for j in 0..m {
                let block = &mut feature[j * pl..(j + 1) * pl];
                for rho in 0..r {
                    let s = j * r + rho;
                    let c = self.u.get(y, s) - self.u.get(yi, s);
                    if c == 0.0 {
                        continue;
                    }
                    for (v, view) in ex.views.iter().enumerate() {
                        if let Some(z) = chosen[s * nv + v] {
                            let psi = view.psi(z as usize);
                            let a = c * wv;
                            for (b, p) in block.iter_mut().zip(psi) {
                                *b += a * p;
                            }
                        }
                    }
                }
            }
        }
        CacheEntry {
            key: EntryKey {
                example: i as u32,
                class: y as u32,
                latent: if y == yi { vec![] } else { latent },
            },
            feature,
            delta: if y == yi { 0.0 } else { 1.0 },
            easy_rounds: 0,
        }
    }

    /// Recomputes every entry of `cache` under this context's anchors.
    pub fn remap_cache(&self, cache: &Cache, data: &TrainingSet) -> Result<Cache> {
        let dim = self.w_old.len() * self.w_old.part_len();
        if cache.dim() != dim || cache.n_examples() != data.len() {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: cache.dim(),
            });
        }
        let mut out = Cache::base(&data.labels(), dim);
        let remapped = par::map(&cache.iter().collect::<Vec<_>>(), |e| {
            self.entry(e.example(), e.key.class as usize, e.key.latent.clone(), data)
        });
        for e in remapped {
            out.insert(e)?;
        }
        Ok(out)
    }
}

/// `B(w) = λ_w‖w‖² + Σᵢ max{0, max_{y≠yᵢ} 1 + (u_y − u_{yᵢ})·[S r(w) + S̄ r̄(w)]}`
/// where `r̄` scores the anchored locations.
pub fn bound_b(w: &PartBank, ctx: &BoundContext, data: &TrainingSet, lambda_w: f64) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let hinge: f64 = par::map(&idx, |&i| ctx.example_bound(i, w, data)).into_iter().sum();
    lambda_w * w.norm_sq() + hinge
}
