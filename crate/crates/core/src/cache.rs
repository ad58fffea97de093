//! Hard-example caching for minimizing the convex bound over part filters.
//!
//! A cache holds, per training example, a set of hypotheses `(y, z)` reduced
//! to a feature vector `f` (same layout as the flattened part bank) and a loss
//! `δ`, so that the hypothesis scores `wᵀf + δ`. The zero hypothesis of each
//! example (its own class, `f = 0`, `δ = 0`) is always present.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jointtrain::BoundContext;
use crate::model::{dot, PartBank, TrainingSet};
use crate::par;
use crate::qpsolver::{cutting_plane, CuttingPlaneConfig, CuttingPlaneResult};

/// Provenance of a cache entry. `latent` lists `(slot * n_views + view,
/// location index)` for the slots whose location was chosen freely; anchored
/// slots are implied by the bound context.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EntryKey {
    pub example: u32,
    pub class: u32,
    pub latent: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub key: EntryKey,
    pub feature: Vec<f64>,
    pub delta: f64,
    /// Consecutive eviction checks at which the entry was easy.
    pub easy_rounds: u32,
}

impl CacheEntry {
    pub fn zero(example: usize, label: usize, dim: usize) -> Self {
        Self {
            key: EntryKey {
                example: example as u32,
                class: label as u32,
                latent: vec![],
            },
            feature: vec![0.0; dim],
            delta: 0.0,
            easy_rounds: 0,
        }
    }

    pub fn example(&self) -> usize {
        self.key.example as usize
    }

    /// `wᵀf + δ`.
    pub fn value(&self, w: &[f64]) -> f64 {
        dot(w, &self.feature) + self.delta
    }
}

/// Entries grouped by example, each group sorted by key.
#[derive(Clone, Debug, PartialEq)]
pub struct Cache {
    dim: usize,
    labels: Vec<usize>,
    groups: Vec<Vec<CacheEntry>>,
}

impl Cache {
    /// The base cache `C₀`: one zero entry per example.
    pub fn base(labels: &[usize], dim: usize) -> Self {
        Self {
            dim,
            labels: labels.to_vec(),
            groups: labels
                .iter()
                .enumerate()
                .map(|(i, &y)| vec![CacheEntry::zero(i, y, dim)])
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_examples(&self) -> usize {
        self.groups.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn entries(&self, example: usize) -> &[CacheEntry] {
        &self.groups[example]
    }

    pub fn iter(&self) -> impl Iterator<Item = &CacheEntry> {
        self.groups.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &EntryKey) -> bool {
        self.groups
            .get(key.example as usize)
            .is_some_and(|g| g.binary_search_by(|e| e.key.cmp(key)).is_ok())
    }

    fn is_zero_key(&self, key: &EntryKey) -> bool {
        key.latent.is_empty() && key.class as usize == self.labels[key.example as usize]
    }

    /// Inserts `entry` unless an entry with the same key exists. Returns
    /// whether it was added.
    pub fn insert(&mut self, entry: CacheEntry) -> Result<bool> {
        if entry.feature.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: entry.feature.len(),
            });
        }
        let group = self
            .groups
            .get_mut(entry.example())
            .ok_or_else(|| Error::InvalidParameter(format!("entry for unknown example {}", entry.key.example)))?;
        match group.binary_search_by(|e| e.key.cmp(&entry.key)) {
            Ok(_) => Ok(false),
            Err(pos) => {
                group.insert(pos, entry);
                Ok(true)
            }
        }
    }

    /// Drops entries that had `wᵀf + δ < 0` at `patience` consecutive calls,
    /// this one included. Zero entries are always kept. Returns the number
    /// removed.
    pub fn evict_easy(&mut self, w: &[f64], patience: u32) -> usize {
        let mut removed = 0;
        for i in 0..self.groups.len() {
            let label = self.labels[i];
            let before = self.groups[i].len();
            self.groups[i].retain_mut(|e| {
                if e.key.latent.is_empty() && e.key.class as usize == label {
                    return true;
                }
                e.easy_rounds = if e.value(w) < 0.0 { e.easy_rounds + 1 } else { 0 };
                e.easy_rounds < patience.max(1)
            });
            removed += before - self.groups[i].len();
        }
        removed
    }

    /// Hash of the entry keys and their eviction counters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.iter() {
            e.key.hash(&mut h);
            e.easy_rounds.hash(&mut h);
        }
        h.finish()
    }

    fn check_base(&self) -> Result<()> {
        for (i, g) in self.groups.iter().enumerate() {
            if !g.iter().any(|e| self.is_zero_key(&e.key)) {
                return Err(Error::InvalidParameter(format!(
                    "example {i} lost its zero cache entry"
                )));
            }
        }
        Ok(())
    }
}

/// `B_C(w) = λ‖w‖² + Σᵢ max_{e ∈ Cᵢ} (wᵀf + δ)`.
pub fn cache_objective(w: &[f64], cache: &Cache, lambda_w: f64) -> Result<f64> {
    let mut total = lambda_w * dot(w, w);
    for (i, g) in cache.groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::InvalidParameter(format!("example {i} has no cache entries")));
        }
        total += g.iter().map(|e| e.value(w)).fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(total)
}

/// Per example, the hypothesis with the largest `wᵀΦ + Δ` under the bound
/// context (lowest class on ties, the example's own class included).
pub fn find_hard_examples(w: &PartBank, ctx: &BoundContext, data: &TrainingSet) -> Vec<CacheEntry> {
    let idx: Vec<usize> = (0..data.len()).collect();
    par::map(&idx, |&i| ctx.hardest_hypothesis(i, w, data))
}

#[derive(Clone, Copy, Debug)]
pub struct CacheConfig {
    pub max_rounds: usize,
    /// Rounds an entry must stay easy before it is evicted.
    pub evict_patience: u32,
    /// Stop after this many rounds in which neither the best full bound nor
    /// the lower bound moved by more than the certification tolerance.
    pub stall_rounds: usize,
    pub solver: CuttingPlaneConfig,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            evict_patience: 3,
            stall_rounds: 5,
            solver: CuttingPlaneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CacheRound {
    pub round: usize,
    pub cache_size: usize,
    pub mined: usize,
    pub evicted: usize,
    pub objective: f64,
    pub solver_rounds: usize,
}

#[derive(Clone, Debug)]
pub struct CacheOutcome {
    pub bank: PartBank,
    pub cache: Cache,
    /// The full bound at `bank`.
    pub objective: f64,
    /// Largest dual lower bound seen; it bounds the minimum of the full bound
    /// from below as well, since every cache gives an underestimate.
    pub lower_bound: f64,
    pub rounds: Vec<CacheRound>,
    /// Solver results, one per solve.
    pub solves: Vec<CuttingPlaneResult>,
    pub converged: bool,
}

/// Minimizes the convex bound described by `ctx` over the part filters,
/// alternating exact solves over the cache with hard-example mining and
/// eviction of easy entries.
///
/// The loop ends when the hard set is already cached, or when the full bound
/// at the current filters is within twice the solver tolerance of the best
/// lower bound. Solves are only accurate to the tolerance and entries near the
/// margin keep changing with them, so the first test rarely fires on real
/// data. When many part slots are free the cached maximum over joint
/// placements also approaches the full bound slowly; the loop then stops once
/// both bounds stall. The filters with the lowest full bound are
/// returned, so the result never exceeds the bound at the first solve.
///
/// A `warm_cache` from an earlier call has its features recomputed under
/// `ctx` before the first solve.
pub fn optimize_with_cache(
    ctx: &BoundContext,
    data: &TrainingSet,
    lambda_w: f64,
    warm_cache: Option<&Cache>,
    config: &CacheConfig,
) -> Result<CacheOutcome> {
    optimize_with_cache_observed(ctx, data, lambda_w, warm_cache, config, |_, _| {})
}

/// [`optimize_with_cache`] that also hands every solve, with the cache it
/// was run on, to `observe`.
pub fn optimize_with_cache_observed(
    ctx: &BoundContext,
    data: &TrainingSet,
    lambda_w: f64,
    warm_cache: Option<&Cache>,
    config: &CacheConfig,
    mut observe: impl FnMut(&Cache, &CuttingPlaneResult),
) -> Result<CacheOutcome> {
    if lambda_w <= 0.0 {
        return Err(Error::InvalidParameter("lambda_w must be positive".into()));
    }
    let template = ctx.w_old();
    let dim = template.len() * template.part_len();
    let mut cache = match warm_cache {
        Some(c) => ctx.remap_cache(c, data)?,
        None => Cache::base(&data.labels(), dim),
    };
    let mut seen = HashSet::new();
    let mut rounds = Vec::new();
    let mut solves = Vec::new();
    let mut mined_count = 0;
    let mut evicted = 0;
    let mut converged = false;
    let mut lower = f64::NEG_INFINITY;
    let mut best: Option<(f64, PartBank)> = None;
    let mut stalled = 0;

    for round in 1..=config.max_rounds {
        cache.check_base()?;
        if !seen.insert(cache.fingerprint()) {
            log::warn!("cache round {round}: cache repeated, stopping");
            break;
        }
        let sol = cutting_plane(&cache, lambda_w, &config.solver)?;
        observe(&cache, &sol);
        let w = PartBank::from_flat(&sol.w, template.window(), template.dim())?;
        let hard = find_hard_examples(&w, ctx, data);
        let full = lambda_w * dot(&sol.w, &sol.w) + hard.iter().map(|e| e.value(&sol.w)).sum::<f64>();
        let lower_rose = sol.lower_bound > lower + 2.0 * sol.epsilon;
        lower = lower.max(sol.lower_bound);
        log::debug!(
            "cache round {round}: {} entries, cached objective {:.6}, full {full:.6}, lower {lower:.6}, {} solver rounds",
            cache.len(),
            sol.objective,
            sol.rounds
        );
        rounds.push(CacheRound {
            round,
            cache_size: cache.len(),
            mined: mined_count,
            evicted,
            objective: full,
            solver_rounds: sol.rounds,
        });
        let tol = 2.0 * sol.epsilon;
        match &best {
            Some((b, _)) if full >= *b - tol && !lower_rose => stalled += 1,
            _ => stalled = 0,
        }
        if best.as_ref().is_none_or(|(b, _)| full < *b) {
            best = Some((full, w));
        }
        let flat = sol.w.clone();
        solves.push(sol);
        if hard.iter().all(|e| cache.contains(&e.key)) || best.as_ref().unwrap().0 <= lower + tol {
            converged = true;
            break;
        }
        if config.stall_rounds > 0 && stalled >= config.stall_rounds {
            log::debug!(
                "cache loop stalled at round {round}; gap to lower bound {:.3e}",
                best.as_ref().unwrap().0 - lower
            );
            break;
        }
        evicted = cache.evict_easy(&flat, config.evict_patience);
        mined_count = 0;
        for e in hard {
            if cache.insert(e)? {
                mined_count += 1;
            }
        }
    }
    if !converged && rounds.len() == config.max_rounds {
        log::warn!(
            "cache loop stopped after {} rounds without certifying the bound",
            rounds.len()
        );
    }
    let (objective, bank) = best.ok_or_else(|| Error::NotConverged("no cache round was run".into()))?;
    Ok(CacheOutcome {
        bank,
        objective,
        lower_bound: lower,
        cache,
        rounds,
        solves,
        converged,
    })
}
