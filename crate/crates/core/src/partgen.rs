//! Random part initialization.
//!
//! A part is born from a random training image and a random window on it:
//! its filter is the whitened patch feature of that window. Only the most
//! discriminative fraction of windows (largest whitened norm) is eligible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    discriminability_filter, extract_patch_feature, extract_patch_feature_into, fit_whitening, FeaturePyramid,
    LatentLocation, WhiteningModel, Window,
};
use crate::model::{LabeledExample, PartBank, PartFilter};
use crate::par;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartPoolConfig {
    pub pool_size: usize,
    pub window: Window,
    pub keep_fraction: f64,
    pub seed: u64,
    /// Redraws allowed when a draw repeats an earlier `(image, location)`.
    pub max_retries: usize,
}

impl Default for PartPoolConfig {
    fn default() -> Self {
        Self {
            pool_size: 1000,
            window: Window::new(6, 6),
            keep_fraction: 0.5,
            seed: 0,
            max_retries: 10,
        }
    }
}

/// Where a pooled part came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartProvenance {
    pub part: usize,
    pub image: usize,
    pub image_id: String,
    pub location: LatentLocation,
}

/// Eligible locations per image after the discriminability filter.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub per_image: Vec<Vec<LatentLocation>>,
}

impl Candidates {
    pub fn compute(dataset: &[LabeledExample], whitening: &WhiteningModel, config: &PartPoolConfig) -> Result<Self> {
        let per_image = par::map(dataset, |e| {
            if e.pyramid.locations(config.window).is_empty() {
                return Ok(vec![]);
            }
            discriminability_filter(&e.pyramid, whitening, config.window, config.keep_fraction)
        });
        let per_image = per_image.into_iter().collect::<Result<Vec<_>>>()?;
        if per_image.iter().all(Vec::is_empty) {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { per_image })
    }

    fn eligible_images(&self) -> Vec<usize> {
        (0..self.per_image.len())
            .filter(|&i| !self.per_image[i].is_empty())
            .collect()
    }
}

/// Draws one `(image, location)` pair: a uniform image among those with
/// eligible windows, then a uniform eligible window. Labels play no role.
pub fn draw_location<R: Rng>(candidates: &Candidates, rng: &mut R) -> Result<(usize, LatentLocation)> {
    let images = candidates.eligible_images();
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let img = images[rng.random_range(0..images.len())];
    let locs = &candidates.per_image[img];
    Ok((img, locs[rng.random_range(0..locs.len())]))
}

/// The whitened patch feature at `(image, location)` as a part filter.
pub fn part_from_location(
    dataset: &[LabeledExample],
    whitening: &WhiteningModel,
    window: Window,
    image: usize,
    location: LatentLocation,
    part_id: usize,
) -> Result<PartFilter> {
    let pyr = &dataset
        .get(image)
        .ok_or_else(|| Error::InvalidParameter(format!("image {image} out of range")))?
        .pyramid;
    let psi = extract_patch_feature(pyr, location, window)?;
    PartFilter::new(whitening.whiten(&psi)?, window, pyr.dim(), part_id)
}

pub fn sample_random_part<R: Rng>(
    dataset: &[LabeledExample],
    whitening: &WhiteningModel,
    candidates: &Candidates,
    config: &PartPoolConfig,
    rng: &mut R,
) -> Result<(PartFilter, PartProvenance)> {
    let (image, location) = draw_location(candidates, rng)?;
    let filter = part_from_location(dataset, whitening, config.window, image, location, 0)?;
    Ok((
        filter,
        PartProvenance {
            part: 0,
            image,
            image_id: dataset[image].pyramid.source_id.clone(),
            location,
        },
    ))
}

/// The random stream of pool slot `slot`; independent of every other slot.
fn slot_rng(seed: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slot as u64);
    rng
}

/// Draws `pool_size` parts. Slot `s` uses its own random stream, so the pool
/// does not depend on evaluation order. A draw that repeats an earlier slot's
/// `(image, location)` is redrawn from the same stream up to `max_retries`
/// times and then accepted.
pub fn build_part_pool(
    dataset: &[LabeledExample],
    whitening: &WhiteningModel,
    config: &PartPoolConfig,
) -> Result<(PartBank, Vec<PartProvenance>)> {
    if config.pool_size == 0 {
        return Err(Error::InvalidParameter("pool_size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cells_dim = config.window.cells() * dataset[0].pyramid.dim();
    if whitening.dim() != cells_dim {
        return Err(Error::DimensionMismatch {
            expected: cells_dim,
            actual: whitening.dim(),
        });
    }
    let candidates = Candidates::compute(dataset, whitening, config)?;
    let mut taken = std::collections::HashSet::new();
    let mut draws = Vec::with_capacity(config.pool_size);
    for slot in 0..config.pool_size {
        let mut rng = slot_rng(config.seed, slot);
        let mut pick = draw_location(&candidates, &mut rng)?;
        for _ in 0..config.max_retries {
            if !taken.contains(&pick) {
                break;
            }
            pick = draw_location(&candidates, &mut rng)?;
        }
        taken.insert(pick);
        draws.push(pick);
    }
    let parts = par::map(&draws.iter().enumerate().collect::<Vec<_>>(), |&(slot, &(img, loc))| {
        part_from_location(dataset, whitening, config.window, img, loc, slot)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let provenance = draws
        .iter()
        .enumerate()
        .map(|(part, &(image, location))| PartProvenance {
            part,
            image,
            image_id: dataset[image].pyramid.source_id.clone(),
            location,
        })
        .collect();
    Ok((PartBank::new(parts)?, provenance))
}

/// Window features at `count` random placements, each from a uniformly drawn
/// image, for fitting the background statistics.
pub fn sample_window_features(
    pyramids: &[&FeaturePyramid],
    window: Window,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let usable: Vec<(&FeaturePyramid, Vec<LatentLocation>)> = pyramids
        .iter()
        .map(|p| (*p, p.locations(window)))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = window.cells() * usable[0].0.dim();
    (0..count)
        .map(|_| {
            let (p, locs) = &usable[rng.random_range(0..usable.len())];
            let z = locs[rng.random_range(0..locs.len())];
            let mut f = vec![0.0; dim];
            extract_patch_feature_into(p, z, window, &mut f)?;
            Ok(f)
        })
        .collect()
}

/// Fits the window-level whitening model on random placements over the
/// corpus (mirrors included when present).
pub fn fit_background_whitening(
    dataset: &[LabeledExample],
    window: Window,
    samples: usize,
    shrinkage: f64,
    seed: u64,
) -> Result<WhiteningModel> {
    let mut pyrs: Vec<&FeaturePyramid> = Vec::new();
    for e in dataset {
        pyrs.push(&e.pyramid);
        if let Some(m) = &e.mirrored {
            pyrs.push(m);
        }
    }
    fit_whitening(&sample_window_features(&pyrs, window, samples, seed)?, shrinkage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::test_util::random_pyramid;
    use crate::features::Level;

    fn corpus(n: usize, shape: (usize, usize)) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample {
                pyramid: random_pyramid(100 + i as u64, &[shape], 3),
                mirrored: None,
                label: i % 2,
            })
            .collect()
    }

    fn cfg(pool: usize, seed: u64) -> PartPoolConfig {
        PartPoolConfig {
            pool_size: pool,
            window: Window::new(2, 2),
            keep_fraction: 0.5,
            seed,
            max_retries: 10,
        }
    }

    #[test]
    fn single_location_corpus_is_deterministic() {
        let data = corpus(1, (2, 2));
        let wm = fit_background_whitening(&corpus(4, (5, 5)), Window::new(2, 2), 200, 0.1, 1).unwrap();
        let (bank, prov) = build_part_pool(&data, &wm, &cfg(3, 9)).unwrap();
        let psi = extract_patch_feature(&data[0].pyramid, LatentLocation::new(0, 0, 0), Window::new(2, 2)).unwrap();
        let expect = wm.whiten(&psi).unwrap();
        for (p, pr) in bank.parts.iter().zip(&prov) {
            assert_eq!(p.weights, expect);
            assert_eq!(pr.location, LatentLocation::new(0, 0, 0));
        }
    }

    #[test]
    fn same_seed_same_pool_different_seed_differs() {
        let data = corpus(10, (5, 6));
        let wm = fit_background_whitening(&data, Window::new(2, 2), 300, 0.1, 2).unwrap();
        let a = build_part_pool(&data, &wm, &cfg(8, 1)).unwrap();
        let b = build_part_pool(&data, &wm, &cfg(8, 1)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        for s in 0..5u64 {
            let x = build_part_pool(&data, &wm, &cfg(8, 10 + 2 * s)).unwrap();
            let y = build_part_pool(&data, &wm, &cfg(8, 11 + 2 * s)).unwrap();
            assert_ne!(x.0, y.0);
        }
    }

    #[test]
    fn sampled_locations_are_in_the_top_half() {
        let data = corpus(2, (6, 6));
        let wm = fit_background_whitening(&data, Window::new(2, 2), 200, 0.1, 3).unwrap();
        let (_, prov) = build_part_pool(&data, &wm, &cfg(20, 4)).unwrap();
        for p in prov {
            // recompute every norm and rank the drawn one
            let pyr = &data[p.image].pyramid;
            let locs = pyr.locations(Window::new(2, 2));
            let norm = |z| {
                let f = extract_patch_feature(pyr, z, Window::new(2, 2)).unwrap();
                wm.whiten(&f).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            let mine = norm(p.location);
            let above = locs.iter().filter(|&&z| norm(z) > mine).count();
            assert!(above < locs.len().div_ceil(2));
        }
    }

    #[test]
    fn pool_slots_and_provenance_agree() {
        let data = corpus(6, (4, 4));
        let wm = fit_background_whitening(&data, Window::new(2, 2), 200, 0.1, 5).unwrap();
        let (bank, prov) = build_part_pool(&data, &wm, &cfg(1, 6)).unwrap();
        assert_eq!(bank.len(), 1);
        let (b2, _) = build_part_pool(&data, &wm, &cfg(30, 6)).unwrap();
        assert_eq!(b2.len(), 30);
        // slot 0 draws from the same stream regardless of pool size
        assert_eq!(bank.parts[0], b2.parts[0]);
        let again = part_from_location(&data, &wm, Window::new(2, 2), prov[0].image, prov[0].location, 0).unwrap();
        assert_eq!(again.weights, bank.parts[0].weights);
    }

    #[test]
    fn no_windows_anywhere_is_a_corpus_error() {
        let tiny = vec![LabeledExample {
            pyramid: FeaturePyramid::new(vec![Level::new(1, 1, 3, 1.0, vec![0.0; 3]).unwrap()], 3, "x").unwrap(),
            mirrored: None,
            label: 0,
        }];
        let wm = WhiteningModel::identity(12);
        assert!(matches!(
            build_part_pool(&tiny, &wm, &cfg(2, 0)),
            Err(Error::EmptyCorpus)
        ));
    }
}
