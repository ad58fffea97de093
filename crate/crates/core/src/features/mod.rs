//! Feature pyramids, patch features and the statistics fitted on them.
//!
//! A [`FeaturePyramid`] is a stack of rectangular descriptor grids, one per
//! scale. A part placement is a [`LatentLocation`] naming the top-left cell of
//! a [`Window`] of cells; the patch feature at that location is the row-major
//! concatenation of the window's cell descriptors.

mod hog;
mod io;
mod pca;
mod whitening;

pub use hog::{build_hog_pyramid, HogConfig, Raster, HOG_CHANNELS};
pub use io::{read_pyramid, read_pyramid_file, write_pyramid, write_pyramid_file, PYRAMID_MAGIC};
pub use pca::{fit_pca, PcaModel};
pub use whitening::{discriminability_filter, fit_whitening, WhiteningModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placement of a part: pyramid level plus the top-left cell of its window.
///
/// The derived ordering is lexicographic on `(level, row, col)`, which is the
/// tie-breaking order used throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatentLocation {
    pub level: u32,
    pub row: u32,
    pub col: u32,
}

impl LatentLocation {
    pub fn new(level: usize, row: usize, col: usize) -> Self {
        Self {
            level: level as u32,
            row: row as u32,
            col: col as u32,
        }
    }
}

/// Extent of a part window, in cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub rows: usize,
    pub cols: usize,
}

impl Window {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// One scale of a pyramid: a `rows x cols` grid of `dim`-dimensional cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub scale: f32,
    pub data: Vec<f32>,
}

impl Level {
    pub fn new(rows: usize, cols: usize, dim: usize, scale: f32, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * cols * dim,
                actual: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            dim,
            scale,
            data,
        })
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Whether a window anchored at `(row, col)` lies inside the grid.
    pub fn fits(&self, row: usize, col: usize, window: Window) -> bool {
        row + window.rows <= self.rows && col + window.cols <= self.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Level>,
    pub scales_per_octave: u32,
    pub source_id: String,
}

impl FeaturePyramid {
    /// Builds a pyramid, checking that all levels share one descriptor
    /// dimension and that scales strictly decrease.
    pub fn new(levels: Vec<Level>, scales_per_octave: u32, source_id: impl Into<String>) -> Result<Self> {
        if scales_per_octave == 0 {
            return Err(Error::InvalidParameter("scales_per_octave must be positive".into()));
        }
        if let Some(first) = levels.first() {
            for (i, level) in levels.iter().enumerate() {
                if level.dim != first.dim {
                    return Err(Error::Parse {
                        offset: 0,
                        kind: crate::error::ParseErrorKind::InconsistentDimension {
                            level: i,
                            expected: first.dim,
                            actual: level.dim,
                        },
                    });
                }
            }
            for pair in levels.windows(2) {
                if !(pair[1].scale < pair[0].scale) {
                    return Err(Error::InvalidParameter(format!(
                        "level scales must strictly decrease ({} then {})",
                        pair[0].scale, pair[1].scale
                    )));
                }
            }
        }
        Ok(Self {
            levels,
            scales_per_octave,
            source_id: source_id.into(),
        })
    }

    /// Descriptor dimension per cell, or 0 for an empty pyramid.
    pub fn dim(&self) -> usize {
        self.levels.first().map_or(0, |l| l.dim)
    }

    pub fn level(&self, level: usize) -> &Level {
        &self.levels[level]
    }

    /// All valid anchors for `window`, in lexicographic order. This is the
    /// latent space of a part.
    pub fn locations(&self, window: Window) -> Vec<LatentLocation> {
        let mut out = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            if level.rows < window.rows || level.cols < window.cols {
                continue;
            }
            for r in 0..=level.rows - window.rows {
                for c in 0..=level.cols - window.cols {
                    out.push(LatentLocation::new(l, r, c));
                }
            }
        }
        out
    }

    /// Center of the window at `z` in normalized image coordinates
    /// `(x, y) ∈ [0,1]²`.
    pub fn anchor_center(&self, z: LatentLocation, window: Window) -> (f64, f64) {
        let level = &self.levels[z.level as usize];
        let cx = (z.col as f64 + window.cols as f64 / 2.0) / level.cols as f64;
        let cy = (z.row as f64 + window.rows as f64 / 2.0) / level.rows as f64;
        (cx, cy)
    }
}

/// Patch feature ψ(x, z): the window's cell descriptors concatenated in
/// row-major order.
pub fn extract_patch_feature(pyramid: &FeaturePyramid, z: LatentLocation, window: Window) -> Result<Vec<f64>> {
    let mut out = vec![0.0; window.cells() * pyramid.dim()];
    extract_patch_feature_into(pyramid, z, window, &mut out)?;
    Ok(out)
}

pub(crate) fn extract_patch_feature_into(
    pyramid: &FeaturePyramid,
    z: LatentLocation,
    window: Window,
    out: &mut [f64],
) -> Result<()> {
    let oob = || Error::OutOfBounds {
        location: z,
        window_h: window.rows,
        window_w: window.cols,
    };
    let level = pyramid.levels.get(z.level as usize).ok_or_else(oob)?;
    let (row, col) = (z.row as usize, z.col as usize);
    if !level.fits(row, col, window) {
        return Err(oob());
    }
    let dim = level.dim;
    debug_assert_eq!(out.len(), window.cells() * dim);
    for dr in 0..window.rows {
        for dc in 0..window.cols {
            let dst = &mut out[(dr * window.cols + dc) * dim..][..dim];
            for (d, s) in dst.iter_mut().zip(level.cell(row + dr, col + dc)) {
                *d = *s as f64;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random single- or multi-level pyramid with values in [-1, 1].
    pub fn random_pyramid(seed: u64, shapes: &[(usize, usize)], dim: usize) -> FeaturePyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let data = (0..r * c * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                Level::new(r, c, dim, 2f32.powf(-(i as f32) / 3.0), data).unwrap()
            })
            .collect();
        FeaturePyramid::new(levels, 3, format!("rand-{seed}")).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::random_pyramid;
    use super::*;

    #[test]
    fn unit_window_returns_cell() {
        let p = random_pyramid(1, &[(4, 5)], 3);
        let z = LatentLocation::new(0, 2, 3);
        let f = extract_patch_feature(&p, z, Window::new(1, 1)).unwrap();
        let cell: Vec<f64> = p.level(0).cell(2, 3).iter().map(|&v| v as f64).collect();
        assert_eq!(f, cell);
    }

    #[test]
    fn six_by_six_window_of_32_channels_is_1152() {
        let p = random_pyramid(2, &[(8, 8)], 32);
        let f = extract_patch_feature(&p, LatentLocation::new(0, 1, 2), Window::new(6, 6)).unwrap();
        assert_eq!(f.len(), 1152);
    }

    #[test]
    fn adjacent_windows_share_cells() {
        let p = random_pyramid(3, &[(5, 6)], 2);
        let w = Window::new(2, 3);
        let a = extract_patch_feature(&p, LatentLocation::new(0, 1, 1), w).unwrap();
        let b = extract_patch_feature(&p, LatentLocation::new(0, 1, 2), w).unwrap();
        let dim = 2;
        for r in 0..2 {
            for c in 1..3 {
                let ca = &a[(r * 3 + c) * dim..][..dim];
                let cb = &b[(r * 3 + c - 1) * dim..][..dim];
                assert_eq!(ca, cb);
            }
        }
    }

    #[test]
    fn out_of_bounds_window_is_reported() {
        let p = random_pyramid(4, &[(3, 3)], 2);
        let z = LatentLocation::new(0, 2, 2);
        match extract_patch_feature(&p, z, Window::new(2, 2)) {
            Err(Error::OutOfBounds { location, .. }) => assert_eq!(location, z),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn locations_enumerate_all_fitting_anchors() {
        let p = random_pyramid(5, &[(4, 4), (3, 3), (1, 1)], 2);
        let locs = p.locations(Window::new(2, 2));
        assert_eq!(locs.len(), 9 + 4);
        assert!(locs.windows(2).all(|w| w[0] < w[1]));
    }
}
