//! Precomputed patch features for repeated scoring during training.

use super::{dot, LabeledExample, PartBank, PoolingGrid};
use crate::error::{Error, Result};
use crate::features::{extract_patch_feature_into, FeaturePyramid, LatentLocation, Window};
use crate::par;

/// Every anchor of one pyramid with its patch feature and pooling-region
/// membership.
#[derive(Clone, Debug)]
pub struct ViewTable {
    pub locs: Vec<LatentLocation>,
    psi: Vec<f64>,
    pub part_len: usize,
    /// For each pooling region, indices into `locs` in lexicographic order.
    pub region_members: Vec<Vec<u32>>,
}

impl ViewTable {
    pub fn build(pyramid: &FeaturePyramid, window: Window, grid: &PoolingGrid) -> Result<Self> {
        let locs = pyramid.locations(window);
        let part_len = window.cells() * pyramid.dim();
        let mut psi = vec![0.0; locs.len() * part_len];
        let mut region_members = vec![Vec::new(); grid.len()];
        for (i, &z) in locs.iter().enumerate() {
            extract_patch_feature_into(pyramid, z, window, &mut psi[i * part_len..(i + 1) * part_len])?;
            let (cx, cy) = pyramid.anchor_center(z, window);
            for rho in grid.members(cx, cy) {
                region_members[rho].push(i as u32);
            }
        }
        Ok(Self {
            locs,
            psi,
            part_len,
            region_members,
        })
    }

    #[inline]
    pub fn psi(&self, idx: usize) -> &[f64] {
        &self.psi[idx * self.part_len..(idx + 1) * self.part_len]
    }

    /// Score of filter `w` at every location.
    pub fn scores(&self, w: &[f64]) -> Vec<f64> {
        (0..self.locs.len()).map(|i| dot(w, self.psi(i))).collect()
    }

    /// Maximum of `scores` within region `rho` (first index wins ties), or
    /// `(0, None)` for an empty region.
    pub fn region_max(&self, scores: &[f64], rho: usize) -> (f64, Option<u32>) {
        let mut best: Option<(f64, u32)> = None;
        for &i in &self.region_members[rho] {
            let s = scores[i as usize];
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, i));
            }
        }
        best.map_or((0.0, None), |(s, i)| (s, Some(i)))
    }
}

/// One example's views (the image and, optionally, its mirror).
#[derive(Clone, Debug)]
pub struct ExampleTable {
    pub id: String,
    pub label: usize,
    pub views: Vec<ViewTable>,
}

impl ExampleTable {
    /// Weight of each view in the averaged representation.
    pub fn view_weight(&self) -> f64 {
        1.0 / self.views.len() as f64
    }
}

/// Responses of one example: the averaged `mR` values and, per
/// `(slot, view)`, the index of the maximizing location.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotResponses {
    pub values: Vec<f64>,
    /// Indexed `slot * n_views + view`.
    pub argmax: Vec<Option<u32>>,
    pub n_views: usize,
}

/// A labelled corpus with patch features precomputed for a fixed window and
/// pooling layout.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub examples: Vec<ExampleTable>,
    pub n_classes: usize,
    pub window: Window,
    /// Channels per cell.
    pub dim: usize,
    pub grid: PoolingGrid,
}

impl TrainingSet {
    pub fn build(
        examples: &[LabeledExample],
        n_classes: usize,
        window: Window,
        grid: &PoolingGrid,
        use_flip: bool,
    ) -> Result<Self> {
        let dim = examples
            .first()
            .map(|e| e.pyramid.dim())
            .ok_or_else(|| Error::InsufficientData("empty training set".into()))?;
        for e in examples {
            if e.label >= n_classes {
                return Err(Error::InvalidParameter(format!(
                    "label {} out of range for {n_classes} classes",
                    e.label
                )));
            }
            if e.pyramid.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.pyramid.dim(),
                });
            }
        }
        let tables = par::map(examples, |e| -> Result<ExampleTable> {
            let mut views = vec![ViewTable::build(&e.pyramid, window, grid)?];
            if use_flip {
                if let Some(m) = &e.mirrored {
                    views.push(ViewTable::build(m, window, grid)?);
                }
            }
            Ok(ExampleTable {
                id: e.pyramid.source_id.clone(),
                label: e.label,
                views,
            })
        });
        Ok(Self {
            examples: tables.into_iter().collect::<Result<Vec<_>>>()?,
            n_classes,
            window,
            dim,
            grid: grid.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_regions(&self) -> usize {
        self.grid.len()
    }

    pub fn part_len(&self) -> usize {
        self.window.cells() * self.dim
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Responses of `bank` on example `i`.
    pub fn example_responses(&self, i: usize, bank: &PartBank) -> SlotResponses {
        let ex = &self.examples[i];
        let r = self.n_regions();
        let nv = ex.views.len();
        let mut values = vec![0.0; bank.len() * r];
        let mut argmax = vec![None; bank.len() * r * nv];
        let mut per_view = vec![0.0; nv];
        let scores: Vec<Vec<Vec<f64>>> = bank
            .parts
            .iter()
            .map(|p| ex.views.iter().map(|v| v.scores(&p.weights)).collect())
            .collect();
        for j in 0..bank.len() {
            for rho in 0..r {
                let slot = j * r + rho;
                for (v, view) in ex.views.iter().enumerate() {
                    let (s, idx) = view.region_max(&scores[j][v], rho);
                    per_view[v] = s;
                    argmax[slot * nv + v] = idx;
                }
                values[slot] = combine_views(&per_view);
            }
        }
        SlotResponses {
            values,
            argmax,
            n_views: nv,
        }
    }

    pub fn responses(&self, bank: &PartBank) -> Vec<SlotResponses> {
        let idx: Vec<usize> = (0..self.len()).collect();
        par::map(&idx, |&i| self.example_responses(i, bank))
    }

    /// Representations only, one `mR` vector per example.
    pub fn response_matrix(&self, bank: &PartBank) -> Vec<Vec<f64>> {
        self.responses(bank).into_iter().map(|r| r.values).collect()
    }
}

/// Average of per-view responses; `(a + b) / 2` for an image and its mirror,
/// which is symmetric in the two views.
#[inline]
pub(crate) fn combine_views(per_view: &[f64]) -> f64 {
    match per_view {
        [a] => *a,
        [a, b] => (a + b) * 0.5,
        vs => vs.iter().sum::<f64>() / vs.len() as f64,
    }
}
