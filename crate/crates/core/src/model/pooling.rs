use serde::{Deserialize, Serialize};

/// An axis-aligned rectangle in normalized image coordinates, tagged with the
/// layer (subdivision) it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
    pub layer: u32,
}

impl Region {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x <= self.x1 as f64 && y >= self.y0 as f64 && y <= self.y1 as f64
    }
}

/// Spatial pooling layout. Region 0 of the default layout is the whole image,
/// regions 1..=4 are the quadrants of a 2x2 split in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingGrid {
    pub regions: Vec<Region>,
}

impl Default for PoolingGrid {
    fn default() -> Self {
        Self::from_layers(&[(1, 1), (2, 2)])
    }
}

impl PoolingGrid {
    /// Stacks uniform `rows x cols` subdivisions, each layer in row-major
    /// order.
    pub fn from_layers(layers: &[(usize, usize)]) -> Self {
        let mut regions = Vec::new();
        for (l, &(rows, cols)) in layers.iter().enumerate() {
            for r in 0..rows {
                for c in 0..cols {
                    regions.push(Region {
                        x0: c as f32 / cols as f32,
                        y0: r as f32 / rows as f32,
                        x1: (c + 1) as f32 / cols as f32,
                        y1: (r + 1) as f32 / rows as f32,
                        layer: l as u32,
                    });
                }
            }
        }
        Self { regions }
    }

    /// A single region covering the image.
    pub fn global() -> Self {
        Self::from_layers(&[(1, 1)])
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Regions containing the point `(x, y)`. Within a layer a point belongs
    /// to the lowest-index region whose closed rectangle contains it, so
    /// shared boundaries go to the lower index.
    pub fn members(&self, x: f64, y: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let mut claimed_layers: Vec<u32> = Vec::new();
        for (i, r) in self.regions.iter().enumerate() {
            if claimed_layers.contains(&r.layer) {
                continue;
            }
            if r.contains(x, y) {
                out.push(i);
                claimed_layers.push(r.layer);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_five_regions() {
        let g = PoolingGrid::default();
        assert_eq!(g.len(), 5);
        assert_eq!(g.members(0.25, 0.25), vec![0, 1]);
        assert_eq!(g.members(0.75, 0.25), vec![0, 2]);
        assert_eq!(g.members(0.25, 0.75), vec![0, 3]);
        assert_eq!(g.members(0.75, 0.75), vec![0, 4]);
    }

    #[test]
    fn boundary_goes_to_lower_index() {
        let g = PoolingGrid::default();
        assert_eq!(g.members(0.5, 0.5), vec![0, 1]);
        assert_eq!(g.members(0.5, 0.9), vec![0, 3]);
    }
}
