//! Gradient-orientation cell descriptors and multi-scale pyramids.
//!
//! Each cell carries 32 channels: 18 contrast-sensitive orientation sums,
//! 9 contrast-insensitive orientation sums, 4 gradient energies (one per
//! normalizing block) and a constant truncation slot that is always zero.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{FeaturePyramid, Level, Window};
use crate::error::{Error, Result};

pub const HOG_CHANNELS: usize = 32;

const ORIENTATIONS: usize = 9;
const TRUNCATION: f32 = 0.2;
const NORM_EPS: f32 = 1e-4;

/// Unit vectors of the 9 contrast-insensitive orientation bins.
const BIN_UX: [f32; ORIENTATIONS] = [1.0, 0.9397, 0.7660, 0.5, 0.1736, -0.1736, -0.5, -0.7660, -0.9397];
const BIN_UY: [f32; ORIENTATIONS] = [0.0, 0.3420, 0.6428, 0.8660, 0.9848, 0.9848, 0.8660, 0.6428, 0.3420];

/// A row-major, channel-interleaved floating point image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParameter("raster needs at least one channel".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(self.width - 1 - x, y, c, self.get(x, y, c));
                }
            }
        }
        out
    }

    /// Resamples to `width x height` with a triangle (bilinear, antialiased
    /// when shrinking) filter.
    pub fn resized(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Raster::filled(width, height, self.channels, 0.0);
        for c in 0..self.channels {
            let plane: Vec<f32> = self.data.iter().skip(c).step_by(self.channels).copied().collect();
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(self.width as u32, self.height as u32, plane).expect("plane size matches raster");
            let small = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
            for (i, p) in small.into_raw().into_iter().enumerate() {
                out.data[i * self.channels + c] = p;
            }
        }
        out
    }

    /// Converts an 8-bit grayscale or RGB image into a raster with values in
    /// [0, 1].
    pub fn from_dynamic_image(img: &image::DynamicImage) -> Raster {
        let rgb = img.color().has_color();
        if rgb {
            let buf = img.to_rgb32f();
            let (w, h) = buf.dimensions();
            Raster {
                width: w as usize,
                height: h as usize,
                channels: 3,
                data: buf.into_raw(),
            }
        } else {
            let buf = img.to_luma32f();
            let (w, h) = buf.dimensions();
            Raster {
                width: w as usize,
                height: h as usize,
                channels: 1,
                data: buf.into_raw(),
            }
        }
    }
}

/// Pyramid construction settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HogConfig {
    /// Side of a square cell in pixels.
    pub cell_size: usize,
    pub scales_per_octave: u32,
    /// Smallest grid (in cells) a level must have to be kept; normally the
    /// part window.
    pub min_cells: Window,
    pub max_levels: Option<usize>,
    /// Rescale the input to about this many pixels before building levels.
    pub resize_to_pixels: Option<usize>,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            cell_size: 8,
            scales_per_octave: 3,
            min_cells: Window::new(6, 6),
            max_levels: None,
            resize_to_pixels: None,
        }
    }
}

pub fn build_hog_pyramid(image: &Raster, config: &HogConfig, source_id: &str) -> Result<FeaturePyramid> {
    if config.cell_size == 0 || config.scales_per_octave == 0 {
        return Err(Error::InvalidParameter(
            "cell_size and scales_per_octave must be positive".into(),
        ));
    }
    let base = match config.resize_to_pixels {
        Some(target) if target > 0 => {
            let s = (target as f64 / (image.width * image.height) as f64).sqrt();
            let w = ((image.width as f64 * s).round() as usize).max(1);
            let h = ((image.height as f64 * s).round() as usize).max(1);
            image.resized(w, h)
        }
        _ => image.clone(),
    };
    let min_w = config.min_cells.cols.max(1) * config.cell_size;
    let min_h = config.min_cells.rows.max(1) * config.cell_size;
    if base.width < min_w || base.height < min_h {
        return Err(Error::ImageTooSmall {
            width: base.width,
            height: base.height,
            min_width: min_w,
            min_height: min_h,
        });
    }

    let mut levels = Vec::new();
    for l in 0.. {
        if config.max_levels.is_some_and(|m| l >= m) {
            break;
        }
        let scale = 2f64.powf(-(l as f64) / config.scales_per_octave as f64);
        let w = (base.width as f64 * scale).round() as usize;
        let h = (base.height as f64 * scale).round() as usize;
        if w / config.cell_size < config.min_cells.cols.max(1) || h / config.cell_size < config.min_cells.rows.max(1) {
            break;
        }
        let level_img = if l == 0 { base.clone() } else { base.resized(w, h) };
        levels.push(hog_level(&level_img, config.cell_size, scale as f32));
    }
    FeaturePyramid::new(levels, config.scales_per_octave, source_id)
}

/// Computes the 32-channel descriptor grid of one raster.
pub(crate) fn hog_level(img: &Raster, sbin: usize, scale: f32) -> Level {
    let cells_x = img.width / sbin;
    let cells_y = img.height / sbin;
    let nbins = 2 * ORIENTATIONS;
    let mut hist = vec![0f32; cells_x * cells_y * nbins];

    let vis_w = cells_x * sbin;
    let vis_h = cells_y * sbin;
    let clampx = |x: isize| x.clamp(0, img.width as isize - 1) as usize;
    let clampy = |y: isize| y.clamp(0, img.height as isize - 1) as usize;

    for y in 0..vis_h {
        for x in 0..vis_w {
            // strongest gradient over channels
            let mut best_v = -1f32;
            let (mut gdx, mut gdy) = (0f32, 0f32);
            for c in 0..img.channels {
                let dx = img.get(clampx(x as isize + 1), y, c) - img.get(clampx(x as isize - 1), y, c);
                let dy = img.get(x, clampy(y as isize + 1), c) - img.get(x, clampy(y as isize - 1), c);
                let v = dx * dx + dy * dy;
                if v > best_v {
                    best_v = v;
                    gdx = dx;
                    gdy = dy;
                }
            }
            // resampling round-off on flat areas is not an edge
            if best_v <= 1e-12 {
                continue;
            }
            let mag = best_v.sqrt();

            let mut best_dot = 0f32;
            let mut best_o = 0usize;
            for o in 0..ORIENTATIONS {
                let dot = BIN_UX[o] * gdx + BIN_UY[o] * gdy;
                if dot > best_dot {
                    best_dot = dot;
                    best_o = o;
                } else if -dot > best_dot {
                    best_dot = -dot;
                    best_o = o + ORIENTATIONS;
                }
            }

            // bilinear spread over the four nearest cells
            let xp = (x as f32 + 0.5) / sbin as f32 - 0.5;
            let yp = (y as f32 + 0.5) / sbin as f32 - 0.5;
            let ixp = xp.floor() as isize;
            let iyp = yp.floor() as isize;
            let vx0 = xp - ixp as f32;
            let vy0 = yp - iyp as f32;
            let vx1 = 1.0 - vx0;
            let vy1 = 1.0 - vy0;
            let mut add = |cx: isize, cy: isize, wgt: f32| {
                if cx >= 0 && cy >= 0 && (cx as usize) < cells_x && (cy as usize) < cells_y {
                    hist[((cy as usize) * cells_x + cx as usize) * nbins + best_o] += wgt * mag;
                }
            };
            add(ixp, iyp, vx1 * vy1);
            add(ixp + 1, iyp, vx0 * vy1);
            add(ixp, iyp + 1, vx1 * vy0);
            add(ixp + 1, iyp + 1, vx0 * vy0);
        }
    }

    let mut energy = vec![0f32; cells_x * cells_y];
    for (i, e) in energy.iter_mut().enumerate() {
        let h = &hist[i * nbins..(i + 1) * nbins];
        *e = (0..ORIENTATIONS).map(|o| (h[o] + h[o + ORIENTATIONS]).powi(2)).sum();
    }
    let energy_at = |cx: isize, cy: isize| {
        let cx = cx.clamp(0, cells_x as isize - 1) as usize;
        let cy = cy.clamp(0, cells_y as isize - 1) as usize;
        energy[cy * cells_x + cx]
    };

    let mut data = vec![0f32; cells_x * cells_y * HOG_CHANNELS];
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let (x, y) = (cx as isize, cy as isize);
            let block = |ox: isize, oy: isize| {
                let s = energy_at(x + ox, y + oy)
                    + energy_at(x + ox + 1, y + oy)
                    + energy_at(x + ox, y + oy + 1)
                    + energy_at(x + ox + 1, y + oy + 1);
                1.0 / (s + NORM_EPS).sqrt()
            };
            let norms = [block(0, 0), block(-1, 0), block(0, -1), block(-1, -1)];
            let h = &hist[(cy * cells_x + cx) * nbins..][..nbins];
            let out = &mut data[(cy * cells_x + cx) * HOG_CHANNELS..][..HOG_CHANNELS];
            let mut texture = [0f32; 4];
            for o in 0..nbins {
                let mut sum = 0.0;
                for (k, n) in norms.iter().enumerate() {
                    let v = (h[o] * n).min(TRUNCATION);
                    sum += v;
                    texture[k] += v;
                }
                out[o] = 0.5 * sum;
            }
            for o in 0..ORIENTATIONS {
                let s = h[o] + h[o + ORIENTATIONS];
                out[nbins + o] = 0.5 * norms.iter().map(|n| (s * n).min(TRUNCATION)).sum::<f32>();
            }
            for k in 0..4 {
                out[nbins + ORIENTATIONS + k] = 0.2357 * texture[k];
            }
            out[HOG_CHANNELS - 1] = 0.0;
        }
    }
    Level {
        rows: cells_y,
        cols: cells_x,
        dim: HOG_CHANNELS,
        scale,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(w: usize, h: usize) -> Raster {
        let mut img = Raster::filled(w, h, 1, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f32 / w as f32, y as f32 / h as f32);
                let v = 0.5
                    + 0.25 * (6.0 * fx + 1.0).sin() * (5.0 * fy).cos()
                    + 0.2 * (-((fx - 0.4).powi(2) + (fy - 0.6).powi(2)) * 30.0).exp();
                img.set(x, y, 0, v);
            }
        }
        img
    }

    #[test]
    fn constant_image_has_zero_descriptors() {
        let img = Raster::filled(64, 48, 3, 0.7);
        let cfg = HogConfig {
            min_cells: Window::new(2, 2),
            ..Default::default()
        };
        let p = build_hog_pyramid(&img, &cfg, "c").unwrap();
        assert!(p.levels.len() > 1);
        for l in &p.levels {
            assert!(l.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn level_zero_grid_is_integer_division() {
        let img = smooth_image(96, 96);
        let cfg = HogConfig {
            min_cells: Window::new(1, 1),
            ..Default::default()
        };
        let p = build_hog_pyramid(&img, &cfg, "g").unwrap();
        assert_eq!((p.levels[0].rows, p.levels[0].cols), (12, 12));
        assert_eq!(p.dim(), HOG_CHANNELS);
        for pair in p.levels.windows(2) {
            let ratio = pair[1].scale / pair[0].scale;
            assert!((ratio - 2f32.powf(-1.0 / 3.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn too_small_image_reports_minimum() {
        let img = Raster::filled(20, 100, 1, 0.0);
        match build_hog_pyramid(&img, &HogConfig::default(), "s") {
            Err(Error::ImageTooSmall {
                min_width, min_height, ..
            }) => {
                assert_eq!((min_width, min_height), (48, 48));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pyramid_is_deterministic() {
        let img = smooth_image(80, 72);
        let cfg = HogConfig {
            min_cells: Window::new(2, 2),
            ..Default::default()
        };
        let a = build_hog_pyramid(&img, &cfg, "d").unwrap();
        let b = build_hog_pyramid(&img, &cfg, "d").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn downsampled_image_matches_shifted_levels() {
        // Level l of the full image and level l - spo of a 2x downsample sit
        // at the same absolute scale; they differ only by resampling error.
        let img = smooth_image(192, 192);
        let half = img.resized(96, 96);
        let cfg = HogConfig {
            min_cells: Window::new(2, 2),
            ..Default::default()
        };
        let full = build_hog_pyramid(&img, &cfg, "f").unwrap();
        let small = build_hog_pyramid(&half, &cfg, "h").unwrap();
        let spo = cfg.scales_per_octave as usize;
        let mut compared = 0;
        for l in spo..full.levels.len() {
            let (a, b) = (&full.levels[l], &small.levels[l - spo]);
            assert_eq!((a.rows, a.cols), (b.rows, b.cols));
            // oracle: recompute directly on the resampled raster
            let direct = hog_level(
                &img.resized(
                    (192.0 * a.scale as f64).round() as usize,
                    (192.0 * a.scale as f64).round() as usize,
                ),
                8,
                a.scale,
            );
            assert_eq!(direct.data, a.data);
            let mad: f32 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.data.len() as f32;
            let mean: f32 = a.data.iter().map(|x| x.abs()).sum::<f32>() / a.data.len() as f32;
            assert!(mad <= 0.15 * mean + 1e-3, "level {l}: mad {mad} mean {mean}");
            compared += 1;
        }
        assert!(compared >= 3);
    }
}
