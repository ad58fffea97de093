//! Browser demo: train a small part-based classifier on a synthetic corpus
//! and classify freshly drawn images, showing where each part fires.

use partforge_core::eval::top_detections;
use partforge_core::features::{HogConfig, Raster, Window};
use partforge_core::jointtrain::{joint_train, JointObjectiveConfig};
use partforge_core::model::{
    argmax_lowest, class_scores, representation, LabeledExample, PartBank, PartWeights, PoolingGrid, TrainingSet,
};
use partforge_core::partgen::{build_part_pool, fit_background_whitening, PartPoolConfig};
use partforge_core::qpsolver::CuttingPlaneConfig;
use partforge_core::select::{lambda_sweep, retrain_l2, GroupLassoConfig, ResponseSet};
use partforge_core::synth::{featurize, synth_dataset, SynthImage, SynthSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const WINDOW: Window = Window { rows: 3, cols: 3 };
const POOL: usize = 24;
const TARGET: usize = 4;

fn spec(seed: u64, noise: f32, train: usize, test: usize) -> SynthSpec {
    SynthSpec {
        noise,
        train_per_class: train,
        test_per_class: test,
        seed,
        ..SynthSpec::default()
    }
}

fn hog() -> HogConfig {
    HogConfig {
        min_cells: WINDOW,
        ..HogConfig::default()
    }
}

/// One image of `class`; the seed moves the pattern and redraws the noise.
fn sample(class: usize, seed: u64, noise: f32) -> partforge_core::Result<SynthImage> {
    let corpus = synth_dataset(&spec(seed, noise, 0, 1))?;
    corpus
        .test
        .into_iter()
        .find(|im| im.label == class)
        .ok_or_else(|| partforge_core::Error::InvalidParameter(format!("no class {class}")))
}

fn to_rgba(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(r.width * r.height * 4);
    for px in r.data.chunks(r.channels) {
        let v = |c: f32| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (a, b, c) = if r.channels >= 3 {
            (px[0], px[1], px[2])
        } else {
            (px[0], px[0], px[0])
        };
        out.extend_from_slice(&[v(a), v(b), v(c), 255]);
    }
    out
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Side length in pixels of every image the demo draws.
#[wasm_bindgen]
pub fn image_size() -> usize {
    SynthSpec::default().image_size
}

#[wasm_bindgen]
pub fn n_classes() -> usize {
    SynthSpec::default().n_classes
}

/// RGBA pixels of a synthetic image, row-major.
#[wasm_bindgen]
pub fn render_sample(class: usize, seed: u64, noise: f32) -> Result<Vec<u8>, JsError> {
    sample(class, seed, noise).map(|im| to_rgba(&im.raster)).map_err(js_err)
}

#[derive(Serialize)]
struct Summary {
    train_images: usize,
    test_images: usize,
    pool: usize,
    selected: Vec<usize>,
    lambda: f64,
    selected_accuracy: f64,
    joint_accuracy: f64,
    objectives: Vec<f64>,
}

#[derive(Serialize)]
struct Hit {
    part: usize,
    score: f64,
    /// Pixel box `[x, y, w, h]`.
    bbox: [f64; 4],
    /// Largest weight this part gets from any class.
    weight: f64,
}

#[derive(Serialize)]
struct Classification {
    scores: Vec<f64>,
    predicted: usize,
    parts: Vec<Hit>,
}

#[wasm_bindgen]
pub struct Demo {
    noise: f32,
    cell_size: usize,
    bank: PartBank,
    u: PartWeights,
    grid: PoolingGrid,
    summary: Summary,
}

fn accuracy(
    u: &PartWeights,
    bank: &PartBank,
    grid: &PoolingGrid,
    test: &[LabeledExample],
) -> partforge_core::Result<f64> {
    let mut correct = 0;
    for ex in test {
        let r = representation(ex, bank, grid)?;
        correct += usize::from(argmax_lowest(&class_scores(&r, u)?) == ex.label);
    }
    Ok(correct as f64 / test.len().max(1) as f64)
}

impl Demo {
    pub fn train_with(seed: u64, noise: f32, train_per_class: usize) -> partforge_core::Result<Demo> {
        let corpus = synth_dataset(&spec(seed, noise, train_per_class, 4))?;
        let hog = hog();
        let train = featurize(&corpus.train, &hog)?;
        let test = featurize(&corpus.test, &hog)?;
        let grid = PoolingGrid::default();

        let whitening = fit_background_whitening(&train, WINDOW, 2000, 1e-2, seed)?;
        let pool_cfg = PartPoolConfig {
            pool_size: POOL,
            window: WINDOW,
            seed,
            ..PartPoolConfig::default()
        };
        let (pool, _) = build_part_pool(&train, &whitening, &pool_cfg)?;

        let n_classes = corpus.spec.n_classes;
        let data = TrainingSet::build(&train, n_classes, WINDOW, &grid, true)?;
        let rs = ResponseSet::new(
            data.response_matrix(&pool),
            data.labels(),
            n_classes,
            pool.len(),
            data.n_regions(),
        )?;
        let gl = GroupLassoConfig {
            epochs: 60,
            seed,
            ..GroupLassoConfig::default()
        };
        let sweep = lambda_sweep(&rs, TARGET, &gl)?;
        let u_sel = retrain_l2(&rs, &sweep.selected, 1e-2, &CuttingPlaneConfig::default())?;
        let bank = PartBank {
            parts: sweep.selected.iter().map(|&j| pool.parts[j].clone()).collect(),
        };
        let selected_accuracy = accuracy(&u_sel, &bank, &grid, &test)?;

        let joint_cfg = JointObjectiveConfig {
            outer_max_iters: 2,
            cccp_max_iters: 2,
            // Looser than the CLI default so training stays interactive.
            step2_rel_eps: 1e-2,
            ..JointObjectiveConfig::default()
        };
        let res = joint_train(&data, &bank, &joint_cfg)?;
        let joint_accuracy = accuracy(&res.u, &res.bank, &grid, &test)?;

        Ok(Demo {
            noise,
            cell_size: hog.cell_size,
            summary: Summary {
                train_images: corpus.train.len(),
                test_images: corpus.test.len(),
                pool: pool.len(),
                selected: sweep.selected,
                lambda: sweep.lambda,
                selected_accuracy,
                joint_accuracy,
                objectives: res.objectives,
            },
            bank: res.bank,
            u: res.u,
            grid,
        })
    }

    fn classify_inner(&self, class: usize, seed: u64) -> partforge_core::Result<Classification> {
        let im = sample(class, seed, self.noise)?;
        let ex = featurize(std::slice::from_ref(&im), &hog())?.remove(0);
        let scores = class_scores(&representation(&ex, &self.bank, &self.grid)?, &self.u)?;
        let detections = top_detections(&self.bank, std::slice::from_ref(&ex), 1)?;
        let parts = detections
            .into_iter()
            .filter_map(|pd| {
                let d = pd.detections.into_iter().next()?;
                let level = ex.pyramid.level(d.location.level as usize);
                let px = self.cell_size as f64 / level.scale as f64;
                let cols = pd.part * self.u.n_regions..(pd.part + 1) * self.u.n_regions;
                let weight = (0..self.u.n_classes)
                    .flat_map(|y| self.u.row(y)[cols.clone()].to_vec())
                    .fold(f64::NEG_INFINITY, f64::max);
                Some(Hit {
                    part: pd.part,
                    score: d.score,
                    bbox: [
                        d.location.col as f64 * px,
                        d.location.row as f64 * px,
                        WINDOW.cols as f64 * px,
                        WINDOW.rows as f64 * px,
                    ],
                    weight,
                })
            })
            .collect();
        Ok(Classification {
            predicted: argmax_lowest(&scores),
            scores,
            parts,
        })
    }
}

#[wasm_bindgen]
impl Demo {
    /// Generates a corpus, draws and selects parts, then trains jointly.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, noise: f32) -> Result<Demo, JsError> {
        Demo::train_with(seed, noise, 12).map_err(js_err)
    }

    /// Training statistics as JSON.
    pub fn summary(&self) -> String {
        serde_json::to_string(&self.summary).expect("plain data")
    }

    /// Classifies a fresh image of `class` drawn with `seed`. Returns JSON
    /// with class scores, the prediction and each part's best box.
    pub fn classify(&self, class: usize, seed: u64) -> Result<String, JsError> {
        let c = self.classify_inner(class, seed).map_err(js_err)?;
        Ok(serde_json::to_string(&c).expect("plain data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_has_four_bytes_per_pixel() {
        let im = sample(2, 7, 0.05).unwrap();
        let px = to_rgba(&im.raster);
        assert_eq!(px.len(), image_size() * image_size() * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
    }

    #[test]
    fn trained_demo_classifies_and_boxes_fit_the_image() {
        let demo = Demo::train_with(1, 0.05, 4).unwrap();
        assert!(!demo.summary.selected.is_empty());
        let side = image_size() as f64;
        for class in 0..n_classes() {
            let c = demo.classify_inner(class, 100 + class as u64).unwrap();
            assert_eq!(c.scores.len(), n_classes());
            assert_eq!(c.parts.len(), demo.bank.len());
            for h in &c.parts {
                let [x, y, w, h] = h.bbox;
                assert!(x >= 0.0 && y >= 0.0 && x + w <= side + 1e-6 && y + h <= side + 1e-6);
            }
        }
    }
}
