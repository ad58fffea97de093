//! Pipeline configuration: a TOML file, dotted-key overrides, validation and
//! a content hash that is stamped into every artifact.

use std::path::Path;

use anyhow::{bail, Context, Result};
use partforge_core::features::{HogConfig, Window};
use partforge_core::jointtrain::JointObjectiveConfig;
use partforge_core::model::PoolingGrid;
use partforge_core::partgen::PartPoolConfig;
use partforge_core::select::GroupLassoConfig;
use partforge_core::synth::SynthSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for every random stage.
    pub seed: u64,
    pub synth: SynthSection,
    pub features: FeatureSection,
    pub partgen: PartgenSection,
    pub select: SelectSection,
    pub joint: JointObjectiveConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_classes: usize,
    pub n_patterns: usize,
    pub image_size: usize,
    pub pattern_size: usize,
    pub noise: f32,
    pub contrast: f32,
    pub clutter: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthSpec::default();
        Self {
            n_classes: d.n_classes,
            n_patterns: d.n_patterns,
            image_size: d.image_size,
            pattern_size: d.pattern_size,
            noise: d.noise,
            contrast: d.contrast,
            clutter: d.clutter,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub cell_size: usize,
    pub scales_per_octave: u32,
    pub max_levels: Option<usize>,
    pub resize_to_pixels: Option<usize>,
    /// Part window `[rows, cols]` in cells.
    pub window: [usize; 2],
    /// Average each representation with the mirrored image's.
    pub use_flip: bool,
    /// Pooling layers as `[rows, cols]` splits of the image.
    pub pooling: Vec<[usize; 2]>,
}

impl Default for FeatureSection {
    fn default() -> Self {
        let hog = HogConfig::default();
        Self {
            cell_size: hog.cell_size,
            scales_per_octave: hog.scales_per_octave,
            max_levels: None,
            resize_to_pixels: None,
            window: [3, 3],
            use_flip: true,
            pooling: vec![[1, 1], [2, 2]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartgenSection {
    pub pool_size: usize,
    pub keep_fraction: f64,
    pub max_retries: usize,
    /// Window placements sampled for the background statistics.
    pub whitening_samples: usize,
    pub shrinkage: f64,
}

impl Default for PartgenSection {
    fn default() -> Self {
        let d = PartPoolConfig::default();
        Self {
            pool_size: 64,
            keep_fraction: d.keep_fraction,
            max_retries: d.max_retries,
            whitening_samples: 5000,
            shrinkage: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub target_m: usize,
    /// `"auto"` for the bisection sweep, or comma-separated λ values.
    pub lambda_grid: String,
    /// Weight on `‖u‖²` when refitting on the selected parts.
    pub lambda_u: f64,
    pub epsilon: Option<f64>,
    pub eta0: f64,
    pub t0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub zero_threshold: Option<f64>,
}

impl Default for SelectSection {
    fn default() -> Self {
        let d = GroupLassoConfig::default();
        Self {
            target_m: 8,
            lambda_grid: "auto".into(),
            lambda_u: 1e-2,
            epsilon: d.epsilon,
            eta0: d.eta0,
            t0: d.t0,
            epochs: d.epochs,
            batch_size: d.batch_size,
            zero_threshold: d.zero_threshold,
        }
    }
}

#[allow(clippy::derivable_impls)]
impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSection::default(),
            features: FeatureSection::default(),
            partgen: PartgenSection::default(),
            select: SelectSection::default(),
            joint: JointObjectiveConfig {
                lambda_u: 1e-2,
                ..Default::default()
            },
        }
    }
}

pub enum LambdaGrid {
    Auto,
    Values(Vec<f64>),
}

impl PipelineConfig {
    /// Reads `path` (if any), applies `KEY=VALUE` overrides in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(doc).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        let f = &self.features;
        if f.cell_size == 0 || f.scales_per_octave == 0 {
            bail!("features.cell_size and features.scales_per_octave must be positive");
        }
        if f.window[0] == 0 || f.window[1] == 0 {
            bail!("features.window must be at least 1x1");
        }
        if f.pooling.is_empty() || f.pooling.iter().any(|l| l[0] == 0 || l[1] == 0) {
            bail!("features.pooling needs at least one layer with positive splits");
        }
        let p = &self.partgen;
        if p.pool_size == 0 {
            bail!("partgen.pool_size must be at least 1");
        }
        if !(p.keep_fraction > 0.0 && p.keep_fraction <= 1.0) {
            bail!("partgen.keep_fraction must be in (0, 1]");
        }
        if !(p.shrinkage > 0.0) || p.whitening_samples == 0 {
            bail!("partgen.shrinkage and partgen.whitening_samples must be positive");
        }
        let s = &self.select;
        if s.target_m == 0 || s.target_m > p.pool_size {
            bail!("select.target_m must be in [1, partgen.pool_size]");
        }
        if !(s.lambda_u > 0.0) || s.epochs == 0 || s.batch_size == 0 || !(s.eta0 > 0.0) || !(s.t0 > 0.0) {
            bail!("select.lambda_u, eta0, t0, epochs and batch_size must be positive");
        }
        self.lambda_grid()?;
        self.joint.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = &self.synth;
        SynthSpec {
            n_classes: s.n_classes,
            n_patterns: s.n_patterns,
            image_size: s.image_size,
            pattern_size: s.pattern_size,
            noise: s.noise,
            contrast: s.contrast,
            clutter: s.clutter,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            seed: self.seed,
        }
    }

    pub fn window(&self) -> Window {
        Window::new(self.features.window[0], self.features.window[1])
    }

    pub fn hog(&self) -> HogConfig {
        let f = &self.features;
        HogConfig {
            cell_size: f.cell_size,
            scales_per_octave: f.scales_per_octave,
            min_cells: self.window(),
            max_levels: f.max_levels,
            resize_to_pixels: f.resize_to_pixels,
        }
    }

    pub fn grid(&self) -> PoolingGrid {
        let layers: Vec<(usize, usize)> = self.features.pooling.iter().map(|l| (l[0], l[1])).collect();
        PoolingGrid::from_layers(&layers)
    }

    pub fn pool_config(&self) -> PartPoolConfig {
        PartPoolConfig {
            pool_size: self.partgen.pool_size,
            window: self.window(),
            keep_fraction: self.partgen.keep_fraction,
            seed: self.seed,
            max_retries: self.partgen.max_retries,
        }
    }

    pub fn group_lasso(&self, lambda: f64) -> GroupLassoConfig {
        let s = &self.select;
        GroupLassoConfig {
            lambda,
            epsilon: s.epsilon,
            eta0: s.eta0,
            t0: s.t0,
            epochs: s.epochs,
            batch_size: s.batch_size,
            seed: self.seed,
            zero_threshold: s.zero_threshold,
        }
    }

    pub fn lambda_grid(&self) -> Result<LambdaGrid> {
        let g = self.select.lambda_grid.trim();
        if g.eq_ignore_ascii_case("auto") {
            return Ok(LambdaGrid::Auto);
        }
        let values = g
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("select.lambda_grid must be \"auto\" or a list of numbers, got {g:?}"))?;
        if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) {
            bail!("select.lambda_grid values must be non-negative");
        }
        Ok(LambdaGrid::Values(values))
    }
}

/// Sets a dotted key such as `joint.lambda_w=0.1`. The value is parsed as a
/// TOML value and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {spec:?}: {p} is not a section"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let a = PipelineConfig::load(None, &[]).unwrap();
        assert_eq!(a, PipelineConfig::default());
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = PipelineConfig::load(
            None,
            &[
                "joint.lambda_w=0.5".into(),
                "seed=7".into(),
                "select.lambda_grid=0.1,1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.joint.lambda_w, 0.5);
        assert_eq!(cfg.seed, 7);
        assert!(matches!(cfg.lambda_grid().unwrap(), LambdaGrid::Values(v) if v == vec![0.1, 1.0]));
        assert_ne!(cfg.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(PipelineConfig::load(None, &["joint.lambda_x=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["partgen.pool_size=0".into()]).is_err());
        assert!(PipelineConfig::load(None, &["select.lambda_grid=fast".into()]).is_err());
        assert!(PipelineConfig::load(None, &["novalue".into()]).is_err());
    }
}
