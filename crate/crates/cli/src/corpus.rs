//! On-disk corpora and feature directories.
//!
//! A corpus directory holds `manifest.json` and the images it lists. A
//! features directory holds one `<id>.pbfp` per image (plus
//! `<id>.flip.pbfp` for its mirror) and an `index.json` with the labels.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use partforge_core::features::{read_pyramid_file, FeaturePyramid, HogConfig};
use partforge_core::model::LabeledExample;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const INDEX: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub label: usize,
    /// Relative to the corpus directory.
    pub path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    /// Reference accuracy of the pixel matched filter, for synthetic corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_filter_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub config_hash: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub hog: HogConfig,
    pub train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Image ids become file names, so they must not reach outside the
/// directory.
pub fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        bail!("image id {id:?} is not a plain file name");
    }
    Ok(())
}

pub fn pyramid_path(dir: &Path, id: &str, mirrored: bool) -> PathBuf {
    dir.join(if mirrored {
        format!("{id}.flip.pbfp")
    } else {
        format!("{id}.pbfp")
    })
}

pub struct FeatureSet {
    pub dir: PathBuf,
    pub index: FeatureIndex,
}

impl FeatureSet {
    pub fn open(dir: &Path) -> Result<Self> {
        let index: FeatureIndex = read_json(&dir.join(INDEX))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.index.classes.len()
    }

    /// Loads one split. Mirrored pyramids are attached when `use_flip`.
    pub fn load(&self, split: Split, use_flip: bool) -> Result<Vec<LabeledExample>> {
        let records = match split {
            Split::Train => &self.index.train,
            Split::Test => &self.index.test,
        };
        if records.is_empty() {
            bail!("the {split:?} split of {} is empty", self.dir.display());
        }
        records
            .iter()
            .map(|r| {
                check_id(&r.id)?;
                if r.label >= self.n_classes() {
                    bail!(
                        "image {} has label {} but there are {} classes",
                        r.id,
                        r.label,
                        self.n_classes()
                    );
                }
                let pyramid = load_pyramid(&pyramid_path(&self.dir, &r.id, false), &r.id)?;
                let mirrored = if use_flip {
                    Some(load_pyramid(
                        &pyramid_path(&self.dir, &r.id, true),
                        &format!("{}.flip", r.id),
                    )?)
                } else {
                    None
                };
                Ok(LabeledExample {
                    pyramid,
                    mirrored,
                    label: r.label,
                })
            })
            .collect()
    }
}

fn load_pyramid(path: &Path, id: &str) -> Result<FeaturePyramid> {
    let mut p = read_pyramid_file(path).with_context(|| format!("reading {}", path.display()))?;
    p.source_id = id.to_string();
    Ok(p)
}
