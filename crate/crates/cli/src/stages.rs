//! The subcommands. Each one reads its inputs, runs one pipeline stage and
//! writes artifacts stamped with the config hash and seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use partforge_core::cache::CacheRound;
use partforge_core::eval::{evaluate, top_detections, EvalReport, PartDetections};
use partforge_core::features::{build_hog_pyramid, write_pyramid_file, Raster};
use partforge_core::jointtrain::{joint_train_observed, TraceRecord};
use partforge_core::model::{read_model_file, write_model_file, write_weights_csv, ModelFile, PartBank, TrainingSet};
use partforge_core::partgen::{build_part_pool, fit_background_whitening, PartProvenance};
use partforge_core::qpsolver::CuttingPlaneConfig;
use partforge_core::select::{
    self as sel, default_epsilon, group_norms, lambda_sweep, retrain_l2, train_selection, ResponseSet, SweepPoint,
};
use partforge_core::synth::{matched_filter_accuracy, synth_dataset};
use serde::Serialize;

use crate::config::{LambdaGrid, PipelineConfig};
use crate::corpus::{
    check_id, pyramid_path, read_json, write_json, FeatureIndex, FeatureRecord, FeatureSet, ImageRecord, Manifest,
    Split, INDEX, MANIFEST,
};

pub const STAGE_INIT: &str = "init";
pub const STAGE_SELECT: &str = "select";
pub const STAGE_JOINT: &str = "joint";

/// Header shared by every JSON artifact.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

fn stamped<T: Serialize>(cfg: &PipelineConfig, hash: &str, path: &Path, body: T) -> Result<()> {
    write_json(
        path,
        &Stamped {
            config_hash: hash,
            seed: cfg.seed,
            body,
        },
    )
}

/// `dir/<stem of base><suffix>`, e.g. `parts.pbmd` → `parts.provenance.json`.
fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    base.with_file_name(format!("{stem}{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn metadata(cfg: &PipelineConfig, hash: &str, stage: &str, classes: &[String]) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    m.insert("config_hash".into(), hash.to_string());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("stage".into(), stage.to_string());
    m.insert("class_names".into(), serde_json::to_string(classes)?);
    Ok(m)
}

fn class_names(model: &ModelFile) -> Vec<String> {
    model
        .metadata
        .get("class_names")
        .and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or_default()
}

fn load_model(path: &Path, allowed: &[&str]) -> Result<ModelFile> {
    let model = read_model_file(path).with_context(|| format!("reading model {}", path.display()))?;
    let stage = model.metadata.get("stage").map(String::as_str).unwrap_or("");
    if !allowed.contains(&stage) {
        bail!(
            "{} is a {stage:?}-stage model; this command needs one of {allowed:?}",
            path.display()
        );
    }
    Ok(model)
}

fn save_model(model: &ModelFile, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    write_model_file(model, path).with_context(|| format!("writing model {}", path.display()))
}

fn training_set(cfg: &PipelineConfig, features: &FeatureSet, model: &ModelFile) -> Result<TrainingSet> {
    let train = features.load(Split::Train, cfg.features.use_flip)?;
    Ok(TrainingSet::build(
        &train,
        features.n_classes(),
        model.bank.window(),
        &model.grid,
        cfg.features.use_flip,
    )?)
}

fn response_set(data: &TrainingSet, bank: &PartBank) -> Result<ResponseSet> {
    Ok(ResponseSet::new(
        data.response_matrix(bank),
        data.labels(),
        data.n_classes,
        bank.len(),
        data.n_regions(),
    )?)
}

fn write_csv_header(out: &mut impl Write, cfg: &PipelineConfig, hash: &str) -> Result<()> {
    writeln!(out, "# config_hash={hash} seed={}", cfg.seed)?;
    Ok(())
}

pub fn synth_data(cfg: &PipelineConfig, hash: &str, out: &Path) -> Result<()> {
    let spec = cfg.synth_spec();
    let corpus = synth_dataset(&spec)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    let save = |split: &[partforge_core::synth::SynthImage]| -> Result<Vec<ImageRecord>> {
        split
            .iter()
            .map(|im| {
                let rel = format!("images/{}.png", im.id);
                let r = &im.raster;
                let pixels: Vec<u16> = r
                    .data
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                    .collect();
                let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(r.width as u32, r.height as u32, pixels)
                    .context("raster size")?;
                buf.save(out.join(&rel)).with_context(|| format!("writing {rel}"))?;
                Ok(ImageRecord {
                    id: im.id.clone(),
                    label: im.label,
                    path: rel,
                })
            })
            .collect()
    };
    let manifest = Manifest {
        config_hash: hash.to_string(),
        seed: cfg.seed,
        classes: (0..spec.n_classes).map(|c| format!("class{c}")).collect(),
        train: save(&corpus.train)?,
        test: save(&corpus.test)?,
        matched_filter_accuracy: Some(matched_filter_accuracy(&corpus.test, &spec)),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    log::info!(
        "wrote {} train and {} test images to {}",
        manifest.train.len(),
        manifest.test.len(),
        out.display()
    );
    Ok(())
}

pub fn featurize(cfg: &PipelineConfig, hash: &str, corpus: &Path, features_dir: &Path) -> Result<()> {
    let manifest: Manifest = read_json(&corpus.join(MANIFEST))?;
    std::fs::create_dir_all(features_dir).with_context(|| format!("creating {}", features_dir.display()))?;
    let hog = cfg.hog();
    let records: Vec<&ImageRecord> = manifest.train.iter().chain(&manifest.test).collect();
    let results: Vec<Result<()>> = {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|r| {
                check_id(&r.id)?;
                let path = corpus.join(&r.path);
                let img = image::open(&path).with_context(|| format!("reading {}", path.display()))?;
                let raster = Raster::from_dynamic_image(&img);
                let pyr = build_hog_pyramid(&raster, &hog, &r.id).with_context(|| format!("featurizing {}", r.id))?;
                write_pyramid_file(&pyr, &pyramid_path(features_dir, &r.id, false))?;
                let flip = build_hog_pyramid(&raster.mirrored(), &hog, &r.id)?;
                write_pyramid_file(&flip, &pyramid_path(features_dir, &r.id, true))?;
                Ok(())
            })
            .collect()
    };
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let strip = |v: &[ImageRecord]| -> Vec<FeatureRecord> {
        v.iter()
            .map(|r| FeatureRecord {
                id: r.id.clone(),
                label: r.label,
            })
            .collect()
    };
    let index = FeatureIndex {
        config_hash: hash.to_string(),
        seed: cfg.seed,
        classes: manifest.classes.clone(),
        hog,
        train: strip(&manifest.train),
        test: strip(&manifest.test),
    };
    write_json(&features_dir.join(INDEX), &index)?;
    log::info!("featurized {} images into {}", records.len(), features_dir.display());
    Ok(())
}

pub fn init_parts(cfg: &PipelineConfig, hash: &str, features_dir: &Path, out: &Path) -> Result<()> {
    let features = FeatureSet::open(features_dir)?;
    let train = features.load(Split::Train, false)?;
    let window = cfg.window();
    let p = &cfg.partgen;
    let whitening = fit_background_whitening(&train, window, p.whitening_samples, p.shrinkage, cfg.seed)?;
    let (bank, provenance) = build_part_pool(&train, &whitening, &cfg.pool_config())?;
    let mut meta = metadata(cfg, hash, STAGE_INIT, &features.index.classes)?;
    meta.insert("whitening_hash".into(), whitening.digest());
    let model = ModelFile {
        bank,
        weights: None,
        grid: cfg.grid(),
        metadata: meta,
    };
    save_model(&model, out)?;
    #[derive(Serialize)]
    struct Body<'a> {
        parts: &'a [PartProvenance],
    }
    stamped(
        cfg,
        hash,
        &sibling(out, ".provenance.json"),
        Body { parts: &provenance },
    )?;
    log::info!("drew {} parts into {}", model.bank.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct SelectionBody {
    lambda: f64,
    epsilon: f64,
    target_m: usize,
    /// Whether the count landed in `[target, 1.2·target]`.
    hit: bool,
    selected: Vec<usize>,
    history: Vec<SweepPoint>,
}

pub fn select_parts(
    cfg: &PipelineConfig,
    hash: &str,
    model_path: &Path,
    features_dir: &Path,
    out: &Path,
) -> Result<()> {
    let model = load_model(model_path, &[STAGE_INIT])?;
    let features = FeatureSet::open(features_dir)?;
    let data = training_set(cfg, &features, &model)?;
    let rs = response_set(&data, &model.bank)?;
    let target = cfg.select.target_m;
    if target > model.bank.len() {
        bail!(
            "select.target_m = {target} exceeds the pool of {} parts",
            model.bank.len()
        );
    }
    let (lambda, eps, u, hit, history) = match cfg.lambda_grid()? {
        LambdaGrid::Auto => {
            let sw = lambda_sweep(&rs, target, &cfg.group_lasso(1.0))?;
            (sw.lambda, sw.epsilon, sw.u, sw.hit, sw.history)
        }
        LambdaGrid::Values(values) => {
            let eps = match cfg.select.epsilon {
                Some(e) => e,
                None => default_epsilon(&rs, &cfg.group_lasso(0.0))?,
            };
            let upper = (1.2 * target as f64).floor() as usize;
            let mut history = Vec::new();
            let mut best = None;
            for &lambda in &values {
                let gl = sel::GroupLassoConfig {
                    epsilon: Some(eps),
                    ..cfg.group_lasso(lambda)
                };
                let out = train_selection(&rs, &gl)?;
                let count = sel::select_parts(&out.u, out.zero_threshold).len();
                history.push(SweepPoint {
                    lambda,
                    selected: count,
                });
                let miss = if count < target {
                    target - count
                } else {
                    count.saturating_sub(upper)
                };
                if best.as_ref().is_none_or(|(m, _, _)| miss < *m) {
                    best = Some((miss, lambda, out));
                }
            }
            let (miss, lambda, out) = best.expect("non-empty grid");
            (lambda, eps, out.u, miss == 0, history)
        }
    };
    let threshold = cfg.select.zero_threshold.unwrap_or(2.0 * eps);
    let selected = sel::select_parts(&u, threshold);
    if selected.is_empty() {
        bail!("no part survived selection at lambda {lambda}; try a smaller lambda grid");
    }
    if !hit {
        log::warn!(
            "selected {} parts, outside [{target}, {}]",
            selected.len(),
            (1.2 * target as f64).floor()
        );
    }
    let u_sel = retrain_l2(&rs, &selected, cfg.select.lambda_u, &CuttingPlaneConfig::default())?;

    let mut rho: Vec<(usize, f64)> = group_norms(&u).into_iter().enumerate().collect();
    rho.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let rho_path = sibling(out, ".rho.csv");
    ensure_parent(&rho_path)?;
    let mut csv = Vec::new();
    write_csv_header(&mut csv, cfg, hash)?;
    writeln!(csv, "rank,part,rho")?;
    for (rank, (j, r)) in rho.iter().enumerate() {
        writeln!(csv, "{rank},{j},{r}")?;
    }
    std::fs::write(&rho_path, csv).with_context(|| format!("writing {}", rho_path.display()))?;

    let mut meta = metadata(cfg, hash, STAGE_SELECT, &features.index.classes)?;
    if let Some(w) = model.metadata.get("whitening_hash") {
        meta.insert("whitening_hash".into(), w.clone());
    }
    meta.insert("pool_indices".into(), serde_json::to_string(&selected)?);
    let out_model = ModelFile {
        bank: model.bank.subset(&selected)?,
        weights: Some(u_sel),
        grid: model.grid.clone(),
        metadata: meta,
    };
    save_model(&out_model, out)?;
    stamped(
        cfg,
        hash,
        &sibling(out, ".selection.json"),
        SelectionBody {
            lambda,
            epsilon: eps,
            target_m: target,
            hit,
            selected: selected.clone(),
            history,
        },
    )?;
    log::info!(
        "kept {} of {} parts at lambda {lambda:.4e}",
        selected.len(),
        model.bank.len()
    );
    Ok(())
}

pub struct JointArgs<'a> {
    pub model: &'a Path,
    pub features_dir: &'a Path,
    pub out: &'a Path,
    pub skip_select: bool,
    pub trace: Option<&'a Path>,
    pub checkpoints: bool,
}

pub fn train_joint(cfg: &PipelineConfig, hash: &str, args: JointArgs) -> Result<()> {
    let allowed: &[&str] = if args.skip_select {
        &[STAGE_INIT, STAGE_SELECT]
    } else {
        &[STAGE_SELECT]
    };
    let model = load_model(args.model, allowed).with_context(|| {
        if args.skip_select {
            String::new()
        } else {
            "run select-parts first, or pass --skip-select to train the whole pool".into()
        }
    })?;
    let features = FeatureSet::open(args.features_dir)?;
    let data = training_set(cfg, &features, &model)?;
    let classes = features.index.classes.clone();
    let mut meta = metadata(cfg, hash, STAGE_JOINT, &classes)?;
    for key in ["whitening_hash", "pool_indices"] {
        if let Some(v) = model.metadata.get(key) {
            meta.insert(key.into(), v.clone());
        }
    }
    let mut ckpt_err = None;
    let result = joint_train_observed(&data, &model.bank, &cfg.joint, |iter, u, bank| {
        if !args.checkpoints || ckpt_err.is_some() {
            return;
        }
        let mut m = meta.clone();
        m.insert("iteration".into(), iter.to_string());
        let ckpt = ModelFile {
            bank: bank.clone(),
            weights: Some(u.clone()),
            grid: model.grid.clone(),
            metadata: m,
        };
        if let Err(e) = save_model(&ckpt, &sibling(args.out, &format!(".iter{iter:03}.pbmd"))) {
            ckpt_err = Some(e);
        }
    })?;
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    let out_model = ModelFile {
        bank: result.bank,
        weights: Some(result.u),
        grid: model.grid.clone(),
        metadata: meta,
    };
    save_model(&out_model, args.out)?;
    #[derive(Serialize)]
    struct Body {
        trace: Vec<TraceRecord>,
        objectives: Vec<f64>,
        cache_rounds: Vec<Vec<CacheRound>>,
    }
    let trace_path = args
        .trace
        .map_or_else(|| sibling(args.out, ".trace.json"), Path::to_path_buf);
    ensure_parent(&trace_path)?;
    let last = result.trace.last().map(|t| (t.objective, t.train_accuracy));
    stamped(
        cfg,
        hash,
        &trace_path,
        Body {
            trace: result.trace,
            objectives: result.objectives,
            cache_rounds: result.cache_rounds,
        },
    )?;
    if let Some((obj, acc)) = last {
        log::info!("final objective {obj:.6}, train accuracy {acc:.3}");
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportBody<'a> {
    model_stage: &'a str,
    split: &'a str,
    classes: Vec<String>,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn evaluate_model(
    cfg: &PipelineConfig,
    hash: &str,
    model_path: &Path,
    features_dir: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let model = load_model(model_path, &[STAGE_SELECT, STAGE_JOINT])?;
    let u = model.weights.as_ref().context("model has no part weights")?;
    let features = FeatureSet::open(features_dir)?;
    if u.n_classes != features.n_classes() {
        bail!(
            "model has {} classes but the features have {}",
            u.n_classes,
            features.n_classes()
        );
    }
    let examples = features.load(split, cfg.features.use_flip)?;
    let report = evaluate(u, &model.bank, &model.grid, &examples)?;
    let body = ReportBody {
        model_stage: model.metadata.get("stage").map(String::as_str).unwrap_or(""),
        split: match split {
            Split::Train => "train",
            Split::Test => "test",
        },
        classes: features.index.classes.clone(),
        report: report.clone(),
    };
    match out {
        Some(p) => {
            ensure_parent(p)?;
            stamped(cfg, hash, p, body)?;
        }
        None => {
            let s = Stamped {
                config_hash: hash,
                seed: cfg.seed,
                body,
            };
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(report)
}

pub fn export_viz(
    cfg: &PipelineConfig,
    hash: &str,
    model_path: &Path,
    features_dir: &Path,
    top_k: usize,
    out_dir: &Path,
) -> Result<()> {
    let model = load_model(model_path, &[STAGE_SELECT, STAGE_JOINT])?;
    let u = model.weights.as_ref().context("model has no part weights")?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut csv = Vec::new();
    write_csv_header(&mut csv, cfg, hash)?;
    write_weights_csv(u, &class_names(&model), &mut csv)?;
    std::fs::write(out_dir.join("weights.csv"), csv)?;

    let features = FeatureSet::open(features_dir)?;
    let test = features.load(Split::Test, false)?;
    let detections = top_detections(&model.bank, &test, top_k)?;
    #[derive(Serialize)]
    struct Body {
        split: &'static str,
        top_k: usize,
        parts: Vec<PartDetections>,
    }
    stamped(
        cfg,
        hash,
        &out_dir.join("detections.json"),
        Body {
            split: "test",
            top_k,
            parts: detections,
        },
    )?;
    log::info!("wrote weights.csv and detections.json to {}", out_dir.display());
    Ok(())
}
