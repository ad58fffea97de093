use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use partforge_core::features::{read_pyramid_file, LatentLocation};
use partforge_core::model::{part_score, read_model_file};
use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "synth.train_per_class=6",
    "--set",
    "synth.test_per_class=3",
    "--set",
    "partgen.pool_size=12",
    "--set",
    "partgen.whitening_samples=500",
    "--set",
    "select.target_m=4",
    "--set",
    "select.epochs=40",
    "--set",
    "joint.outer_max_iters=2",
    "--set",
    "joint.cccp_max_iters=2",
];

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_partforge"))
        .args(args)
        .args(SMALL)
        .env("PARTFORGE_THREADS", "1")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "partforge {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

struct Run {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn pipeline() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let r = Run { _tmp: tmp, root };
    ok(&["synth-data", "--out", s(&r.p("corpus"))]);
    ok(&[
        "featurize",
        "--corpus",
        s(&r.p("corpus")),
        "--features-dir",
        s(&r.p("feat")),
    ]);
    ok(&[
        "init-parts",
        "--features-dir",
        s(&r.p("feat")),
        "--out",
        s(&r.p("parts.pbmd")),
    ]);
    ok(&[
        "select-parts",
        "--model",
        s(&r.p("parts.pbmd")),
        "--features-dir",
        s(&r.p("feat")),
        "--out",
        s(&r.p("sel.pbmd")),
    ]);
    ok(&[
        "train-joint",
        "--model",
        s(&r.p("sel.pbmd")),
        "--features-dir",
        s(&r.p("feat")),
        "--out",
        s(&r.p("joint.pbmd")),
    ]);
    r
}

#[test]
fn full_pipeline_produces_stamped_consistent_artifacts() {
    let r = pipeline();
    let manifest = json(&r.p("corpus/manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(manifest["train"].as_array().unwrap().len(), 24);

    for artifact in [
        "feat/index.json",
        "parts.provenance.json",
        "sel.selection.json",
        "joint.trace.json",
    ] {
        let v = json(&r.p(artifact));
        assert_eq!(v["config_hash"], hash.as_str(), "{artifact}");
        assert_eq!(v["seed"], 0, "{artifact}");
    }
    let sel = json(&r.p("sel.selection.json"));
    let n_sel = sel["selected"].as_array().unwrap().len();
    assert!(n_sel >= 1);

    let trace = json(&r.p("joint.trace.json"));
    let objs: Vec<f64> = trace["objectives"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(objs.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    for rec in trace["trace"].as_array().unwrap() {
        for key in ["iter", "stage", "objective", "train_accuracy"] {
            assert!(rec.get(key).is_some());
        }
    }
    assert!(r.p("joint.iter001.pbmd").exists());

    let model = read_model_file(&r.p("joint.pbmd")).unwrap();
    assert_eq!(model.metadata["stage"], "joint");
    assert_eq!(model.metadata["config_hash"], hash);
    assert!(model.metadata.contains_key("whitening_hash"));
    assert_eq!(model.bank.len(), n_sel);

    // Evaluation is deterministic.
    for name in ["eval1.json", "eval2.json"] {
        ok(&[
            "evaluate",
            "--model",
            s(&r.p("joint.pbmd")),
            "--features-dir",
            s(&r.p("feat")),
            "--out",
            s(&r.p(name)),
        ]);
    }
    let a = std::fs::read(r.p("eval1.json")).unwrap();
    assert_eq!(a, std::fs::read(r.p("eval2.json")).unwrap());
    let report = json(&r.p("eval1.json"));
    let acc = report["mean_class_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let confusion = report["confusion"].as_array().unwrap();
    for row in confusion {
        assert_eq!(
            row.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>(),
            3
        );
    }

    ok(&[
        "export-viz",
        "--model",
        s(&r.p("joint.pbmd")),
        "--features-dir",
        s(&r.p("feat")),
        "--top-k",
        "1",
        "--out-dir",
        s(&r.p("viz")),
    ]);
    let csv = std::fs::read_to_string(r.p("viz/weights.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 1 + 4);
    assert_eq!(lines[0].split(',').count(), 1 + n_sel * model.grid.len());

    let det = json(&r.p("viz/detections.json"));
    assert_eq!(det["config_hash"], hash.as_str());
    for part in det["parts"].as_array().unwrap() {
        let j = part["part"].as_u64().unwrap() as usize;
        let d = &part["detections"][0];
        let id = d["image_id"].as_str().unwrap();
        let pyr = read_pyramid_file(&r.p(&format!("feat/{id}.pbfp"))).unwrap();
        let loc: LatentLocation = serde_json::from_value(d["location"].clone()).unwrap();
        let rescored = part_score(&pyr, loc, &model.bank.parts[j]).unwrap();
        assert!((rescored - d["score"].as_f64().unwrap()).abs() <= 1e-10);
    }
}

#[test]
fn stages_are_ordered_and_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["synth-data", "--out", s(&p("corpus"))]);
    ok(&[
        "featurize",
        "--corpus",
        s(&p("corpus")),
        "--features-dir",
        s(&p("feat")),
    ]);
    for name in ["a.pbmd", "b.pbmd"] {
        ok(&["init-parts", "--features-dir", s(&p("feat")), "--out", s(&p(name))]);
    }
    assert_eq!(std::fs::read(p("a.pbmd")).unwrap(), std::fs::read(p("b.pbmd")).unwrap());
    assert_eq!(
        std::fs::read(p("a.provenance.json")).unwrap(),
        std::fs::read(p("b.provenance.json")).unwrap()
    );

    let (model, feat, out) = (p("a.pbmd"), p("feat"), p("j.pbmd"));
    let joint = |extra: &[&str]| {
        let mut args = vec![
            "train-joint",
            "--model",
            s(&model),
            "--features-dir",
            s(&feat),
            "--out",
            s(&out),
            "--no-checkpoints",
        ];
        args.extend_from_slice(extra);
        run(&args)
    };
    let refused = joint(&[]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("select"));
    // Evaluating an unweighted pool is refused as well.
    let out = run(&["evaluate", "--model", s(&p("a.pbmd")), "--features-dir", s(&p("feat"))]);
    assert!(!out.status.success());

    let skipped = joint(&["--skip-select", "--max-outer", "1"]);
    assert!(skipped.status.success(), "{}", String::from_utf8_lossy(&skipped.stderr));
    let model = read_model_file(&p("j.pbmd")).unwrap();
    assert_eq!(model.bank.len(), 12);
}

#[test]
fn config_file_and_flags_change_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 3\n[synth]\nnoise = 0.05\n").unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["synth-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth-data", "--config", s(&cfg), "--noise", "0.06", "--out", s(&b)]);
    let ma = json(&a.join("manifest.json"));
    let mb = json(&b.join("manifest.json"));
    assert_eq!(ma["seed"], 3);
    assert_ne!(ma["config_hash"], mb["config_hash"]);

    std::fs::write(&cfg, "[synth]\nnoize = 0.05\n").unwrap();
    let bad = run(&["synth-data", "--config", s(&cfg), "--out", s(&a)]);
    assert!(!bad.status.success());
}
