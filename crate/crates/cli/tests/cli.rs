use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn noisegrid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisegrid"))
        .args(args)
        .current_dir(dir)
        .env_remove("NOISEGRID_JOBS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, extra: serde_json::Value) {
    let mut cfg = serde_json::json!({
        "seed": 5,
        "corpus": { "height": 72, "width": 96, "cycles": 2, "test_cycles": 1, "genuine": 1, "sample_size": 12 },
        "residuals": { "generators": ["median", "steganalytic:kb"] },
        "extractor": { "k": 2, "restarts": 3 },
        "mlp": { "input_dim": 56, "hidden": [8] },
        "train": { "epochs": 3, "batch_size": 32 },
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&noisegrid(dir.path(), &[])), 1);
    assert_eq!(code(&noisegrid(dir.path(), &["synth"])), 1);
    assert_eq!(code(&noisegrid(dir.path(), &["--help"])), 0);
    assert_eq!(code(&noisegrid(dir.path(), &["eval", "--config", "x.json", "--method", "cfa"])), 1);

    fs::write(dir.path().join("config.json"), r#"{"sed": 1}"#).unwrap();
    let out = noisegrid(dir.path(), &["synth", "--config", "config.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));

    write_config(dir.path(), serde_json::json!({}));
    assert_eq!(code(&noisegrid(dir.path(), &["synth", "--config", "config.json", "--jobs", "0"])), 1);
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), serde_json::json!({}));
    assert_eq!(code(&noisegrid(dir.path(), &["features", "--config", "config.json"])), 2);
    assert_eq!(code(&noisegrid(dir.path(), &["train", "--config", "config.json"])), 2);
    assert_eq!(code(&noisegrid(dir.path(), &["synth", "--config", "missing.json"])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        serde_json::json!({ "train": { "epochs": 3, "batch_size": 32, "learning_rate": 1e300 } }),
    );
    for stage in ["synth", "features"] {
        assert_eq!(code(&noisegrid(dir.path(), &[stage, "--config", "config.json"])), 0);
    }
    let out = noisegrid(dir.path(), &["train", "--config", "config.json"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, serde_json::json!({}));
    let cfg = ["--config", "config.json"];
    let run = |cmd: &str, extra: &[&str]| {
        let args: Vec<&str> = [cmd].iter().chain(&cfg).chain(extra).copied().collect();
        let out = noisegrid(d, &args);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };

    let synth = run("synth", &["--jobs", "2"]);
    assert!(synth.contains("R: 8") && synth.contains("G: 2"), "{synth}");
    let manifest = fs::read(d.join("corpus/manifest.json")).unwrap();
    run("synth", &[]);
    assert_eq!(fs::read(d.join("corpus/manifest.json")).unwrap(), manifest);

    assert!(run("features", &[]).contains("extracted: 16"));
    assert!(run("features", &[]).contains("cached: 16"));
    let genuine = fs::read(d.join("features/c00_04_G.nglb")).unwrap();
    assert!(genuine[12..].iter().all(|&b| b == 0));

    assert!(run("train", &[]).contains("trained on"));
    let model = fs::read(d.join("run/model.ngmlp")).unwrap();
    assert_eq!(&model[..5], b"NGMLP");

    let image = "corpus/images/c01_04_G.png";
    run("predict", &["--image", image]);
    let scores: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/predictions/c01_04_G.json")).unwrap()).unwrap();
    assert_eq!((scores["rows"].as_u64(), scores["cols"].as_u64()), (Some(12), Some(16)));
    let heat = image::open(d.join("run/predictions/c01_04_G_heatmap.png")).unwrap();
    assert_eq!((heat.height(), heat.width()), (72, 96));
    let first = fs::read(d.join("run/predictions/c01_04_G.json")).unwrap();
    run("predict", &["--image", image]);
    assert_eq!(fs::read(d.join("run/predictions/c01_04_G.json")).unwrap(), first);

    let ours = run("eval", &[]);
    assert!(ours.contains("method: ours"));
    for row in ["R[0]", "R[0.5σ]", "R[σ]", "R[2σ]", "J", "F", "B", "G", "overall"] {
        assert!(ours.lines().any(|l| l.starts_with(row)), "missing {row}:\n{ours}");
    }
    let noi = run("eval", &["--method", "noi"]);
    assert!(noi.contains("method: noi"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/eval_noi.json")).unwrap()).unwrap();
    assert_eq!(report["provenance"], "noi");
    let overall = report["rows"].as_array().unwrap().iter().find(|r| r["type"] == "overall").unwrap();
    assert_eq!(overall["n_images"], 8);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/run_manifest.json")).unwrap()).unwrap();
    for stage in ["synth", "features", "train", "predict", "eval_ours", "eval_noi"] {
        assert!(manifest["stages"][stage]["config_hash"].is_string(), "{stage}");
    }

    write_config(d, serde_json::json!({ "extractor": { "k": 2, "restarts": 4 } }));
    let out = noisegrid(d, &["predict", "--config", "config.json", "--image", image]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn jobs_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), serde_json::json!({}));
    let out = Command::new(env!("CARGO_BIN_EXE_noisegrid"))
        .args(["synth", "--config", "config.json"])
        .current_dir(dir.path())
        .env("NOISEGRID_JOBS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let bad = Command::new(env!("CARGO_BIN_EXE_noisegrid"))
        .args(["synth", "--config", "config.json"])
        .current_dir(dir.path())
        .env("NOISEGRID_JOBS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
}
