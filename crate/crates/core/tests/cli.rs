use std::path::Path;
use std::process::{Command, Output};

fn shades(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shades"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn shades binary")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{"seed": 3,
            "scenario": {"num_annotators": 45, "num_items": 90, "labels_per_annotator": 40},
            "dim": 4, "samples": 30, "burn_in": 10, "init_iters": 50, "k_max": 5, "min_size": 3,
            "c_grid": [0.1, 1.0]}"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

fn ok(out: &Output, stage: &str) {
    assert!(
        out.status.success(),
        "{stage} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let c = cfg.as_str();
    ok(&shades(dir, &["--config", c, "simulate", "--out", "sim"]), "simulate");
    for f in ["labels.csv", "features.csv", "truth.json"] {
        assert!(dir.join("sim").join(f).exists(), "missing {f}");
    }
    ok(&shades(dir, &["--config", c, "factorize", "--labels", "sim/labels.csv", "--out", "model.json"]), "factorize");
    ok(&shades(dir, &["--config", c, "shades", "--model", "model.json", "--out", "shades.json"]), "shades");
    ok(
        &shades(
            dir,
            &["--config", c, "train", "--labels", "sim/labels.csv", "--features", "sim/features.csv", "--shades", "shades.json", "--out", "cls.json"],
        ),
        "train",
    );
    let labels = std::fs::read_to_string(dir.join("sim/labels.csv")).unwrap();
    let user = labels.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let features = std::fs::read_to_string(dir.join("sim/features.csv")).unwrap();
    let items: Vec<&str> = features.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    ok(
        &shades(dir, &["--config", c, "predict", "--classifiers", "cls.json", "--features", "sim/features.csv", "--user", &user, "--out", "pred.csv"]),
        "predict",
    );
    let pred = std::fs::read_to_string(dir.join("pred.csv")).unwrap();
    let mut lines = pred.lines();
    assert_eq!(lines.next(), Some("item_id,label,margin,shade,fallback"));
    assert_eq!(lines.count(), 90);
    assert!(dir.join("pred.csv.provenance.json").exists());

    // a new user folded in through the factor model
    let mine = format!("item_id,label\n{},1\n{},0\n{},1\n", items[0], items[1], items[2]);
    std::fs::write(dir.join("mine.csv"), mine).unwrap();
    let wanted = format!("{},{}", items[3], items[4]);
    ok(
        &shades(
            dir,
            &[
                "--config", c, "predict", "--classifiers", "cls.json", "--features", "sim/features.csv", "--user-labels", "mine.csv",
                "--model", "model.json", "--items", &wanted, "--out", "new.csv",
            ],
        ),
        "predict new user",
    );
    assert_eq!(std::fs::read_to_string(dir.join("new.csv")).unwrap().lines().count(), 3);

    ok(&shades(dir, &["--config", c, "impute", "--model", "model.json", "--out", "imputed.csv"]), "impute");
    assert_eq!(std::fs::read_to_string(dir.join("imputed.csv")).unwrap().lines().count(), 1 + 45 * 90);
}

#[test]
fn exit_codes_follow_error_category() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // usage error
    assert_eq!(shades(dir, &["frobnicate"]).status.code(), Some(2));
    // missing input file
    assert_eq!(shades(dir, &["factorize", "--labels", "nope.csv", "--out", "m.json"]).status.code(), Some(2));
    // malformed labels
    std::fs::write(dir.join("bad.csv"), "annotator_id,item_id,attribute_id,label\na,x,attr,7\n").unwrap();
    let out = shades(dir, &["factorize", "--labels", "bad.csv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    // unreadable config
    std::fs::write(dir.join("cfg.json"), "{ not json").unwrap();
    assert_eq!(shades(dir, &["--config", "cfg.json", "simulate", "--out", "s"]).status.code(), Some(2));
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    ok(&shades(dir, &["--config", &cfg, "simulate", "--out", "sim"]), "simulate");
    ok(
        &shades(dir, &["--config", &cfg, "factorize", "--labels", "sim/labels.csv", "--method", "map", "--dim", "6", "--out", "m.json"]),
        "factorize",
    );
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("m.json")).unwrap()).unwrap();
    assert_eq!(model["method"], "map", "method flag ignored");
    assert_eq!(model["D"].as_u64(), Some(6));
}

#[test]
fn evaluate_writes_report_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("eval.json"),
        r#"{"evaluation": {"repeats": 2, "dim": 6, "samples": 40, "burn_in": 10, "dim_sweep": [4, 6, 8],
            "query_sizes": [2, 3], "queries": 400}}"#,
    )
    .unwrap();
    ok(&shades(dir, &["--config", "eval.json", "evaluate", "--out", "report"]), "evaluate");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report/report.json")).unwrap()).unwrap();
    let sweep = report["dim_sweep"].as_array().unwrap();
    assert_eq!(sweep.len(), 3);
    let spread = report["dim_spread"].as_f64().unwrap();
    println!("latent-dimension sweep spread {:.1} points", 100.0 * spread);
    assert!(spread <= 0.05, "accuracy moved {spread} across latent dimensions");
    assert_eq!(report["queries"].as_array().unwrap().len(), 2);
    let table = std::fs::read_to_string(dir.join("report/report.txt")).unwrap();
    assert!(table.contains("shades"));
}
