use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
    "seed": 11,
    "modes": ["AdaFedFR"],
    "data": { "n_server_ids": 6, "n_clients": 2, "ids_per_client": 3, "n_eval_ids": 6,
              "samples_per_id": 6, "input_dim": 8 },
    "model": { "input_dim": 8, "hidden": [8], "embed_dim": 4 },
    "pretrain": { "epochs": 1 },
    "federation": { "rounds": 1, "local_epochs": 1 },
    "personalized": { "finetune_epochs": 1 }
}"#;

fn fedrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedrep")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_tiny(dir: &Path, config: &str, out: &str) -> Output {
    let cfg = write(dir, "cfg.json", config);
    let out = dir.join(out);
    fedrep(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn missing_config_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nope.json");
    let o = fedrep(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(dir.path(), "{\n  \"seed\": 1,\n  \"sede\": 2\n}", "out");
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("sede") && err.contains("line 3"), "{err}");
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(dir.path(), r#"{ "federation": { "lr": 0.0 } }"#, "out");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr"));
}

#[test]
fn one_round_one_mode_row_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(dir.path(), TINY, "out");
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[1].starts_with("11,AdaFedFR,0,"));
    assert!(lines[2].starts_with("11,AdaFedFR,1,"));
    for name in [
        "summary.txt",
        "curves.svg",
        "config.resolved.json",
        "personalized.csv",
        "timings.csv",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("AdaFedFR"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let noisy = TINY.replace(
        r#""local_epochs": 1"#,
        r#""local_epochs": 1, "privacy": { "sigma": 0.05 }"#,
    );
    for out in ["a", "b"] {
        assert!(run_tiny(dir.path(), &noisy, out).status.success());
    }
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", TINY);
    let out = dir.path().join("s");
    let o = fedrep(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("5,")));
}

#[test]
fn non_finite_loss_exits_3_with_attribution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TINY.replace(
        r#""local_epochs": 1"#,
        r#""local_epochs": 1, "alphas": { "lmc": 1.7976931348623157e308, "kcl": 5.0, "bce": 10.0 }"#,
    );
    let o = run_tiny(dir.path(), &cfg, "out");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("round") && err.contains("client"), "{err}");
}

const HAND: &str =
    "seed,mode,round,loss_lmc,loss_kcl,loss_bce,loss_overall,tar_far_1e-1,tar_far_1e-2,tpir_fpir_1e-1,top1,top5
0,A,0,,,,,0.5,0.2,0.1,0.3,0.4
0,A,1,1,0,0,1,0.6,0.4,0.2,0.4,0.5
0,B,0,,,,,0.5,0.2,0.1,0.3,0.4
0,B,1,1,0,0,1,0.55,0.3,0.2,0.4,0.5
";

#[test]
fn compare_identical_inputs_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.csv", HAND);
    let b = write(dir.path(), "b.csv", HAND);
    let o = fedrep(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows = |file: &str| -> Vec<String> {
        text.lines()
            .filter(|l| l.contains(file))
            .map(|l| l.replace(file, ""))
            .collect()
    };
    let (ra, rb) = (rows("a.csv"), rows("b.csv"));
    assert_eq!(ra.len(), 2);
    assert_eq!(ra, rb);
}

#[test]
fn compare_missing_mode_is_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.csv", HAND);
    let only_a: String = HAND
        .lines()
        .filter(|l| !l.starts_with("0,B"))
        .map(|l| format!("{l}\n"))
        .collect();
    let b = write(dir.path(), "b.csv", &only_a);
    let o = fedrep(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("B") && err.contains("b.csv"), "{err}");
}

#[test]
fn plot_writes_well_formed_svg() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "m.csv", HAND);
    let out = dir.path().join("c.svg");
    let o = fedrep(&[
        "plot",
        "--metric",
        "tar_far_1e-2",
        csv.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(&out).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
    assert_eq!(lines.len(), 2);
    for l in lines {
        assert_eq!(l.attribute("points").unwrap().split_whitespace().count(), 2);
    }
}

#[test]
fn plot_unknown_metric_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "m.csv", HAND);
    let out = dir.path().join("c.svg");
    let o = fedrep(&[
        "plot",
        "--metric",
        "accuracy",
        csv.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("accuracy"));
    assert!(!out.exists());
}
