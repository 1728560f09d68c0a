use std::path::Path;
use std::process::{Command, Output};

fn cisunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cisunet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_line(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not json: {line}"))
}

fn parameters(info: &str) -> f64 {
    let line = info.lines().find(|l| l.starts_with("parameters:")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn info_reports_counts_and_exact_breakdown() {
    let o = cisunet(&["info", "--preset", "tiny"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("variant: tiny"));
    assert!(text.contains("attention: csw_sa"));
    assert!(text.contains("stage_channels (C): 32,64,128,256"));
    let total = parameters(&text);
    let breakdown: f64 = text
        .lines()
        .skip_while(|l| !l.starts_with("breakdown:"))
        .skip(1)
        .map(|l| l.split_whitespace().last().unwrap().parse::<f64>().unwrap())
        .sum();
    assert_eq!(total, breakdown);

    let sw = parameters(&stdout(&cisunet(&[
        "info",
        "--preset",
        "tiny",
        "--attention",
        "sw_sa",
    ])));
    assert!(sw < total);
}

#[test]
fn bad_inputs_exit_nonzero_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "window_size = 0\n").unwrap();
    let e = error_line(&cisunet(&["info", "--config", cfg.to_str().unwrap()]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("window_size"));

    let e = error_line(&cisunet(&[
        "predict",
        "--ckpt",
        "missing.ckpt",
        "--input",
        "x.nii",
        "--out",
        "y.nii",
    ]));
    assert_eq!(e["error"], "io");

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(empty.join("images")).unwrap();
    let e = error_line(&cisunet(&[
        "train",
        "--preset",
        "tiny",
        "--data-dir",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]));
    assert_eq!(e["error"], "dataset");
}

fn gen(dir: &Path, classes: &str, count: &str, size: &str) {
    let o = cisunet(&[
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
        "--classes",
        classes,
        "--count",
        count,
        "--size",
        size,
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn identity_evaluation_is_perfect_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "4", "2", "32");
    let report = dir.path().join("report.tsv");
    let o = cisunet(&[
        "evaluate",
        "--identity",
        "--classes",
        "4",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let cohort: Vec<&str> = text
        .split("[cohort]\n")
        .nth(1)
        .unwrap()
        .lines()
        .skip(1)
        .collect();
    assert_eq!(cohort.len(), 3 + 1);
    for row in &cohort {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[2], "1.0000", "{row}");
        assert_eq!(cols[3], "0.0000", "{row}");
    }

    let e = error_line(&cisunet(&[
        "evaluate",
        "--identity",
        "--classes",
        "2",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]));
    assert_eq!(e["error"], "dataset");
}

#[test]
fn train_then_predict_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "3", "1", "32");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "preset = tiny\nnum_classes = 3\npatch_size = 16, 16, 16\nbatch_size = 1\niterations = 2\n\
         checkpoint_every = 1\nvalidate_every = 0\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = cisunet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("iter_000001.ckpt").is_file());
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = out.join("final.ckpt");
    let input = data.join("images/phantom_000.nii.gz");
    let mut bytes = Vec::new();
    for name in ["a.nii.gz", "b.nii.gz"] {
        let path = dir.path().join(name);
        let o = cisunet(&[
            "predict",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let pred = cisunet_core::data::read_labels(dir.path().join("a.nii.gz")).unwrap();
    assert_eq!(pred.dims(), [32, 32, 32]);
    assert!(pred.label_set().iter().all(|&l| l < 3));

    let report = dir.path().join("report.tsv");
    let o = cisunet(&[
        "evaluate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
