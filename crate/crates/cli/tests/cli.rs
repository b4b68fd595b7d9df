use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ckfr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckfr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) {
    let text = format!(
        r#"{{"synth": {{"images_per_class": 10, "image_size": 16}}, "train": {{"epochs": 1{extra}}}, "out": "out"}}"#
    );
    fs::write(dir.join("run.json"), text).unwrap();
}

#[test]
fn distances_matrix_is_symmetric_with_zero_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tree.txt"), "root\nroot\ta\nroot\tb\na\ta1\na\ta2\nb\tb1\n").unwrap();
    fs::write(dir.path().join("map.tsv"), "x\ta1\ny\ta2\nz\tb1\n").unwrap();
    let out = ckfr(dir.path(), &["distances", "--tree", "tree.txt", "--classes", "map.tsv", "--out", "D.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("D.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').skip(1).collect()).collect();
    assert_eq!(rows.len(), 3);
    for i in 0..3 {
        assert_eq!(rows[i][i].parse::<f64>().unwrap(), 0.0);
        for j in 0..3 {
            assert_eq!(rows[i][j], rows[j][i]);
        }
    }
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 2.0);
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 4.0);
}

#[test]
fn repeated_train_gives_identical_history() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), r#", "loss": {"alpha": 1.0}"#);
    let mut histories = Vec::new();
    for out in ["a", "b"] {
        let o = ckfr(dir.path(), &["train", "--config", "run.json", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        histories.push(fs::read(dir.path().join(out).join("history.csv")).unwrap());
        assert!(dir.path().join(out).join("resolved-config.json").exists());
        assert!(dir.path().join(out).join("model.ckpt").exists());
    }
    assert_eq!(histories[0], histories[1]);
    let resolved = fs::read_to_string(dir.path().join("a/resolved-config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 7"));
}

#[test]
fn sweep_writes_one_row_per_alpha_and_a_plot() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), "");
    let o = ckfr(dir.path(), &["sweep", "--config", "run.json", "--alpha", "0,1,3,10,30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    let alphas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(alphas, ["0", "1", "3", "10", "30"]);
    assert!(fs::read_to_string(dir.path().join("out/sweep.svg")).unwrap().starts_with("<svg"));
    let o = ckfr(dir.path(), &["report", "out/sweep.csv", "--out", "plot.svg"]);
    assert!(o.status.success());
    assert!(fs::read_to_string(dir.path().join("plot.svg")).unwrap().contains("<polyline"));
}

#[test]
fn eval_cam_and_latent_export_after_train() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"synth": {"images_per_class": 10, "image_size": 16}, "backbone": {"viz_layer": true}, "train": {"epochs": 1}, "out": "out"}"#;
    fs::write(dir.path().join("run.json"), text).unwrap();
    assert!(ckfr(dir.path(), &["train", "--config", "run.json"]).status.success());
    let o = ckfr(dir.path(), &["eval", "--config", "run.json", "--preset", "vit"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("out/eval.csv")).unwrap();
    assert!(csv.contains("\nsingle,") && csv.contains("\ndual,"));
    assert!(ckfr(dir.path(), &["cam", "--config", "run.json", "--limit", "3"]).status.success());
    let cams = fs::read_dir(dir.path().join("out/cam")).unwrap().count();
    assert_eq!(cams, 6);
    assert!(ckfr(dir.path(), &["latent3d", "--config", "run.json"]).status.success());
    let first = fs::read(dir.path().join("out/latent3d.csv")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().next(), Some("id,label,v1,v2,v3"));
    assert_eq!(text.lines().count(), 17);
    assert!(ckfr(dir.path(), &["latent3d", "--config", "run.json"]).status.success());
    assert_eq!(fs::read(dir.path().join("out/latent3d.csv")).unwrap(), first);
}

#[test]
fn gen_writes_dataset_directories() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), "");
    assert!(ckfr(dir.path(), &["gen", "--config", "run.json", "--out", "g"]).status.success());
    for f in ["train/manifest.json", "train/images.bin", "train/labels.csv", "train/boxes.csv", "val/manifest.json", "tree.txt", "distances.csv"] {
        assert!(dir.path().join("g").join(f).exists(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ckfr(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let o = ckfr(dir.path(), &["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    fs::write(dir.path().join("bad.json"), r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(ckfr(dir.path(), &["train", "--config", "bad.json"]).status.code(), Some(2));
    assert_eq!(ckfr(dir.path(), &["eval", "--preset", "resnet"]).status.code(), Some(2));
    assert_eq!(ckfr(dir.path(), &["eval", "--out", "nothing-here"]).status.code(), Some(1));
    assert_eq!(ckfr(dir.path(), &["--help"]).status.code(), Some(0));
}
