use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use radon_cbir::synthetic::{encode_png, generate, write_corpus, CorpusPaths, SyntheticSpec};
use radon_cbir::GrayImage;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radon-cbir"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path, per_class: usize) -> CorpusPaths {
    let spec = SyntheticSpec {
        train_per_class: per_class,
        test_per_class: 3,
        ..SyntheticSpec::default()
    };
    write_corpus(dir, &generate(&spec)).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(cli(&[]).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--manifest", "x.csv"]).status.code(), Some(1));
    assert_eq!(cli(&["barcode", "x.png", "--size", "abc"]).status.code(), Some(1));
    let o = cli(&["barcode", "x.png", "--size", "20"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unsupported normalized size 20"));
    assert_eq!(cli(&["benchmark", "--manifest", "a", "--test-manifest", "b", "--grid", "16by8"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
    assert_eq!(cli(&["--version"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    assert_eq!(cli(&["barcode", s(&missing)]).status.code(), Some(2));

    let garbage = dir.path().join("garbage.png");
    fs::write(&garbage, b"not an image").unwrap();
    assert_eq!(cli(&["barcode", s(&garbage)]).status.code(), Some(2));

    let manifest = dir.path().join("m.csv");
    fs::write(&manifest, "path,class,irma_code\nmissing.png,a,\ngarbage.png,b,\n").unwrap();
    let o = cli(&[
        "train", "--manifest", s(&manifest),
        "--model", s(&dir.path().join("m.bin")),
        "--index", s(&dir.path().join("i.bin")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("2 row(s) failed") && err.contains("line 2") && err.contains("line 3"), "{err}");
}

#[test]
fn barcode_command() {
    let dir = tempfile::tempdir().unwrap();
    let blank = dir.path().join("blank.png");
    fs::write(&blank, encode_png(&GrayImage::new(40, 30, vec![0.0; 1200]).unwrap())).unwrap();
    let o = cli(&["barcode", s(&blank), "--size", "32", "--projections", "20"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 21);
    assert!(lines[..20].iter().all(|l| *l == "0".repeat(32)));
    assert_eq!(lines[20], "packed size: 80 bytes");

    let paths = corpus(dir.path(), 1);
    let img = paths.train_manifest.parent().unwrap().join("train/cross_000.png");
    for (p, expected_lines) in [("8", 8), ("16", 16)] {
        let out = stdout(&cli(&["barcode", s(&img), "--size", "16", "--projections", p]));
        let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with("packed")).collect();
        assert_eq!(rows.len(), expected_lines);
        assert!(rows.iter().all(|l| l.len() == 16));
    }
}

#[test]
fn train_retrieve_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let paths = corpus(dir.path(), 10);
    // an unlabeled row is skipped, not fatal
    let mut text = fs::read_to_string(&paths.train_manifest).unwrap();
    text.push_str("train/disk_000.png,,\n");
    fs::write(&paths.train_manifest, text).unwrap();

    let (model, index) = (dir.path().join("m.bin"), dir.path().join("i.bin"));
    let train_args = |model: &Path, index: &Path| {
        cli(&[
            "train", "--manifest", s(&paths.train_manifest),
            "--size", "16", "--projections", "8",
            "--model", s(model), "--index", s(index), "--workers", "2",
        ])
    };
    let o = train_args(&model, &index);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("classes: 4"));
    assert!(out.contains("images: 40"));
    assert!(out.contains("skipped rows: 1"));
    assert!(out.contains("pairwise machines: 6"));
    assert!(out.lines().any(|l| l.starts_with("wall time: ") && l.ends_with(" s")));

    // rerun: byte-identical artifacts
    let (model2, index2) = (dir.path().join("m2.bin"), dir.path().join("i2.bin"));
    assert!(train_args(&model2, &index2).status.success());
    assert_eq!(fs::read(&model).unwrap(), fs::read(&model2).unwrap());
    assert_eq!(fs::read(&index).unwrap(), fs::read(&index2).unwrap());

    // self-retrieval over direct search finds the image at distance 0; at
    // 16x8 a symmetric shape of another class can share the same barcode
    let query = dir.path().join("train/ring_004.png");
    let o = cli(&["retrieve", s(&query), "--model", s(&model), "--index", s(&index), "--direct"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("predicted class: "));
    assert_eq!(lines[1], "rank,id,class,distance");
    assert_eq!(lines.len(), 2 + 5);
    assert!(lines[2].ends_with(",0"));
    assert!(
        lines[2..].iter().any(|l| l.ends_with(",train/ring_004.png,ring,0")),
        "{out}"
    );

    let report = dir.path().join("report.csv");
    let o = cli(&[
        "evaluate", "--model", s(&model), "--index", s(&index),
        "--manifest", s(&paths.test_manifest), "--report", s(&report), "--k", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("queries: 12"));
    assert!(out.lines().any(|l| l.starts_with("accuracy: ") && l.ends_with('%')));
    assert!(out.lines().any(|l| l.starts_with("mean latency: ")));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("query_id,true_code,predicted_class,top1_id,top1_code,error\n"));
    assert_eq!(csv.lines().count(), 1 + 12 + 2);
    assert!(csv.lines().rev().nth(1).unwrap().starts_with("total_error,"));

    // model and index from different layouts
    let (model3, index3) = (dir.path().join("m3.bin"), dir.path().join("i3.bin"));
    let o = cli(&[
        "train", "--manifest", s(&paths.train_manifest), "--size", "16", "--projections", "4",
        "--model", s(&model3), "--index", s(&index3),
    ]);
    assert!(o.status.success());
    let o = cli(&["retrieve", s(&query), "--model", s(&model), "--index", s(&index3)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("N=16 n_p=8") && err.contains("N=16 n_p=4"), "{err}");
}

#[test]
fn benchmark_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let paths = corpus(dir.path(), 4);
    let out_csv = dir.path().join("bench.csv");
    let o = cli(&[
        "benchmark", "--manifest", s(&paths.train_manifest),
        "--test-manifest", s(&paths.test_manifest),
        "--report", s(&out_csv), "--workers", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out_csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
    assert!(csv.starts_with("size,projections,accuracy,gated_total_error,direct_total_error,ms_per_query,error\n"));
}

#[test]
fn synth_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let o = cli(&["synth", "--out", s(&out), "--train-per-class", "2", "--test-per-class", "1"]);
    assert!(o.status.success());
    let train = fs::read_to_string(out.join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 1 + 8);
    assert_eq!(fs::read_to_string(out.join("test.csv")).unwrap().lines().count(), 1 + 4);
}
