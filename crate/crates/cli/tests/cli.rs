mod common;

use std::fs;

use common::{cli, s, tiny};
use ganbank::datasets::{Manifest, Split};
use ganbank::generators::Generator;
use ganbank::io;
use ganbank::Error;
use ganbank_cli::ablate::{csv_header, AblationTable};
use ganbank_cli::invert::InvertSummary;
use ganbank_cli::landscape::{Landscape, LandscapeLoss};
use ganbank_cli::relight::frame_name;

#[test]
fn synth_split_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = cli(&["synth", "--n", "10", "--out", s(&dir.path().join("a")), "--seed", "4", "--size", "8"]).unwrap();
    let b = cli(&["synth", "--n", "10", "--out", s(&dir.path().join("b")), "--seed", "4", "--size", "8"]).unwrap();
    let m: Manifest = io::read_json(&a).unwrap();
    assert_eq!((m.count(Split::Train), m.count(Split::Test)), (7, 3));
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());

    let err = cli(&["synth", "--n", "1", "--out", s(&dir.path().join("c"))]).unwrap_err();
    assert!(err.to_string().contains("need ≥ 2 scenes for a split"), "{err}");
}

#[test]
fn train_joint_logs_and_repeats() {
    let t = tiny();
    let g = Generator::load(t.gens.join("joint").join("generator.jinv")).unwrap();
    assert_eq!(g.out_shape().2, 6);
    let log: Vec<serde_json::Value> = io::read_json(t.gens.join("joint").join("train_log.json")).unwrap();
    assert_eq!(log.len(), 6);

    let again = t.path("joint_again");
    cli(&["train", "--component", "joint", "--data", s(&t.data), "--steps", "6", "--out", s(&again), "--config", s(&t.config)])
        .unwrap();
    for f in ["generator.jinv", "discriminator.jinv", "train_log.json"] {
        assert_eq!(fs::read(t.gens.join("joint").join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_needs_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let r = cli(&["train", "--component", "albedo", "--data", s(&dir.path().join("nope")), "--steps", "2", "--out", s(dir.path())]);
    assert!(matches!(r, Err(Error::MissingFile(_))));
}

#[test]
fn invert_defaults_regularizers_and_mismatch() {
    let t = tiny();
    let target = t.target(0);
    let (alb, sha) = (t.gens.join("albedo"), t.gens.join("shading"));
    let run = |reg: &str, out: &str| {
        cli(&[
            "invert", "--target", s(&target), "--gens", s(&alb), s(&sha), "--reg", reg, "--out", s(&t.path(out)),
            "--config", s(&t.config),
        ])
        .unwrap()
    };
    let knn: InvertSummary = io::read_json(run("knn", "inv_knn")).unwrap();
    assert_eq!(knn.inversion.steps, 1000);
    assert_eq!(knn.inversion.lr, 0.1);
    assert_eq!(knn.inversion.regularizer.k, 50);
    assert_eq!(knn.inversion.regularizer.weight, 1e-4);
    assert_eq!(knn.regularizer.to_string(), "knn");
    // The target is a dataset scene, so metrics are written.
    assert!(knn.metrics.is_some());
    assert!(t.path("inv_knn").join("metrics.json").is_file());

    let none: InvertSummary = io::read_json(run("none", "inv_none")).unwrap();
    assert_eq!(none.regularizer.to_string(), "none");

    let err = cli(&[
        "invert", "--target", s(&target), "--gens", s(&alb), s(&sha), s(&alb), "--model", "lambertian", "--out",
        s(&t.path("bad")), "--config", s(&t.config),
    ])
    .unwrap_err();
    assert!(matches!(err, Error::ComponentMismatch { .. }), "{err}");

    let err = cli(&[
        "invert", "--target", s(&target), "--gens", s(&alb), s(&sha), "--encoder-init", "--out", s(&t.path("bad2")),
        "--config", s(&t.config),
    ])
    .unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn invert_with_encoder_and_pti_then_relight() {
    let t = tiny();
    let out = t.path("inv");
    cli(&[
        "invert", "--target", s(&t.target(1)), "--gens", s(&t.gens.join("albedo")), s(&t.gens.join("shading")),
        "--encoder-init", "--encoder", s(&t.gens.join("encoders")), "--pti", "dloss", "--steps", "30", "--out", s(&out),
        "--config", s(&t.config),
    ])
    .unwrap();
    let summary: InvertSummary = io::read_json(out.join("result.json")).unwrap();
    assert!(summary.encoder_init && summary.pti_config.as_ref().unwrap().use_d_loss);
    assert!(out.join("pti_trace.json").is_file());
    let shading_gen = out.join(&summary.generators[1]);
    assert!(shading_gen.is_file());

    let albedo_before = fs::read(out.join("albedo.pfm")).unwrap();
    let frames = cli(&[
        "relight", "--result", s(&out), "--shading-gen", s(&shading_gen), "--direction", "0", "--alphas=-2,-1,0,1,2",
    ])
    .unwrap();
    for i in 0..5 {
        assert!(frames.join(frame_name(i)).is_file());
    }
    assert!(!frames.join(frame_name(5)).exists());
    assert_eq!(fs::read(frames.join(frame_name(2))).unwrap(), fs::read(out.join("reconstruction.png")).unwrap());
    assert_eq!(fs::read(out.join("albedo.pfm")).unwrap(), albedo_before);

    let missing = cli(&["relight", "--result", s(&t.path("none")), "--shading-gen", s(&shading_gen), "--direction", "0", "--alphas", "0"]);
    assert!(missing.is_err());
}

#[test]
fn landscape_knn_k1_and_indomain_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let knn = dir.path().join("knn");
    cli(&["landscape", "--k", "1", "--loss", "knn", "--out", s(&knn), "--grid", "64"]).unwrap();
    let grid = io::read_pfm(knn.join("landscape.pfm")).unwrap();
    let bank = ganbank::priors::SampleBank::load(knn.join("bank.jinv")).unwrap();
    let ls = Landscape::evaluate(&bank, LandscapeLoss::Knn, 1, 64).unwrap();
    // The PFM holds f32 values of the same grid.
    assert!(grid.data.iter().zip(&ls.values).all(|(a, b)| *a == *b as f32 as f64));
    for r in bank.rows() {
        let (row, col) = ls.nearest_cell(r);
        assert!(ls.at(row, col) <= ls.cell_diameter() / 2.0 + 1e-12);
    }

    let ind = dir.path().join("ind");
    cli(&["landscape", "--loss", "indomain", "--out", s(&ind), "--grid", "64"]).unwrap();
    let ls = Landscape::evaluate(&bank, LandscapeLoss::Indomain, 5, 64).unwrap();
    assert_eq!(ls.argmin(), vec![ls.nearest_cell(&bank.mean().0)]);

    let bad = ganbank::priors::SampleBank::from_rows(&[vec![0.0; 3], vec![1.0; 3]], "x", 0).unwrap();
    let path = dir.path().join("bad.jinv");
    bad.save(&path).unwrap();
    assert!(cli(&["landscape", "--bank-2d", s(&path), "--loss", "knn", "--out", s(&dir.path().join("x"))]).is_err());
}

#[test]
fn ablate_table_shape_and_rerun() {
    let t = tiny();
    let run = |out: &str| {
        cli(&[
            "ablate", "--suite", "faces-style", "--data", s(&t.data), "--gens-dir", s(&t.gens), "--out", s(&t.path(out)),
            "--n-test", "2", "--steps", "15", "--config", s(&t.config),
        ])
        .unwrap()
    };
    let a = run("abl_a");
    let b = run("abl_b");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let mut rdr = csv::Reader::from_path(&a).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, csv_header());
    assert_eq!(header.len(), 1 + 4 * 3);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 7);
    for row in &rows {
        for cell in row.iter().skip(1) {
            assert!(cell.parse::<f64>().unwrap().is_finite(), "{cell}");
        }
    }
    let table: AblationTable = io::read_json(t.path("abl_a").join("ablation.json")).unwrap();
    assert_eq!(table.per_scene.len(), 2);

    fs::remove_dir_all(t.gens.join("encoders")).unwrap();
    let r = cli(&[
        "ablate", "--suite", "faces-style", "--data", s(&t.data), "--gens-dir", s(&t.gens), "--out", s(&t.path("abl_c")),
        "--n-test", "1", "--steps", "5", "--config", s(&t.config),
    ]);
    assert!(matches!(r, Err(Error::MissingFile(_))));
}
