use std::path::Path;

use m2sformer::backbone::ScalePreset;
use m2sformer::cli::{dispatch, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
use m2sformer::config::{parse_config, parse_str, RunConfig};
use m2sformer::difficulty::CurvatureMode;
use m2sformer::error::Error;
use m2sformer::m2s::DctConvention;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("m2sformer").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn parse_failures_and_help() {
    assert_eq!(run(&[]), EXIT_VALIDATION);
    assert_eq!(run(&["frobnicate"]), EXIT_VALIDATION);
    assert_eq!(run(&["--help"]), EXIT_OK);
    assert_eq!(run(&["--version"]), EXIT_OK);
    assert_eq!(
        run(&[
            "gen-synthetic",
            "--count",
            "2",
            "--type",
            "copy-move",
            "--out",
            "/tmp/x"
        ]),
        EXIT_VALIDATION
    );
    assert_eq!(
        run(&["score-difficulty", "x.csv", "--mode", "aswritten"]),
        EXIT_VALIDATION
    );
}

#[test]
fn count_params() {
    assert_eq!(run(&["count-params", "--preset", "toy"]), EXIT_OK);
    assert_eq!(run(&["count-params"]), EXIT_OK);
    assert_eq!(run(&["count-params", "--preset", "huge"]), EXIT_VALIDATION);
}

#[test]
fn config_defaults_follow_the_preset() {
    let full = parse_str("{}").unwrap();
    assert_eq!(full.preset_kind(), ScalePreset::Full);
    assert_eq!(full.train.batch_size, 32);
    assert_eq!(full.train.initial_lr, 1e-4);
    assert_eq!(full.model.m2s.dct_convention, DctConvention::Standard);

    let toy = parse_str(r#"{"model": {"preset": "toy"}, "seed": 9}"#).unwrap();
    assert_eq!(toy.train.batch_size, 4);
    assert_eq!(toy.train.seed, 9);
    assert_eq!(toy.model.backbone.encoder_channels, [16, 32, 48, 64]);

    let custom = parse_str(
        r#"{"model": {"preset": "toy", "curvature_mode": "standard", "dct_convention": "as_written"},
            "train": {"epochs": 3}, "data": {"folds": 4}}"#,
    )
    .unwrap();
    assert_eq!(
        custom.model.decoder.difficulty.mode,
        CurvatureMode::Standard
    );
    assert_eq!(custom.model.m2s.dct_convention, DctConvention::AsWritten);
    assert_eq!((custom.train.epochs, custom.data.folds), (3, 4));
}

#[test]
fn config_errors_name_the_field() {
    let err = parse_str(r#"{"model": {"reduced_channels": "many"}}"#).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("model.reduced_channels"), "{err}");

    let err = parse_str(r#"{"train": {"learning_rate": 1}}"#).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");

    let bad = parse_str(r#"{"data": {"resolution": 250}}"#).unwrap();
    assert!(bad
        .validate()
        .unwrap_err()
        .to_string()
        .contains("resolution"));
    let bad = parse_str(r#"{"data": {"folds": 3, "val_fold": 3}}"#).unwrap();
    assert!(bad.validate().is_err());
}

#[test]
fn config_snapshot_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(ScalePreset::Toy);
    cfg.train.epochs = 7;
    cfg.seed = 3;
    cfg.train.seed = 3;
    let path = dir.path().join("c.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    let back = parse_config(&path).unwrap();
    assert_eq!(back.model, cfg.model);
    assert_eq!(back.train, cfg.train);
    assert_eq!(back.seed, 3);
    assert!(matches!(
        parse_config(&dir.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn gen_synthetic_writes_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("syn");
    assert_eq!(
        run(&[
            "gen-synthetic",
            "--count",
            "3",
            "--size",
            "32",
            "--type",
            "copy_move",
            "--out",
            s(&out)
        ]),
        EXIT_OK
    );
    for i in 0..3 {
        assert!(out.join(format!("images/syn_{i:05}.png")).is_file());
        assert!(out.join(format!("masks/syn_{i:05}.png")).is_file());
    }
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(
        manifest
            .lines()
            .filter(|l| l.ends_with(",copy_move"))
            .count(),
        3
    );
    assert_eq!(
        run(&[
            "gen-synthetic",
            "--count",
            "1",
            "--size",
            "16",
            "--out",
            s(&out)
        ]),
        EXIT_VALIDATION
    );
    assert_eq!(
        run(&["gen-synthetic", "--count", "0", "--out", s(&out)]),
        EXIT_VALIDATION
    );
}

#[test]
fn score_difficulty_from_grids_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("p.csv");
    std::fs::write(&grid, "# prior\n0.1,0.2,0.3\n0.2,0.9,0.3\n0.1 0.2 0.3\n").unwrap();
    assert_eq!(run(&["score-difficulty", s(&grid)]), EXIT_OK);
    assert_eq!(
        run(&[
            "score-difficulty",
            s(&grid),
            "--mode",
            "standard",
            "--threshold",
            "0.7"
        ]),
        EXIT_OK
    );
    assert_eq!(
        run(&["score-difficulty", s(&grid), "--threshold", "1.5"]),
        EXIT_VALIDATION
    );

    let ragged = dir.path().join("r.csv");
    std::fs::write(&ragged, "0.1,0.2\n0.3\n").unwrap();
    assert_eq!(run(&["score-difficulty", s(&ragged)]), EXIT_VALIDATION);
    let words = dir.path().join("w.txt");
    std::fs::write(&words, "0.1 abc\n").unwrap();
    assert_eq!(run(&["score-difficulty", s(&words)]), EXIT_VALIDATION);
    assert_eq!(
        run(&["score-difficulty", s(&dir.path().join("none.csv"))]),
        EXIT_RUNTIME
    );

    let png = dir.path().join("p.png");
    image::GrayImage::from_fn(8, 8, |x, y| image::Luma([(x * 30 + y * 3) as u8]))
        .save(&png)
        .unwrap();
    assert_eq!(run(&["score-difficulty", s(&png)]), EXIT_OK);
}

#[test]
fn train_predict_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    assert_eq!(
        run(&[
            "gen-synthetic",
            "--count",
            "10",
            "--size",
            "64",
            "--seed",
            "2",
            "--out",
            s(&data)
        ]),
        EXIT_OK
    );

    let cfg_path = dir.path().join("toy.json");
    std::fs::write(
        &cfg_path,
        r#"{"model": {"preset": "toy"}, "data": {"resolution": 64}}"#,
    )
    .unwrap();
    let fold0 = runs.join("fold0");
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg_path),
            "--data",
            s(&data),
            "--epochs",
            "1",
            "--out",
            s(&fold0)
        ]),
        EXIT_OK
    );
    for f in ["config.json", "loss_log.csv", "best.ckpt", "final.ckpt"] {
        assert!(fold0.join(f).is_file(), "{f} missing");
    }
    let snapshot = parse_config(&fold0.join("config.json")).unwrap();
    assert_eq!(snapshot.train.epochs, 1);
    assert_eq!(snapshot.preset_kind(), ScalePreset::Toy);

    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg_path),
            "--preset",
            "full",
            "--data",
            s(&data),
            "--out",
            s(&runs.join("x"))
        ]),
        EXIT_VALIDATION
    );
    assert_eq!(
        run(&["train", "--preset", "toy", "--out", s(&runs.join("y"))]),
        EXIT_VALIDATION
    );

    let ckpt = fold0.join("best.ckpt");
    let mask = dir.path().join("mask.png");
    let img = data.join("images/syn_00000.png");
    assert_eq!(
        run(&[
            "predict",
            "--image",
            s(&img),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&mask),
            "--size",
            "64"
        ]),
        EXIT_OK
    );
    let m = image::open(&mask).unwrap();
    assert_eq!((m.width(), m.height()), (64, 64));
    assert_eq!(
        run(&[
            "predict",
            "--image",
            s(&img),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&mask),
            "--size",
            "50"
        ]),
        EXIT_VALIDATION
    );
    assert_eq!(
        run(&[
            "score-difficulty",
            s(&img),
            "--checkpoint",
            s(&ckpt),
            "--size",
            "64"
        ]),
        EXIT_OK
    );

    let eval = |out: &Path| {
        run(&[
            "eval",
            "--data",
            s(&data),
            "--checkpoints",
            s(&runs),
            "--size",
            "64",
            "--dataset",
            "syn",
            "--out",
            s(out),
        ])
    };
    let report = dir.path().join("report.csv");
    assert_eq!(eval(&report), EXIT_RUNTIME);
    for f in 1..5 {
        let d = runs.join(format!("fold{f}"));
        std::fs::create_dir_all(&d).unwrap();
        std::fs::copy(&ckpt, d.join("final.ckpt")).unwrap();
    }
    assert_eq!(eval(&report), EXIT_OK);
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "dataset,fold,dsc,miou");
    assert!(lines[6].starts_with("syn,mean,"));
}
