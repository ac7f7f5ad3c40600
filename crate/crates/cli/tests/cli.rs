//! End-to-end command tests driving the installed binary.

use std::path::Path;
use std::process::{Command, Output};

fn countloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_countloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = countloc(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

/// Tiny end-to-end settings: 16x16 images, 2x2 maps, two pyramid scales.
const TINY: &[&str] = &[
    "--set",
    "input_size=16",
    "--set",
    "stages=1",
    "--set",
    "backbone_widths=4,4,4",
    "--set",
    "ppm_scales=1,2",
    "--set",
    "ppm_channels=4",
    "--set",
    "stage_widths=4,6",
    "--set",
    "sigma_max=1.5",
    "--set",
    "epochs=2",
    "--set",
    "learning_rate=0.002",
    "--set",
    "batch_size=2",
];

fn synth_tiny(dir: &Path) {
    ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        "8",
        "--size",
        "16",
        "--count",
        "2",
        "--radius-min",
        "1.5",
        "--radius-max",
        "2.0",
        "--min-separation",
        "6",
        "--placement",
        "uniform",
        "--fractions",
        "0.5,0.25,0.25",
        "--seed",
        "3",
    ]);
}

#[test]
fn synth_writes_dataset_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "20",
        "--size",
        "64",
        "--count",
        "5",
        "--seed",
        "1",
    ]);
    assert!(data.join("manifest.csv").exists());
    assert!(data.join("annotations.json").exists());
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 21, "header plus 20 rows");
    assert!(manifest.lines().skip(1).all(|l| l.ends_with(",5")));
}

#[test]
fn synth_is_idempotent_outside_the_meta_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--out", out.to_str().unwrap(), "--n", "4", "--size", "32", "--seed", "9",
             "--count", "3", "--min-separation", "8", "--radius-min", "2", "--radius-max", "3"]);
    }
    let mut compared = 0;
    for entry in walk(&a) {
        let rel = entry.strip_prefix(&a).unwrap();
        if rel == Path::new("meta.txt") {
            continue;
        }
        let other = b.join(rel);
        assert_eq!(
            std::fs::read(&entry).unwrap(),
            std::fs::read(&other).unwrap(),
            "{} differs",
            rel.display()
        );
        compared += 1;
    }
    assert!(compared >= 6, "compared {compared} files");
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    files
}

#[test]
fn tile_cuts_a_quartered_raster() {
    let dir = tempfile::tempdir().unwrap();
    // build a 128x128 fixture via the library, then tile through the CLI
    let mut raster = countloc::dataset::Raster::new(128, 128);
    raster.set_pixel(5, 5, (200, 10, 10));
    countloc::dataset::write_ppm(dir.path().join("big.ppm"), &raster).unwrap();
    let ann = vec![countloc::confmap::AnnotationRecord {
        image_path: "big.ppm".into(),
        width: 128,
        height: 128,
        points: vec![[70.0, 10.0], [10.0, 80.0]],
    }];
    countloc::confmap::save_annotations(dir.path().join("ann.json"), &ann).unwrap();
    let out = dir.path().join("tiles");
    ok(&[
        "tile",
        "--raster",
        dir.path().join("big.ppm").to_str().unwrap(),
        "--annotations",
        dir.path().join("ann.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--patch",
        "64",
    ]);
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5, "header plus 4 tiles");
}

#[test]
fn unknown_flags_and_settings_fail() {
    let out = countloc(&["synth", "--out", "/tmp/x", "--definitely-not-a-flag"]);
    assert!(!out.status.success());
    let out = countloc(&["synth", "--out", "/tmp/x", "--set", "mystery=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));
}

#[test]
fn help_lists_every_default() {
    let help = ok(&["--help"]);
    for needle in ["sigma_max=3", "sigma_min=1", "stages=4", "tau=0.35", "delta=1", "learning_rate=0.01"] {
        assert!(help.contains(needle), "--help missing `{needle}`");
    }
}

#[test]
fn train_predict_evaluate_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_tiny(&data);

    let run = dir.path().join("run");
    let mut args = vec!["train", "--dataset", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend_from_slice(TINY);
    ok(&args);
    assert!(run.join("best.pkc").exists());
    assert!(run.join("best.cfg").exists());
    assert!(run.join("config.txt").exists());
    assert!(run.join("trainlog.csv").exists());
    let config = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("learning_rate=0.002"));

    // predict over the dataset's test split, dumping maps
    let dets = dir.path().join("dets.csv");
    let maps = dir.path().join("maps");
    let best = run.join("best.pkc");
    let mut args = vec![
        "predict",
        "--checkpoint",
        best.to_str().unwrap(),
        "--images",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        dets.to_str().unwrap(),
        "--dump-maps",
        maps.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let csv = std::fs::read_to_string(&dets).unwrap();
    assert!(csv.starts_with("image_id,x_image,y_image,confidence"));
    assert!(maps.read_dir().unwrap().count() >= 1);

    // evaluate from the checkpoint; header echoes tau and delta
    let report = dir.path().join("report.csv");
    let mut args = vec![
        "evaluate",
        "--dataset",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--checkpoint",
        best.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let table = ok(&args);
    assert!(table.contains("tau=0.35") && table.contains("delta=1"), "{table}");
    assert!(table.contains("F-Measure"));
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.contains("# tau=0.35"));
    assert!(report_text.contains("group,n_images,mae,rmse,r2,precision,recall,f_measure"));

    // evaluate the same detections from CSV
    let mut args = vec![
        "evaluate",
        "--dataset",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--detections",
        dets.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    ok(&args);

    // render: an all-zero map comes out uniformly black
    let zero_map = dir.path().join("zero.pgm");
    countloc::dataset::write_pgm(&zero_map, 4, 4, &[0u8; 16]).unwrap();
    let black = dir.path().join("black.ppm");
    ok(&["render", "--map", zero_map.to_str().unwrap(), "--out", black.to_str().unwrap()]);
    let rendered = countloc::dataset::read_ppm(&black).unwrap();
    assert!(rendered.data.iter().all(|&b| b == 0), "all-zero map renders black");

    // render detections as red crosses on a sample image
    let sample_img = data.join("images").join("synth_00000.ppm");
    let overlay = dir.path().join("overlay.ppm");
    ok(&[
        "render",
        "--image",
        sample_img.to_str().unwrap(),
        "--detections",
        dets.to_str().unwrap(),
        "--circle-radius",
        "4",
        "--out",
        overlay.to_str().unwrap(),
    ]);
    assert!(overlay.exists());
}

#[test]
fn evaluate_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_tiny(&data);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--dataset", data.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend_from_slice(TINY);
    ok(&args);

    // a 64px dataset cannot go through a 16px-input checkpoint
    let data64 = dir.path().join("data64");
    ok(&["synth", "--out", data64.to_str().unwrap(), "--n", "4", "--size", "64", "--count", "3",
         "--fractions", "0.5,0.25,0.25", "--seed", "2"]);
    let best = run.join("best.pkc");
    let out = countloc(&[
        "evaluate",
        "--dataset",
        data64.to_str().unwrap(),
        "--split",
        "test",
        "--checkpoint",
        best.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("input size") || err.contains("shape"), "{err}");
}
