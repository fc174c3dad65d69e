use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bginet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bginet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bginet(args);
    assert!(
        out.status.success(),
        "bginet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count()
}

#[test]
fn synth_writes_split_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&["synth", "--seed", "3", "--out", s(&out), "--train", "5", "--val", "2", "--test", "1", "--size", "32"]);
    for (split, n) in [("train", 5), ("val", 2), ("test", 1)] {
        for sub in ["A", "B", "label"] {
            assert_eq!(pngs(&out.join(split).join(sub)), n, "{split}/{sub}");
        }
    }
    let again = tmp.path().join("again");
    ok(&["synth", "--seed", "3", "--out", s(&again), "--train", "5", "--val", "2", "--test", "1", "--size", "32"]);
    let f = "train/A/synth_00004.png";
    assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
}

#[test]
fn tile_cuts_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--train", "3", "--val", "0", "--test", "0", "--size", "64"]);
    let tiles = tmp.path().join("tiles");
    let stdout = ok(&["tile", "--input", s(&data.join("train")), "--out", s(&tiles), "--size", "32"]);
    assert!(stdout.contains("12 tiles from 3 images"), "{stdout}");
    assert_eq!(pngs(&tiles.join("label")), 12);
    assert!(tiles.join("A/synth_00000_1_1.png").exists());
    assert!(!bginet(&["tile", "--input", s(&data.join("train")), "--out", s(&tiles), "--size", "128"]).status.success());
}

#[test]
fn render_diff_colors() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred.png");
    let gt = tmp.path().join("gt.png");
    image::GrayImage::from_raw(2, 2, vec![255, 255, 0, 0]).unwrap().save(&pred).unwrap();
    image::GrayImage::from_raw(2, 2, vec![255, 0, 255, 0]).unwrap().save(&gt).unwrap();
    let out = tmp.path().join("diff.png");
    ok(&["render-diff", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&out)]);
    let img = image::open(&out).unwrap().to_rgb8();
    assert_eq!(img.into_raw(), vec![255, 255, 0, 255, 0, 0, 0, 0, 255, 0, 0, 0]);
}

#[test]
fn params_reports_default_count() {
    let stdout = ok(&["params"]);
    let n: usize = stdout
        .lines()
        .find_map(|l| l.strip_prefix("params = "))
        .expect("params line")
        .parse()
        .unwrap();
    assert!((2_600_000..=3_300_000).contains(&n), "{n}");
    assert!(stdout.contains("reference_m = 2.88"));
}

#[test]
fn config_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "lr = 0.001\nlearning_rate = 0.1\n").unwrap();
    let out = bginet(&["params", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = bginet(&["train", "--config", s(&tmp.path().join("missing.cfg"))]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--seed", "1", "--out", s(&data), "--train", "8", "--val", "4", "--test", "4", "--size", "32"]);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("train.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny model\nstage_channels = 8,8,16,16\noutput_stride = 8\nvertices = 4\n\
             total_epochs = 2\nbatch_size = 4\nseed = 5\ndata_dir = {}\nout_dir = {}\n",
            data.display(),
            run.display()
        ),
    )
    .unwrap();
    let stdout = ok(&["train", "--config", s(&cfg), "--set", "lr=0.001"]);
    assert!(stdout.contains("best val f1"), "{stdout}");
    for f in ["best.ckpt", "last.ckpt", "history.json", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("lr = 0.001"));

    let ckpt = run.join("best.ckpt");
    let dump = tmp.path().join("dump");
    let text = ok(&["eval", "--ckpt", s(&ckpt), "--split", "test", "--dump", s(&dump)]);
    assert!(text.contains("f1 = "), "{text}");
    assert_eq!(fs::read_to_string(run.join("test_metrics.txt")).unwrap(), text);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("test_metrics.json")).unwrap()).unwrap();
    assert_eq!(json["tiles"], 4);
    assert_eq!(json["split"], "test");
    assert!(dump.join("synth_00012_map.png").exists());
    assert!(dump.join("synth_00012_prob.npy").exists());

    let a = data.join("test/A/synth_00012.png");
    let b = data.join("test/B/synth_00012.png");
    let out = tmp.path().join("pred.png");
    ok(&["predict", "--ckpt", s(&ckpt), "--a", s(&a), "--b", s(&b), "--out", s(&out)]);
    let first = fs::read(&out).unwrap();
    assert_eq!(image::image_dimensions(&out).unwrap(), (32, 32));
    assert!(out.with_extension("npy").exists());
    assert_eq!(first, fs::read(dump.join("synth_00012_pred.png")).unwrap());
    ok(&["predict", "--ckpt", s(&ckpt), "--a", s(&a), "--b", s(&b), "--out", s(&out)]);
    assert_eq!(first, fs::read(&out).unwrap());
}
