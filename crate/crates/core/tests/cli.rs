use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use condlane::backbone::Variant;
use condlane::cli::{render_overlay, RunManifest};
use condlane::data::{DatasetManifest, SceneConfig};
use condlane::geometry::{GridSpec, ImageSpec, LanePolyline, Point, ProposalPeak};
use condlane::pipeline::{Detection, ImageDetections, ModelConfig, RunConfig, StepRecord};
use condlane::viz::PALETTE;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condlane"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn image() -> ImageSpec {
    ImageSpec::new(64, 160).unwrap()
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut RunConfig)) -> String {
    let mut cfg = RunConfig::new(ModelConfig::compact(Variant::Small, image()));
    cfg.data = SceneConfig {
        image: image(),
        lane_count: [2, 3],
        line_thickness: 2.0,
        ..SceneConfig::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.epochs = 0;
    edit(&mut cfg);
    let p = dir.join(name);
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn init_config_round_trips() {
    let out = ok(&["init-config", "--compact", "--height", "64", "--width", "160"]);
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.model, ModelConfig::compact(Variant::Small, image()));
    assert!(!run(&["init-config", "--height", "65"]).status.success());
}

#[test]
fn gen_data_counts_digests_and_refusals() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", |_| {});

    let empty = tmp.path().join("empty");
    ok(&["gen-data", "--config", &cfg, "--out", &s(&empty), "--count", "0"]);
    let m = DatasetManifest::read(&empty).unwrap();
    assert!(m.entries.is_empty());

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = ok(&["gen-data", "--config", &cfg, "--out", &s(&a), "--count", "6"]);
    let ob = ok(&["gen-data", "--config", &cfg, "--out", &s(&b), "--count", "6"]);
    assert_eq!(oa.stdout, ob.stdout);
    assert_eq!(
        DatasetManifest::read(&a).unwrap().digest().unwrap(),
        DatasetManifest::read(&b).unwrap().digest().unwrap()
    );
    assert_eq!(fs::read(a.join("images/000003.png")).unwrap(), fs::read(b.join("images/000003.png")).unwrap());

    let refused = run(&["gen-data", "--config", &cfg, "--out", &s(&a), "--count", "2"]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    ok(&["gen-data", "--config", &cfg, "--out", &s(&a), "--count", "2", "--force"]);
    assert_eq!(DatasetManifest::read(&a).unwrap().entries.len(), 2);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 2);
}

#[test]
fn category_histogram_matches_recount() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", |c| c.data.fork_probability = 0.5);
    let dir = tmp.path().join("d");
    let out = ok(&["gen-data", "--config", &cfg, "--out", &s(&dir), "--count", "64"]);
    let log = String::from_utf8_lossy(&out.stderr);

    let m = DatasetManifest::read(&dir).unwrap();
    assert_eq!(m.entries.len(), 64);
    let mut recount = BTreeMap::new();
    for e in &m.entries {
        assert!(dir.join(&e.image).exists() && dir.join(&e.annotation).exists());
        *recount.entry(e.category).or_insert(0usize) += 1;
    }
    assert_eq!(recount, m.category_histogram);
    assert!(m.category_histogram.values().sum::<usize>() == 64);
    let forks = m.category_histogram.iter().find(|(c, _)| c.as_str() == "fork").map_or(0, |(_, n)| *n);
    assert!(forks > 16 && forks < 48, "{forks} forks");
    for (c, n) in &m.category_histogram {
        assert!(log.contains(&format!("{c:?}: {n}")), "{c:?} missing from log: {log}");
    }
}

#[test]
fn train_resume_eval_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    let cfg0 = write_config(t, "e0.toml", |_| {});
    ok(&["gen-data", "--config", &cfg0, "--out", &s(&data), "--count", "4"]);

    // epochs = 0: only the initial checkpoint
    let run0 = t.join("run0");
    ok(&["train", "--config", &cfg0, "--data", &s(&data), "--out", &s(&run0)]);
    let m = RunManifest::read(&run0).unwrap();
    assert_eq!(m.checkpoints, vec!["checkpoints/epoch_0000.json".to_string()]);
    assert!(m.history.is_empty());
    assert!(!run(&["train", "--config", &cfg0, "--data", &s(&data), "--out", &s(&run0)]).status.success());

    let cfg2 = write_config(t, "e2.toml", |c| c.train.epochs = 2);
    let cfg3 = write_config(t, "e3.toml", |c| c.train.epochs = 3);
    let run1 = t.join("run1");
    ok(&["train", "--config", &cfg2, "--data", &s(&data), "--out", &s(&run1)]);
    let ckpt = run1.join("checkpoints/epoch_0002.json");
    ok(&["train", "--config", &cfg3, "--data", &s(&data), "--out", &s(&run1), "--resume", &s(&ckpt)]);
    let steps: Vec<u64> = fs::read_to_string(run1.join("loss.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<StepRecord>(l).unwrap().step)
        .collect();
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
    let m = RunManifest::read(&run1).unwrap();
    assert_eq!(m.history.len(), 3);
    assert!(m.checkpoints.contains(&"checkpoints/epoch_0003.json".to_string()));

    // labels scored against themselves
    let ev = t.join("eval");
    let out = ok(&["eval", "--labels-as-predictions", "--data", &s(&data), "--out", &s(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"accuracy\":1.0"));
    let rows: Vec<serde_json::Value> = fs::read_to_string(ev.join("report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let total = rows.iter().find(|r| r["category"] == "total").unwrap();
    assert_eq!(total["f1"], 1.0);
    for k in ["tp", "fp", "fn"] {
        let sum: u64 = rows.iter().filter(|r| r["category"] != "total").map(|r| r[k].as_u64().unwrap()).sum();
        assert_eq!(sum, total[k].as_u64().unwrap(), "{k}");
    }
    let ts: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("tusimple.json")).unwrap()).unwrap();
    assert_eq!(ts["accuracy"], 1.0);

    // model eval runs end to end
    ok(&["eval", "--checkpoint", &s(&ckpt), "--data", &s(&data), "--out", &s(&t.join("eval2"))]);

    // nothing above threshold: untouched copy plus the count label
    let inf = t.join("infer");
    let input = data.join("images/000000.png");
    let missing = t.join("missing.png");
    let out = ok(&[
        "infer", "--checkpoint", &s(&ckpt), "--out", &s(&inf), "--threshold", "1.01", &s(&input), &s(&missing),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("(0 lanes)"));
    let a = image::open(&input).unwrap().to_rgb8();
    let b = image::open(inf.join("0000_000000.png")).unwrap().to_rgb8();
    assert_eq!(a.dimensions(), b.dimensions());
    let changed: Vec<_> = a
        .enumerate_pixels()
        .filter(|(x, y, p)| b.get_pixel(*x, *y) != *p)
        .map(|(x, y, _)| (x, y))
        .collect();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|&(x, y)| x < 40 && y < 12), "pixels outside the label changed");
    assert!(!run(&["infer", "--checkpoint", &s(&ckpt), "--out", &s(&inf), &s(&missing)]).status.success());
}

#[test]
fn overlay_colours_cycle_through_the_palette() {
    let img = ImageSpec::new(64, 160).unwrap();
    let grid = GridSpec::at_downscale(img, 16).unwrap();
    let n = 10;
    let lanes = (0..n)
        .map(|k| Detection {
            lane: LanePolyline::new(vec![
                Point::new(10.0 + 14.0 * k as f64, 60.0),
                Point::new(10.0 + 14.0 * k as f64, 20.0),
            ])
            .unwrap(),
            score: 0.9,
            cell: (0, 3),
            step: 0,
        })
        .collect();
    let det = ImageDetections {
        peaks: vec![ProposalPeak { x: 0, y: 3, score: 0.9 }],
        steps: vec![n],
        lanes,
    };
    let out = render_overlay(&image::RgbImage::new(160, 64), &det, &img, &grid);
    for k in 0..n {
        let p = out.get_pixel(10 + 14 * k as u32, 40).0;
        assert_eq!(p, PALETTE[k % PALETTE.len()], "lane {k}");
    }
    let first: std::collections::HashSet<_> = (0..PALETTE.len()).map(|k| out.get_pixel(10 + 14 * k as u32, 40).0).collect();
    assert_eq!(first.len(), PALETTE.len());
}
