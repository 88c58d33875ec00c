use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fxdetect::eval::Subset;
use fxdetect::io::{manifest, text};
use fxdetect::ssd::iou;
use fxdetect::tile::{select_best_plan, ConvGeometry};
use fxdetect::Model32;

fn fxdetect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fxdetect")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fxdetect(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a command expected to fail and returns its single stderr line.
fn fails(args: &[&str]) -> String {
    let out = fxdetect(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "stderr should be one line: {err:?}");
    assert!(err.starts_with("error: "), "{err}");
    err.trim_end().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(seed: u64, count: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("fx");
        ok(&["fixture", "--out", s(&root), "--seed", &seed.to_string(), "--count", &count.to_string()]);
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn model(&self) -> PathBuf {
        self.path("model/model.toml")
    }
}

fn lamr_of(stdout: &str) -> f64 {
    stdout
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("lamr="))
        .expect("lamr field")
        .parse()
        .unwrap()
}

#[test]
fn infer_then_eval_recovers_planted_pedestrians() {
    let fx = Fixture::new(5, 30);
    let dets = fx.path("dets.txt");
    ok(&["infer", "--model", s(&fx.model()), "--images", s(&fx.path("images")), "--out", s(&dets)]);

    let found = text::load_detections(&dets).unwrap();
    let gts = text::load_annotations(&fx.path("annotations.txt")).unwrap();
    let cfg = fxdetect::eval::EvalConfig::new(Subset::Reasonable);
    let (reasonable, _) = fxdetect::eval::filter_groundtruth(gts.iter(), &cfg);
    assert!(!reasonable.is_empty());
    for g in gts.iter().filter(|g| reasonable.contains(&g.bbox())) {
        let best = found
            .get(&g.image_id)
            .into_iter()
            .flatten()
            .map(|d| iou(&d.bbox, &g.bbox()))
            .fold(0.0, f64::max);
        assert!(best >= 0.5, "{g:?} best detection IoU {best}");
    }

    let out = ok(&["eval", "--dets", s(&dets), "--annotations", s(&fx.path("annotations.txt"))]);
    assert!(out.starts_with("subset=reasonable images=30"), "{out}");
    assert!(lamr_of(&out) < 1.0, "{out}");
}

#[test]
fn eval_writes_curve_csv() {
    let fx = Fixture::new(2, 8);
    let dets = fx.path("dets.txt");
    let curve = fx.path("curve.csv");
    ok(&["infer", "--model", s(&fx.model()), "--images", s(&fx.path("images")), "--out", s(&dets)]);
    let out = ok(&[
        "eval",
        "--dets",
        s(&dets),
        "--annotations",
        s(&fx.path("annotations.txt")),
        "--subset",
        "overall",
        "--iou",
        "0.5",
        "--out",
        s(&curve),
    ]);
    assert!(out.starts_with("subset=overall"), "{out}");
    let csv = std::fs::read_to_string(&curve).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("threshold,fppi,miss_rate"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert!(!rows.is_empty());
    assert!(rows.windows(2).all(|w| w[0][1] <= w[1][1] && w[0][2] >= w[1][2]));
}

#[test]
fn plan_table_matches_planner() {
    let fx = Fixture::new(0, 1);
    let csv_path = fx.path("plan.csv");
    let table = ok(&[
        "plan",
        "--model",
        s(&fx.model()),
        "--platform",
        s(&fx.path("platform.toml")),
        "--out",
        s(&csv_path),
    ]);
    let model: Model32 = manifest::load_model(&fx.model()).unwrap();
    let platform = text::load_platform(&fx.path("platform.toml")).unwrap();
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let sites = model.conv_sites().unwrap();
    assert_eq!(rows.len(), sites.len());
    for (row, site) in rows.iter().zip(&sites) {
        let name = site.name;
        let g = ConvGeometry::new(&site.spec, site.input).unwrap();
        let best = select_best_plan(&g, &platform, name).unwrap();
        assert_eq!(row[0], name);
        let tiles: Vec<usize> = row[3..7].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(tiles, [best.plan.tm, best.plan.tn, best.plan.tr, best.plan.tc]);
        assert_eq!(row[7].parse::<u64>().unwrap(), best.footprint.total());
        assert_eq!(row[8].parse::<u64>().unwrap(), best.traffic.total());
        assert!(table.contains(name));
    }
    assert!(table.lines().last().unwrap().starts_with("total latency"));
}

#[test]
fn calibrate_quantize_infer_closed_pipeline() {
    let fx = Fixture::new(9, 12);
    let report = fx.path("calib.toml");
    let qmodel = fx.path("quant/model.toml");
    ok(&[
        "calibrate",
        "--model",
        s(&fx.model()),
        "--images",
        s(&fx.path("calibration")),
        "--count",
        "10",
        "--out",
        s(&report),
    ]);
    let rep = fxdetect::quant::CalibrationReport::from_toml(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.samples, 10);
    assert_eq!(rep.width, Some(16));
    ok(&["quantize", "--model", s(&fx.model()), "--report", s(&report), "--out", s(&qmodel)]);
    let q: Model32 = manifest::load_model(&qmodel).unwrap();
    assert_eq!(q.mode, fxdetect::nn::Mode::Fixed);

    let float_dets = fx.path("float.txt");
    let fixed_dets = fx.path("fixed.txt");
    let images = fx.path("images");
    ok(&["infer", "--model", s(&fx.model()), "--images", s(&images), "--out", s(&float_dets)]);
    ok(&["infer", "--model", s(&qmodel), "--images", s(&images), "--out", s(&fixed_dets)]);
    let ann = fx.path("annotations.txt");
    for subset in ["reasonable", "overall"] {
        let f = lamr_of(&ok(&["eval", "--dets", s(&float_dets), "--annotations", s(&ann), "--subset", subset]));
        let q = lamr_of(&ok(&["eval", "--dets", s(&fixed_dets), "--annotations", s(&ann), "--subset", subset]));
        assert!((f - q).abs() <= 0.5, "{subset}: float {f} fixed {q}");
    }
    // the quantized manifest is itself a valid model input
    let priors = ok(&["priors", "--model", s(&qmodel)]);
    assert_eq!(priors, ok(&["priors", "--model", s(&fx.model())]));
}

#[test]
fn priors_dump_has_one_row_per_prior() {
    let fx = Fixture::new(0, 1);
    let out = ok(&["priors", "--model", s(&fx.model())]);
    let model: Model32 = manifest::load_model(&fx.model()).unwrap();
    let head = model.head.as_ref().unwrap();
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), head.prior_count());
    let first: Vec<f64> = rows[0].split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert!((first[2] / first[3] * head.image_width as f64 / head.image_height as f64 - 0.41).abs() < 1e-9);
}

#[test]
fn outputs_are_deterministic() {
    let a = Fixture::new(13, 4);
    let b = Fixture::new(13, 4);
    for rel in ["annotations.txt", "images/img0002.pgm", "model/model.toml", "platform.toml"] {
        assert_eq!(std::fs::read(a.path(rel)).unwrap(), std::fs::read(b.path(rel)).unwrap(), "{rel}");
    }
    let run = |fx: &Fixture| ok(&["infer", "--model", s(&fx.model()), "--images", s(&fx.path("images"))]);
    assert_eq!(run(&a), run(&b));
}

#[test]
fn infer_keeps_explicit_image_order() {
    let fx = Fixture::new(21, 3);
    let (i0, i2) = (fx.path("images/img0000.pgm"), fx.path("images/img0002.pgm"));
    let out = ok(&[
        "infer",
        "--model",
        s(&fx.model()),
        "--images",
        s(&i2),
        s(&i0),
        "--score-thresh",
        "0.05",
        "--top-k",
        "2",
    ]);
    let ids: Vec<&str> = out.lines().map(|l| l.split(' ').next().unwrap()).collect();
    assert!(ids.len() <= 4);
    let first_0 = ids.iter().position(|&i| i == "img0000");
    let last_2 = ids.iter().rposition(|&i| i == "img0002");
    if let (Some(a), Some(b)) = (first_0, last_2) {
        assert!(b < a, "{ids:?}");
    }
}

#[test]
fn errors_are_single_machine_readable_lines() {
    let fx = Fixture::new(1, 2);
    let err = fails(&["infer", "--images", s(&fx.path("images"))]);
    assert_eq!(err, "error: usage: `infer` needs --model");
    let err = fails(&["infer", "--width", "64", "--model", "m"]);
    assert!(err.starts_with("error: usage:"), "{err}");
    let err = fails(&["eval", "--dets", "missing.txt", "--annotations", "a.txt"]);
    assert!(err.contains("missing.txt"), "{err}");
    let err = fails(&["plan", "--model", s(&fx.model())]);
    assert!(err.contains("--platform"), "{err}");

    let blob = fx.path("model/head.weights.fxt");
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&blob, bytes).unwrap();
    let err = fails(&["priors", "--model", s(&fx.model())]);
    assert!(err.starts_with("error: checksum:") && err.contains("head.weights.fxt"), "{err}");
}

#[test]
fn failed_runs_leave_no_output() {
    let fx = Fixture::new(4, 3);
    let out = fx.path("narrow.toml");
    let err = fails(&[
        "calibrate",
        "--model",
        s(&fx.model()),
        "--images",
        s(&fx.path("calibration")),
        "--width",
        "3",
        "--out",
        s(&out),
    ]);
    assert!(err.starts_with("error: range-overflow:"), "{err}");
    assert!(!out.exists());
    let leftovers: Vec<_> = std::fs::read_dir(&fx.root).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(leftovers.iter().all(|n| !n.to_string_lossy().contains("narrow")), "{leftovers:?}");

    let bad = fx.path("bad.txt");
    std::fs::write(&bad, "img0000 1 2 3\n").unwrap();
    let err = fails(&["eval", "--dets", s(&bad), "--annotations", s(&fx.path("annotations.txt"))]);
    assert!(err.starts_with("error: parse:") && err.contains(":1:"), "{err}");
}
