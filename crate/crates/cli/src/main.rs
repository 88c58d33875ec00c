//! `fxdetect` command-line front end.
//!
//! Every subcommand either succeeds with exit status 0 or prints a single
//! `error: <kind>: <message>` line to stderr and exits nonzero. Output files
//! are written to a temporary sibling and renamed into place.

mod inputs;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fxdetect::eval::{evaluate, EvalConfig, Subset};
use fxdetect::io::{atomic_write, manifest, text};
use fxdetect::quant::{allocate_qformats, detect_all, extract_dynamic_range, quantize_model, CalibrationReport};
use fxdetect::ssd::{generate_priors, DetectParams};
use fxdetect::tile::{plan_model, ModelPlan};
use fxdetect::{fixture, Model32};

#[derive(Parser, Debug)]
#[command(name = "fxdetect", version, about = "Fixed-point SSD pedestrian detection toolchain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by all subcommands; each subcommand reads the ones it needs.
#[derive(Args, Debug)]
struct Common {
    /// Model manifest (`model.toml`).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output file, or directory for `fixture`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fixed-point word length in bits.
    #[arg(long, global = true, default_value_t = 16, value_parser = clap::value_parser!(u32).range(2..=32))]
    width: u32,
    /// Minimum pedestrian score kept by detection.
    #[arg(long, global = true, default_value_t = 0.01, value_parser = unit_interval)]
    score_thresh: f64,
    /// IoU above which NMS suppresses a lower-scoring box.
    #[arg(long, global = true, default_value_t = 0.45, value_parser = unit_interval)]
    nms_thresh: f64,
    /// IoU required to match a detection to an annotation.
    #[arg(long, global = true, default_value_t = 0.5, value_parser = positive_unit)]
    iou: f64,
    /// Evaluation subset.
    #[arg(long, global = true, default_value = "reasonable")]
    subset: Subset,
    /// Platform description (TOML).
    #[arg(long, global = true)]
    platform: Option<PathBuf>,
    /// Seed for the synthetic fixture.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump the model's prior boxes as CSV.
    Priors,
    /// Record dynamic ranges over calibration images and allocate Q formats.
    Calibrate {
        /// Image files or directories of `.pgm`, `.ppm` and `.fxt` files.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        /// Use at most this many images.
        #[arg(long, default_value_t = fxdetect::quant::DEFAULT_CALIBRATION_IMAGES, value_parser = at_least_one)]
        count: usize,
    },
    /// Convert a real-valued model into a fixed-point one.
    Quantize {
        /// Calibration report written by `calibrate`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the detector and write a detection file.
    Infer {
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        /// Detections kept per image after NMS.
        #[arg(long, default_value_t = fxdetect::ssd::DEFAULT_TOP_K, value_parser = at_least_one)]
        top_k: usize,
    },
    /// Choose a tiling for every convolution on the given platform.
    Plan,
    /// Log-average miss rate of a detection file against annotations.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Write the seeded synthetic model, images and annotations.
    Fixture {
        /// Images in the test and calibration sets.
        #[arg(long, default_value_t = 100, value_parser = at_least_one)]
        count: usize,
    },
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive_unit(s: &str) -> Result<f64, String> {
    match unit_interval(s)? {
        v if v > 0.0 => Ok(v),
        _ => Err("must be greater than 0".into()),
    }
}

fn at_least_one(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("`{s}` is not a positive integer")),
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(fxdetect::Error),
}

impl From<fxdetect::Error> for CliError {
    fn from(e: fxdetect::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn line(&self) -> String {
        match self {
            CliError::Usage(msg) => format!("usage: {msg}"),
            CliError::Core(e) => format!("{}: {e}", e.kind()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{command}` needs --{flag}")))
}

fn existing<'a>(path: &'a Path, flag: &str) -> CliResult<&'a Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("--{flag} {} does not exist", path.display())))
    }
}

fn load_model(common: &Common, command: &str) -> CliResult<Model32> {
    let path = existing(required(&common.model, "model", command)?, "model")?;
    Ok(manifest::load_model(path)?)
}

/// Writes to `--out` when given, else prints to stdout.
fn emit(out: Option<&Path>, body: &str) -> CliResult<()> {
    match out {
        Some(path) => Ok(atomic_write(path, body.as_bytes())?),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn detect_params(common: &Common, top_k: usize) -> DetectParams {
    DetectParams {
        score_threshold: common.score_thresh,
        nms_threshold: common.nms_thresh,
        top_k,
    }
}

fn priors_csv(model: &Model32) -> CliResult<String> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| fxdetect::Error::Manifest("model has no detection head".into()))?;
    let boxes = generate_priors::<f64>(head);
    let mut out = String::from("index,tap,cx,cy,w,h\n");
    let taps = head.taps.iter().flat_map(|t| std::iter::repeat_n(t.name.as_str(), t.count()));
    for (i, (tap, b)) in taps.zip(&boxes).enumerate() {
        writeln!(out, "{i},{tap},{},{},{},{}", b.cx, b.cy, b.w, b.h).unwrap();
    }
    Ok(out)
}

fn plan_rows(plan: &ModelPlan) -> Vec<[String; 13]> {
    plan.layers
        .iter()
        .map(|l| {
            let g = &l.geometry;
            let c = &l.choice;
            [
                l.name.clone(),
                format!("{}x{}x{}x{}", g.m, g.n, g.r, g.c),
                format!("{}/{}", g.k, g.s),
                c.plan.tm.to_string(),
                c.plan.tn.to_string(),
                c.plan.tr.to_string(),
                c.plan.tc.to_string(),
                c.footprint.total().to_string(),
                c.traffic.total().to_string(),
                format!("{:.4}", c.estimate.ctc_ratio),
                format!("{:.4}", c.estimate.attainable / 1e9),
                if c.estimate.is_bandwidth_bound() { "memory" } else { "compute" }.to_string(),
                format!("{:.6e}", l.latency_s),
            ]
        })
        .collect()
}

const PLAN_HEADER: [&str; 13] = [
    "layer",
    "MxNxRxC",
    "K/S",
    "Tm",
    "Tn",
    "Tr",
    "Tc",
    "buffer_bytes",
    "traffic_bytes",
    "ctc",
    "attainable_gops",
    "bound",
    "latency_s",
];

fn plan_table(rows: &[[String; 13]], total_latency: f64) -> String {
    let mut widths = PLAN_HEADER.map(str::len);
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let padded: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
    };
    line(&mut PLAN_HEADER.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    writeln!(out, "total latency {total_latency:.6e} s").unwrap();
    out
}

fn plan_csv(rows: &[[String; 13]]) -> String {
    let mut out = PLAN_HEADER.join(",") + "\n";
    for row in rows {
        out += &row.join(",");
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    match cli.command {
        Command::Priors => {
            let model = load_model(common, "priors")?;
            emit(common.out.as_deref(), &priors_csv(&model)?)
        }
        Command::Calibrate { images, count } => {
            let out = required(&common.out, "out", "calibrate")?;
            let files = inputs::image_files(&images)?;
            let model = load_model(common, "calibrate")?;
            let tensors: Vec<_> = inputs::load_images(&files[..files.len().min(count)])?
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            let report = extract_dynamic_range(&model, &tensors)?;
            let report = allocate_qformats(&model, &report, common.width)?;
            Ok(atomic_write(out, report.to_toml()?.as_bytes())?)
        }
        Command::Quantize { report } => {
            let out = required(&common.out, "out", "quantize")?;
            let report_path = existing(&report, "report")?;
            let model = load_model(common, "quantize")?;
            let report = CalibrationReport::from_toml(&fxdetect::io::read_text(report_path)?)?;
            let report = allocate_qformats(&model, &report, common.width)?;
            let quantized = quantize_model(&model, &report)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| fxdetect::Error::io(dir, e))?;
            }
            Ok(manifest::save_model(&quantized, out)?)
        }
        Command::Infer { images, top_k } => {
            let files = inputs::image_files(&images)?;
            let model = load_model(common, "infer")?;
            let loaded = inputs::load_images(&files)?;
            let mut dets = detect_all(&model, &loaded, &detect_params(common, top_k))?;
            let ordered: Vec<(String, Vec<_>)> = loaded
                .iter()
                .map(|(id, _)| (id.clone(), dets.remove(id).unwrap_or_default()))
                .collect();
            let body = text::format_detections(ordered.iter().map(|(id, d)| (id.as_str(), d.as_slice())));
            emit(common.out.as_deref(), &body)
        }
        Command::Plan => {
            let platform_path = existing(required(&common.platform, "platform", "plan")?, "platform")?;
            let model = load_model(common, "plan")?;
            let platform = text::load_platform(platform_path)?;
            let plan = plan_model(&model, &platform)?;
            let rows = plan_rows(&plan);
            print!("{}", plan_table(&rows, plan.latency_s));
            match &common.out {
                Some(out) => Ok(atomic_write(out, plan_csv(&rows).as_bytes())?),
                None => Ok(()),
            }
        }
        Command::Eval { dets, annotations } => {
            let dets: BTreeMap<_, _> = text::load_detections(existing(&dets, "dets")?)?;
            let gts = text::load_annotations(existing(&annotations, "annotations")?)?;
            let report = evaluate(&dets, &gts, &EvalConfig::new(common.subset).with_iou(common.iou))?;
            println!(
                "subset={} images={} evaluated={} lamr={:.6}",
                report.subset, report.images, report.evaluated_gt, report.lamr
            );
            let mut curve = String::from("threshold,fppi,miss_rate\n");
            for p in &report.curve {
                writeln!(curve, "{},{},{}", p.threshold, p.fppi, p.miss_rate).unwrap();
            }
            match &common.out {
                Some(out) => Ok(atomic_write(out, curve.as_bytes())?),
                None => Ok(()),
            }
        }
        Command::Fixture { count } => {
            let out = required(&common.out, "out", "fixture")?;
            Ok(fixture::write_fixture(out, common.seed, count)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.line().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
