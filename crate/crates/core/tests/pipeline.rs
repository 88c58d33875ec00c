use std::collections::BTreeMap;

use fxdetect::eval::{evaluate, EvalConfig, Subset};
use fxdetect::fixture::{write_fixture, CALIBRATION_SEED_OFFSET};
use fxdetect::io::image::load_image;
use fxdetect::io::{manifest, text};
use fxdetect::nn::Mode;
use fxdetect::quant::{allocate_qformats, detect_all, extract_dynamic_range, quantize_model};
use fxdetect::ssd::DetectParams;
use fxdetect::tile::plan_model;
use fxdetect::{fixture, Model32, Tensor32};

fn load_dir(dir: &std::path::Path) -> Vec<(String, Tensor32)> {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .iter()
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), load_image(p).unwrap()))
        .collect()
}

#[test]
fn files_on_disk_reproduce_the_in_memory_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 31, 12).unwrap();

    let model: Model32 = manifest::load_model(&dir.path().join("model/model.toml")).unwrap();
    assert_eq!(model, fixture::fixture_model::<f32>());
    let images = load_dir(&dir.path().join("images"));
    let memory = fixture::generate_dataset::<f32>(31, 12);
    assert_eq!(images, memory.pairs());
    let calib = load_dir(&dir.path().join("calibration"));
    assert_eq!(calib.len(), 12);
    assert_eq!(
        calib[0].1,
        fixture::generate_dataset::<f32>(31u64.wrapping_add(CALIBRATION_SEED_OFFSET), 1).images[0].tensor
    );
    let gts = text::load_annotations(&dir.path().join("annotations.txt")).unwrap();
    assert_eq!(gts, memory.annotations);
    let platform = text::load_platform(&dir.path().join("platform.toml")).unwrap();
    assert_eq!(platform, fixture::example_platform());
    assert_eq!(plan_model(&model, &platform).unwrap().layers.len(), 2);

    let tensors: Vec<_> = calib.into_iter().map(|(_, t)| t).collect();
    let report = allocate_qformats(&model, &extract_dynamic_range(&model, &tensors).unwrap(), 16).unwrap();
    let quant = quantize_model(&model, &report).unwrap();
    let qpath = dir.path().join("q/model.toml");
    std::fs::create_dir_all(qpath.parent().unwrap()).unwrap();
    manifest::save_model(&quant, &qpath).unwrap();
    let reloaded: Model32 = manifest::load_model(&qpath).unwrap();
    assert_eq!(reloaded, quant);
    assert_eq!(reloaded.mode, Mode::Fixed);

    let params = DetectParams::default();
    let fixed = detect_all(&reloaded, &images, &params).unwrap();
    assert_eq!(fixed, detect_all(&quant, &images, &params).unwrap());

    // detections survive their text format exactly
    let body = text::format_detections(fixed.iter().map(|(k, v)| (k.as_str(), v.as_slice())));
    let parsed = text::parse_detections(&body, "dets").unwrap();
    let nonempty: BTreeMap<_, _> = fixed.into_iter().filter(|(_, v)| !v.is_empty()).collect();
    assert_eq!(parsed, nonempty);

    let float = detect_all(&model, &images, &params).unwrap();
    for subset in [Subset::Reasonable, Subset::Overall] {
        let cfg = EvalConfig::new(subset);
        let a = evaluate(&float, &gts, &cfg).unwrap().lamr;
        let b = evaluate(&parsed, &gts, &cfg).unwrap().lamr;
        assert!((a - b).abs() <= 0.5, "{subset}: {a} vs {b}");
    }
}
