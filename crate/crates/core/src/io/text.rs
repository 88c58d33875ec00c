//! Line-oriented text formats.
//!
//! * detections: `image_id x1 y1 x2 y2 score`
//! * annotations: `image_id label x1 y1 x2 y2 occlusion`
//!
//! Coordinates are pixels. Blank lines and lines starting with `#` are
//! skipped. Platform descriptions are TOML with the fields of
//! [`PlatformBudget`].

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{GroundTruthBox, Label};
use crate::ssd::{BoundingBox, Detection};
use crate::tile::PlatformBudget;

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

fn field(name: &str, line: usize, raw: &str, what: &str) -> Result<f64> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            path: name.to_string(),
            line,
            detail: format!("bad {what} `{raw}`"),
        })
}

fn arity(name: &str, line: usize, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Parse {
            path: name.to_string(),
            line,
            detail: format!("expected {want} fields, found {got}"),
        })
    }
}

/// Detections grouped by image, in file order within each image.
pub fn parse_detections(text: &str, name: &str) -> Result<BTreeMap<String, Vec<Detection<f64>>>> {
    let mut out: BTreeMap<String, Vec<Detection<f64>>> = BTreeMap::new();
    for (line, f) in records(text) {
        arity(name, line, f.len(), 6)?;
        let v = |i: usize, what: &str| field(name, line, f[i], what);
        let (x1, y1, x2, y2) = (v(1, "x1")?, v(2, "y1")?, v(3, "x2")?, v(4, "y2")?);
        if x2 < x1 || y2 < y1 {
            return Err(Error::Parse {
                path: name.to_string(),
                line,
                detail: "box corners are reversed".into(),
            });
        }
        out.entry(f[0].to_string()).or_default().push(Detection {
            bbox: BoundingBox::from_corners(x1, y1, x2, y2),
            score: v(5, "score")?,
        });
    }
    Ok(out)
}

/// One line per detection, images in the given order.
pub fn format_detections<'a>(images: impl IntoIterator<Item = (&'a str, &'a [Detection<f64>])>) -> String {
    let mut out = String::new();
    for (id, dets) in images {
        for d in dets {
            let [x1, y1, x2, y2] = d.bbox.corners();
            writeln!(out, "{id} {x1} {y1} {x2} {y2} {}", d.score).unwrap();
        }
    }
    out
}

pub fn parse_annotations(text: &str, name: &str) -> Result<Vec<GroundTruthBox>> {
    records(text)
        .map(|(line, f)| {
            arity(name, line, f.len(), 7)?;
            let v = |i: usize, what: &str| field(name, line, f[i], what);
            let label: Label = f[1].parse().map_err(|detail| Error::Parse {
                path: name.to_string(),
                line,
                detail,
            })?;
            GroundTruthBox::new(
                f[0],
                label,
                [v(2, "x1")?, v(3, "y1")?, v(4, "x2")?, v(5, "y2")?],
                v(6, "occlusion")?,
            )
            .map_err(|e| Error::Parse {
                path: name.to_string(),
                line,
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn format_annotations(gts: &[GroundTruthBox]) -> String {
    let mut out = String::new();
    for g in gts {
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            g.image_id, g.label, g.x1, g.y1, g.x2, g.y2, g.occlusion
        )
        .unwrap();
    }
    out
}

pub fn parse_platform(text: &str, name: &str) -> Result<PlatformBudget> {
    let p: PlatformBudget = toml::from_str(text).map_err(|e| Error::Parse {
        path: name.to_string(),
        line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
        detail: e.message().to_string(),
    })?;
    p.validate()?;
    Ok(p)
}

pub fn format_platform(p: &PlatformBudget) -> String {
    toml::to_string(p).expect("platform budget serializes")
}

pub fn load_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection<f64>>>> {
    parse_detections(&super::read_text(path)?, &path.display().to_string())
}

pub fn load_annotations(path: &Path) -> Result<Vec<GroundTruthBox>> {
    parse_annotations(&super::read_text(path)?, &path.display().to_string())
}

pub fn load_platform(path: &Path) -> Result<PlatformBudget> {
    parse_platform(&super::read_text(path)?, &path.display().to_string())
}
