//! Image list expansion and loading.

use std::path::{Path, PathBuf};

use fxdetect::io::image::load_image;
use fxdetect::Tensor32;

use crate::{CliError, CliResult};

const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "fxt"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Expands directories to their image files (sorted by name) and keeps
/// explicit files in the order given.
pub fn image_files(args: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for arg in args {
        if arg.is_dir() {
            let entries = std::fs::read_dir(arg).map_err(|e| fxdetect::Error::io(arg, e))?;
            let mut found = Vec::new();
            for entry in entries {
                let path = entry.map_err(|e| fxdetect::Error::io(arg, e))?.path();
                if path.is_file() && is_image(&path) {
                    found.push(path);
                }
            }
            found.sort();
            files.extend(found);
        } else if arg.is_file() {
            files.push(arg.clone());
        } else {
            return Err(CliError::Usage(format!("--images {} does not exist", arg.display())));
        }
    }
    if files.is_empty() {
        return Err(CliError::Usage("--images matched no image files".into()));
    }
    Ok(files)
}

/// Image id: the file name without its extension.
pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_images(files: &[PathBuf]) -> CliResult<Vec<(String, Tensor32)>> {
    let mut seen = std::collections::BTreeSet::new();
    files
        .iter()
        .map(|f| {
            let id = image_id(f);
            if !seen.insert(id.clone()) {
                return Err(CliError::Usage(format!("duplicate image id `{id}` ({})", f.display())));
            }
            Ok((id, load_image(f)?))
        })
        .collect()
}
