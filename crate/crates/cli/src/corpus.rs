//! Image corpora on disk: `<id>.pgm` files with optional `<id>.csv` annotations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use goldspot::dataset::{self, AnnotatedImage};
use goldspot::imaging;

/// PGM files named by `inputs`, directories expanded to their `.pgm` entries in name order.
pub fn image_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("cannot list `{}`", input.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()
                .with_context(|| format!("cannot list `{}`", input.display()))?;
            found.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")));
            found.sort();
            if found.is_empty() {
                bail!("no .pgm images in `{}`", input.display());
            }
            out.extend(found);
        } else if input.exists() {
            out.push(input.clone());
        } else {
            bail!("input `{}` does not exist", input.display());
        }
    }
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

pub fn annotation_path(image: &Path) -> PathBuf {
    image.with_extension("csv")
}

/// Every image of `dir` with the annotations stored beside it.
pub fn load_annotated(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    image_paths(&[dir.to_path_buf()])?
        .iter()
        .map(|path| {
            let image = imaging::load_image(path)?;
            let csv = annotation_path(path);
            if !csv.exists() {
                bail!("missing annotations `{}` for image `{}`", csv.display(), path.display());
            }
            let annotations = dataset::load_annotations(&csv)?;
            dataset::check_bounds(&annotations, &image)?;
            Ok(AnnotatedImage {
                id: stem(path),
                image,
                annotations,
            })
        })
        .collect()
}
