//! Ground truth, balanced patch sets, and image-level partitions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, extract_patch, GrayImage, Patch, PatchLabel};
use crate::rng;

/// Default side of the square classifier input.
pub const DEFAULT_PATCH_SIDE: usize = 20;

/// Attempts allowed per negative patch before giving up.
pub const NEGATIVE_ATTEMPTS: usize = 10_000;

/// Manually marked particle center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub x: f64,
    pub y: f64,
    pub radius: Option<f64>,
}

impl Annotation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, radius: None }
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }
}

/// Reads `x,y[,radius]` rows. Line numbers in errors are 1-based file lines.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(file, path)
}

pub fn parse_annotations(reader: impl std::io::Read, path: &Path) -> Result<Vec<Annotation>> {
    let csv_err = |line: usize, reason: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(xi), Some(yi)) = (col("x"), col("y")) else {
        return Err(csv_err(1, "header must contain `x` and `y`".into()));
    };
    let ri = col("radius");

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            let field = record
                .get(i)
                .ok_or_else(|| csv_err(line, format!("missing `{name}`")))?;
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| csv_err(line, format!("bad `{name}` value `{field}`")))
        };
        let radius = match ri {
            Some(i) if record.get(i).is_some_and(|f| !f.is_empty()) => Some(num(i, "radius")?),
            _ => None,
        };
        out.push(Annotation {
            x: num(xi, "x")?,
            y: num(yi, "y")?,
            radius,
        });
    }
    Ok(out)
}

/// Writes `x,y,radius` (radius column left empty where unknown).
pub fn save_annotations(annotations: &[Annotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let io = |e: csv::Error| Error::format(path, e.to_string());
    wtr.write_record(["x", "y", "radius"]).map_err(io)?;
    for a in annotations {
        let r = a.radius.map(|r| r.to_string()).unwrap_or_default();
        wtr.write_record([a.x.to_string(), a.y.to_string(), r])
            .map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Flags annotations outside `img`.
pub fn check_bounds(annotations: &[Annotation], img: &GrayImage) -> Result<()> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    match annotations
        .iter()
        .position(|a| !(a.x >= 0.0 && a.y >= 0.0 && a.x <= w - 1.0 && a.y <= h - 1.0))
    {
        Some(i) => Err(Error::InvalidParameter {
            name: "annotations",
            reason: format!(
                "row {} at ({}, {}) lies outside the {}x{} image",
                i + 1,
                annotations[i].x,
                annotations[i].y,
                img.width(),
                img.height()
            ),
        }),
        None => Ok(()),
    }
}

/// Particle iff some annotation lies strictly closer than `threshold`.
pub fn label_patch(center: (f64, f64), annotations: &[Annotation], threshold: f64) -> PatchLabel {
    if nearest_distance(center, annotations) < threshold {
        PatchLabel::Particle
    } else {
        PatchLabel::Background
    }
}

pub fn nearest_distance(center: (f64, f64), annotations: &[Annotation]) -> f64 {
    annotations
        .iter()
        .map(|a| a.distance_to(center.0, center.1))
        .fold(f64::INFINITY, f64::min)
}

/// A micrograph together with its ground truth.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: GrayImage,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedImage {
    /// Half-resized copy with annotation coordinates scaled to match.
    pub fn downscaled_half(&self) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            image: imaging::downscale_half(&self.image)?,
            annotations: self
                .annotations
                .iter()
                .map(|a| Annotation {
                    x: a.x / 2.0,
                    y: a.y / 2.0,
                    radius: a.radius.map(|r| r / 2.0),
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image: usize,
    pub center: (f64, f64),
}

/// Labeled patches with the image each was cut from.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub patches: Vec<Patch>,
    pub provenance: Vec<Provenance>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// `(background, particle)` counts; unlabeled patches are not counted.
    pub fn class_counts(&self) -> (usize, usize) {
        self.patches.iter().fold((0, 0), |(b, p), patch| match patch.label {
            Some(PatchLabel::Background) => (b + 1, p),
            Some(PatchLabel::Particle) => (b, p + 1),
            None => (b, p),
        })
    }

    pub fn push(&mut self, patch: Patch, provenance: Provenance) {
        self.patches.push(patch);
        self.provenance.push(provenance);
    }

    pub fn extend(&mut self, other: LabeledSet) {
        self.patches.extend(other.patches);
        self.provenance.extend(other.provenance);
    }

    /// Keeps `n` patches chosen by a seeded shuffle, preserving class balance when
    /// `n` is even and the set is balanced.
    pub fn subsample_balanced(&self, n: usize, seed: u64) -> LabeledSet {
        let mut rng = rng::seeded(seed);
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, p) in self.patches.iter().enumerate() {
            if let Some(l) = p.label {
                by_class[l.index()].push(i);
            }
        }
        let mut keep = Vec::with_capacity(n);
        for (c, idx) in by_class.iter_mut().enumerate() {
            idx.shuffle(&mut rng);
            let want = if c == 0 { n / 2 } else { n - n / 2 };
            keep.extend(idx.iter().take(want).copied());
        }
        keep.sort_unstable();
        let mut out = LabeledSet::default();
        for i in keep {
            out.push(self.patches[i].clone(), self.provenance[i].clone());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceOptions {
    pub patch_side: usize,
    /// Labeling distance; negatives keep at least this far from every annotation.
    pub label_threshold: f64,
    /// Positives per class; all annotations when `None`.
    pub n_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self {
            patch_side: DEFAULT_PATCH_SIDE,
            label_threshold: DEFAULT_PATCH_SIDE as f64,
            n_per_class: None,
            seed: 0,
        }
    }
}

/// One positive per annotation and as many negatives at uniformly drawn centers.
///
/// Each image contributes as many negatives as it has selected positives.
pub fn build_balanced(images: &[AnnotatedImage], opts: &BalanceOptions) -> Result<LabeledSet> {
    if !(opts.label_threshold > 0.0) {
        return Err(Error::param("label_threshold", "must be positive"));
    }
    if opts.patch_side == 0 {
        return Err(Error::param("patch_side", "must be positive"));
    }
    let mut rng = rng::seeded(opts.seed);

    let mut positives: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| (0..img.annotations.len()).map(move |j| (i, j)))
        .collect();
    if let Some(n) = opts.n_per_class {
        if n > positives.len() {
            return Err(Error::param(
                "n_per_class",
                format!("{n} requested but only {} annotations", positives.len()),
            ));
        }
        positives.shuffle(&mut rng);
        positives.truncate(n);
        positives.sort_unstable();
    }

    let mut set = LabeledSet::default();
    for &(i, j) in &positives {
        let a = images[i].annotations[j];
        let patch = extract_patch(&images[i].image, (a.x, a.y), opts.patch_side)
            .with_label(PatchLabel::Particle);
        set.push(
            patch,
            Provenance {
                image: i,
                center: (a.x, a.y),
            },
        );
    }

    let mut per_image = vec![0usize; images.len()];
    for &(i, _) in &positives {
        per_image[i] += 1;
    }
    for (i, &count) in per_image.iter().enumerate() {
        let img = &images[i];
        for _ in 0..count {
            let center = (0..NEGATIVE_ATTEMPTS)
                .map(|_| {
                    (
                        rng.random_range(0..img.image.width()) as f64,
                        rng.random_range(0..img.image.height()) as f64,
                    )
                })
                .find(|&c| nearest_distance(c, &img.annotations) >= opts.label_threshold)
                .ok_or_else(|| {
                    Error::Placement(format!(
                        "no background patch in image `{}` after {NEGATIVE_ATTEMPTS} attempts",
                        img.id
                    ))
                })?;
            let patch = extract_patch(&img.image, center, opts.patch_side)
                .with_label(PatchLabel::Background);
            set.push(patch, Provenance { image: i, center });
        }
    }
    Ok(set)
}

/// Patches at arbitrary centers, labeled by distance to the annotations.
pub fn labeled_patches_at(
    img: &AnnotatedImage,
    image_index: usize,
    centers: &[(f64, f64)],
    patch_side: usize,
    label_threshold: f64,
) -> LabeledSet {
    let mut set = LabeledSet::default();
    for &c in centers {
        let label = label_patch(c, &img.annotations, label_threshold);
        set.push(
            extract_patch(&img.image, c, patch_side).with_label(label),
            Provenance {
                image: image_index,
                center: c,
            },
        );
    }
    set
}

/// Writes `patch_NNNNN.pgm` files plus `labels.csv` (`file,label,center_x,center_y`).
pub fn save_patch_set(set: &LabeledSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = dir.join("labels.csv");
    let mut wtr =
        csv::Writer::from_path(&labels).map_err(|e| Error::format(&labels, e.to_string()))?;
    let io = |e: csv::Error| Error::format(&labels, e.to_string());
    wtr.write_record(["file", "label", "center_x", "center_y"])
        .map_err(io)?;
    for (i, p) in set.patches.iter().enumerate() {
        let name = format!("patch_{i:05}.pgm");
        imaging::save_image(&p.to_image(), dir.join(&name))?;
        let label = p.label.map_or("", PatchLabel::as_str);
        wtr.write_record([
            name,
            label.to_string(),
            p.center.0.to_string(),
            p.center.1.to_string(),
        ])
        .map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::io(&labels, e))
}

pub fn load_patch_set(dir: impl AsRef<Path>) -> Result<LabeledSet> {
    let dir = dir.as_ref();
    let labels = dir.join("labels.csv");
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&labels)
        .map_err(|e| Error::format(&labels, e.to_string()))?;
    let mut set = LabeledSet::default();
    let mut side = None;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::format(&labels, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |reason: String| Error::Csv {
            path: labels.clone(),
            line,
            reason,
        };
        if record.len() < 4 {
            return Err(bad(format!("expected 4 fields, found {}", record.len())));
        }
        let img = imaging::load_image(dir.join(&record[0]))?;
        if img.width() != img.height() || *side.get_or_insert(img.width()) != img.width() {
            return Err(bad(format!("patch `{}` has inconsistent size", &record[0])));
        }
        let label = match &record[1] {
            "" => None,
            l => Some(l.parse::<PatchLabel>().map_err(bad)?),
        };
        let coord = |i: usize| {
            record[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("bad coordinate `{}`", &record[i])))
        };
        let center = (coord(2)?, coord(3)?);
        let values = img.data().iter().map(|v| v / 255.0).collect();
        let mut patch = Patch::new(img.width(), values, center)?;
        patch.label = label;
        set.push(patch, Provenance { image: 0, center });
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            test: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Image-level train/test split of `n_images` indices.
pub fn split(n_images: usize, fractions: SplitFractions, seed: u64) -> Result<Partition> {
    let SplitFractions { train, test } = fractions;
    if !(train >= 0.0 && test >= 0.0) || ((train + test) - 1.0).abs() > 1e-9 {
        return Err(Error::param(
            "fractions",
            format!("must be non-negative and sum to 1, got {train} + {test}"),
        ));
    }
    let n_train = (n_images as f64 * train).round() as usize;
    if n_images == 0 || (train > 0.0 && n_train == 0) || (test > 0.0 && n_train == n_images) {
        return Err(Error::param(
            "fractions",
            format!("{n_images} images are too few for a {train}/{test} split"),
        ));
    }
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(Partition {
        train: train_idx,
        test: test_idx,
    })
}

/// `k` disjoint folds over `items` whose sizes differ by at most one.
pub fn cv_folds(items: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > items.len() {
        return Err(Error::param(
            "k",
            format!("{k} folds over {} images", items.len()),
        ));
    }
    let mut order = items.to_vec();
    order.shuffle(&mut rng::seeded(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

/// Runs `experiment` with seeds `base_seed, base_seed + 1, …`.
pub fn repetitions<T>(
    n: usize,
    base_seed: u64,
    mut experiment: impl FnMut(u64) -> Result<T>,
) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::param("repetitions", "must be at least 1"));
    }
    (0..n as u64)
        .map(|i| experiment(base_seed.wrapping_add(i)))
        .collect()
}
