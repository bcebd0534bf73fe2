//! Grayscale images, binary PGM I/O, half-resizing and patch extraction.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grid of reals with no range restriction.
///
/// Filter responses and scaled images live here; [`GrayImage`] is the
/// range-checked 0..=255 variant that comes off disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value at `(x, y)` with coordinates clamped into the grid.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[cy * self.width + cx]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// 8-bit grayscale micrograph held as reals in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    plane: Plane,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=255.0).contains(*v))
        {
            return Err(Error::InvalidImage(format!(
                "intensity {v} at index {i} outside [0, 255]"
            )));
        }
        Ok(Self {
            plane: Plane::new(width, height, data)?,
        })
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b)).collect())
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.plane.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.plane.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.plane.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.plane.get(x, y)
    }

    #[inline]
    pub fn as_plane(&self) -> &Plane {
        &self.plane
    }

    /// Intensities rounded to the nearest byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.plane
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Reads a binary PGM (`P5`) with maxval at most 255. Stored values are kept as-is.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Writes a binary PGM (`P5`, maxval 255).
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        file.write_all(&encode_pgm(img))?;
        file.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let magic = header_token(bytes, &mut pos).ok_or("missing magic number")?;
    if magic != b"P5" {
        return Err(format!(
            "unsupported magic {:?}, expected P5",
            String::from_utf8_lossy(magic)
        ));
    }
    let mut field = |name: &str| -> std::result::Result<usize, String> {
        let tok = header_token(bytes, &mut pos).ok_or(format!("truncated header: missing {name}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or(format!("malformed header: bad {name}"))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("malformed header: zero dimension {width}x{height}"));
    }
    if maxval == 0 {
        return Err("malformed header: maxval 0".into());
    }
    if maxval > 255 {
        return Err(format!("unsupported bit depth (maxval {maxval})"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("malformed header: no separator before raster".into()),
    }
    let n = width
        .checked_mul(height)
        .ok_or("malformed header: dimensions overflow")?;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or(format!("truncated raster: expected {n} bytes, found {}", bytes.len() - pos))?;
    if let Some(v) = raster.iter().find(|&&v| usize::from(v) > maxval) {
        return Err(format!("sample {v} exceeds maxval {maxval}"));
    }
    GrayImage::from_bytes(width, height, raster).map_err(|e| e.to_string())
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Halves both dimensions with a 2×2 box mean, rounding half-up.
///
/// Odd trailing rows/columns are dropped.
pub fn downscale_half(img: &GrayImage) -> Result<GrayImage> {
    if img.width() < 2 || img.height() < 2 {
        return Err(Error::InvalidImage(format!(
            "cannot halve a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (img.width() / 2, img.height() / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let sum = img.get(2 * x, 2 * y)
                + img.get(2 * x + 1, 2 * y)
                + img.get(2 * x, 2 * y + 1)
                + img.get(2 * x + 1, 2 * y + 1);
            data.push((sum / 4.0 + 0.5).floor());
        }
    }
    GrayImage::new(w, h, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLabel {
    Background,
    Particle,
}

impl PatchLabel {
    /// Class index used by the classifier output layer.
    pub fn index(self) -> usize {
        match self {
            PatchLabel::Background => 0,
            PatchLabel::Particle => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            PatchLabel::Particle
        } else {
            PatchLabel::Background
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatchLabel::Background => "background",
            PatchLabel::Particle => "particle",
        }
    }
}

impl std::str::FromStr for PatchLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "particle" | "1" => Ok(PatchLabel::Particle),
            "background" | "0" => Ok(PatchLabel::Background),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// Square window of normalized intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub values: Vec<f64>,
    pub center: (f64, f64),
    pub label: Option<PatchLabel>,
}

impl Patch {
    pub fn new(side: usize, values: Vec<f64>, center: (f64, f64)) -> Result<Self> {
        if side == 0 || values.len() != side * side {
            return Err(Error::DimensionMismatch(format!(
                "patch side {side} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage("patch values outside [0, 1]".into()));
        }
        Ok(Self {
            side,
            values,
            center,
            label: None,
        })
    }

    pub fn with_label(mut self, label: PatchLabel) -> Self {
        self.label = Some(label);
        self
    }

    /// Back to an 8-bit image for persistence.
    pub fn to_image(&self) -> GrayImage {
        let data = self.values.iter().map(|v| (v * 255.0).round()).collect();
        GrayImage::new(self.side, self.side, data).expect("patch values are in [0, 1]")
    }
}

/// Crops a `side`×`side` window whose index `side / 2` sits on the rounded center.
///
/// Pixels beyond the border replicate the nearest edge pixel.
pub fn extract_patch(img: &GrayImage, center: (f64, f64), side: usize) -> Patch {
    let cx = center.0.round() as isize;
    let cy = center.1.round() as isize;
    let half = (side / 2) as isize;
    let plane = img.as_plane();
    let mut values = Vec::with_capacity(side * side);
    for dy in 0..side as isize {
        for dx in 0..side as isize {
            values.push(plane.get_clamped(cx - half + dx, cy - half + dy) / 255.0);
        }
    }
    Patch {
        side,
        values,
        center,
        label: None,
    }
}
