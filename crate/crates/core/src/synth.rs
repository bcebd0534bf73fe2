//! Synthetic micrographs with known particle positions.
//!
//! Particles are dark anti-aliased disks on a bright background with additive
//! Gaussian noise. Optional distractors (rings, bars and oversized blobs) are
//! dark too, each within 30% of the particle contrast, but never appear in the
//! annotations, so they act as the clutter a detector has to reject.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::rng::{self, Rng};

/// Rejection-sampling attempts allowed per placed object.
pub const PLACEMENT_ATTEMPTS: usize = 10_000;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub n_particles: usize,
    pub particle_radius: f64,
    pub particle_intensity: f64,
    pub background_intensity: f64,
    pub noise_sigma: f64,
    pub n_distractors: usize,
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            n_particles: 50,
            particle_radius: 4.0,
            particle_intensity: 30.0,
            background_intensity: 180.0,
            noise_sigma: 10.0,
            n_distractors: 0,
            min_separation: 16.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Same spec with particle size and spacing scaled for a new radius.
    pub fn with_radius(mut self, radius: f64) -> Self {
        self.min_separation *= radius / self.particle_radius;
        self.particle_radius = radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("width/height", "must be at least 1"));
        }
        if !(self.particle_radius >= 2.0) {
            return Err(Error::param("particle_radius", "must be at least 2 pixels"));
        }
        for (name, v) in [
            ("particle_intensity", self.particle_intensity),
            ("background_intensity", self.background_intensity),
        ] {
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::param(name, format!("{v} outside [0, 255]")));
            }
        }
        if !(self.particle_intensity < self.background_intensity) {
            return Err(Error::param(
                "particle_intensity",
                "particles must be darker than the background",
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::param("noise_sigma", "must be non-negative"));
        }
        if !(self.min_separation >= 2.0 * self.particle_radius) {
            return Err(Error::param(
                "min_separation",
                format!(
                    "{} is below twice the particle radius {}",
                    self.min_separation, self.particle_radius
                ),
            ));
        }
        let margin = self.particle_radius + 1.0;
        if self.n_particles > 0
            && (self.width as f64 <= 2.0 * margin || self.height as f64 <= 2.0 * margin)
        {
            return Err(Error::param("width/height", "image too small for a particle"));
        }
        Ok(())
    }
}

/// Clutter shapes, rendered near particle intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distractor {
    Ring {
        x: f64,
        y: f64,
        inner: f64,
        outer: f64,
    },
    Bar {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        half_width: f64,
    },
    Blob {
        x: f64,
        y: f64,
        radius: f64,
    },
}

impl Distractor {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Distractor::Ring { x, y, inner, outer } => {
                let d = (px - x).hypot(py - y);
                d >= inner && d <= outer
            }
            Distractor::Bar {
                x0,
                y0,
                x1,
                y1,
                half_width,
            } => segment_distance(px, py, x0, y0, x1, y1) <= half_width,
            Distractor::Blob { x, y, radius } => (px - x).hypot(py - y) <= radius,
        }
    }

    /// Distance from a point to the closest pixel the shape may cover.
    fn clearance(&self, px: f64, py: f64) -> f64 {
        match *self {
            Distractor::Ring { x, y, outer, .. } => (px - x).hypot(py - y) - outer,
            Distractor::Bar {
                x0,
                y0,
                x1,
                y1,
                half_width,
            } => segment_distance(px, py, x0, y0, x1, y1) - half_width,
            Distractor::Blob { x, y, radius } => (px - x).hypot(py - y) - radius,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Distractor::Ring { x, y, outer, .. } => (x - outer, y - outer, x + outer, y + outer),
            Distractor::Bar {
                x0,
                y0,
                x1,
                y1,
                half_width,
            } => (
                x0.min(x1) - half_width,
                y0.min(y1) - half_width,
                x0.max(x1) + half_width,
                y0.max(y1) + half_width,
            ),
            Distractor::Blob { x, y, radius } => (x - radius, y - radius, x + radius, y + radius),
        }
    }
}

fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - (x0 + u * dx)).hypot(py - (y0 + u * dy))
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: GrayImage,
    pub annotations: Vec<Annotation>,
    pub distractors: Vec<Distractor>,
}

/// Renders one image; identical specs give bit-identical output.
pub fn generate(spec: &SynthSpec) -> Result<(GrayImage, Vec<Annotation>)> {
    generate_full(spec).map(|s| (s.image, s.annotations))
}

pub fn generate_full(spec: &SynthSpec) -> Result<SynthImage> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let r = spec.particle_radius;

    let centers = place_particles(spec, &mut rng)?;
    let distractors = place_distractors(spec, &centers, &mut rng)?;

    let (w, h) = (spec.width, spec.height);
    let mut canvas = vec![spec.background_intensity; w * h];
    for &(cx, cy) in &centers {
        let disk = Distractor::Blob {
            x: cx,
            y: cy,
            radius: r,
        };
        paint(&mut canvas, w, h, &disk, spec.particle_intensity);
    }
    // Darker clutter out-responds the particles, so no threshold alone removes it.
    let spread = 0.3 * (spec.background_intensity - spec.particle_intensity);
    for d in &distractors {
        let tone = spec.particle_intensity + spread * rng.random_range(-1.0..=1.0);
        paint(&mut canvas, w, h, d, tone.clamp(0.0, 255.0));
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::param("noise_sigma", e.to_string()))?;
        for v in canvas.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in canvas.iter_mut() {
        *v = v.clamp(0.0, 255.0).round();
    }

    Ok(SynthImage {
        image: GrayImage::new(w, h, canvas)?,
        annotations: centers
            .into_iter()
            .map(|(x, y)| Annotation {
                x,
                y,
                radius: Some(r),
            })
            .collect(),
        distractors,
    })
}

fn place_particles(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<(f64, f64)>> {
    let margin = spec.particle_radius + 1.0;
    let (xmax, ymax) = (spec.width as f64 - 1.0 - margin, spec.height as f64 - 1.0 - margin);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(spec.n_particles);
    for i in 0..spec.n_particles {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let c = (rng.random_range(margin..=xmax), rng.random_range(margin..=ymax));
            centers
                .iter()
                .all(|p| (p.0 - c.0).hypot(p.1 - c.1) >= spec.min_separation)
                .then_some(c)
        });
        match placed {
            Some(c) => centers.push(c),
            None => {
                return Err(Error::Placement(format!(
                    "particle {} of {} did not fit after {PLACEMENT_ATTEMPTS} attempts",
                    i + 1,
                    spec.n_particles
                )))
            }
        }
    }
    Ok(centers)
}

fn place_distractors(
    spec: &SynthSpec,
    particles: &[(f64, f64)],
    rng: &mut Rng,
) -> Result<Vec<Distractor>> {
    let r = spec.particle_radius;
    // Keep clutter at least a particle diameter clear of every annotated disk.
    let clearance = 3.0 * r;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut out = Vec::with_capacity(spec.n_distractors);
    for i in 0..spec.n_distractors {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let d = random_distractor(rng, r, w, h);
            particles
                .iter()
                .all(|&(px, py)| d.clearance(px, py) >= clearance)
                .then_some(d)
        });
        match placed {
            Some(d) => out.push(d),
            None => {
                return Err(Error::Placement(format!(
                    "distractor {} of {} did not fit after {PLACEMENT_ATTEMPTS} attempts",
                    i + 1,
                    spec.n_distractors
                )))
            }
        }
    }
    Ok(out)
}

fn random_distractor(rng: &mut Rng, r: f64, w: f64, h: f64) -> Distractor {
    let x = rng.random_range(0.0..w);
    let y = rng.random_range(0.0..h);
    match rng.random_range(0..3u8) {
        0 => {
            let outer = rng.random_range(2.0 * r..3.0 * r);
            let thickness = rng.random_range(1.5..(0.5 * r).max(2.0));
            Distractor::Ring {
                x,
                y,
                inner: outer - thickness,
                outer,
            }
        }
        1 => {
            let len = rng.random_range(6.0 * r..12.0 * r);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (0.5 * len * angle.cos(), 0.5 * len * angle.sin());
            Distractor::Bar {
                x0: x - dx,
                y0: y - dy,
                x1: x + dx,
                y1: y + dy,
                half_width: rng.random_range(0.5 * r..r),
            }
        }
        _ => Distractor::Blob {
            x,
            y,
            radius: rng.random_range(1.5 * r..3.0 * r),
        },
    }
}

/// Composites `shape` over the canvas using supersampled pixel coverage.
fn paint(canvas: &mut [f64], w: usize, h: usize, shape: &Distractor, intensity: f64) {
    let (x0, y0, x1, y1) = shape.bounds();
    let xs = (x0.floor().max(0.0) as usize)..=(x1.ceil().min(w as f64 - 1.0).max(0.0) as usize);
    let ys = (y0.floor().max(0.0) as usize)..=(y1.ceil().min(h as f64 - 1.0).max(0.0) as usize);
    let n = SUPERSAMPLE as f64;
    for py in ys {
        for px in xs.clone() {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let fx = px as f64 - 0.5 + (sx as f64 + 0.5) / n;
                    let fy = py as f64 - 0.5 + (sy as f64 + 0.5) / n;
                    hits += usize::from(shape.contains(fx, fy));
                }
            }
            if hits > 0 {
                let coverage = hits as f64 / (n * n);
                let v = &mut canvas[py * w + px];
                *v += (intensity - *v) * coverage;
            }
        }
    }
}
