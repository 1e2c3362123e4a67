//! Seeded synthetic image classes.
//!
//! Each class owns a smooth template built from two octaves of periodic
//! value noise. Samples circularly shift the template, add Gaussian noise and
//! clamp to `[0, 1]`. Every template and sample draws from its own ChaCha8
//! stream keyed by `(seed, tag, class, index)`, so generation order never
//! matters. Pixels are rounded to `f32` so files round-trip exactly.

mod file;
mod stream;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use file::{read_dataset, write_dataset, DATA_MAGIC, DATA_VERSION};
pub use stream::{split_stream, TaskStream};

const TAG_TEMPLATE: u64 = 0x5445_4d50;
const TAG_TRAIN: u64 = 0x5452_4149;
const TAG_TEST: u64 = 0x5445_5354;

/// Low-resolution lattices mixed into each template, `(cells per side, weight)`.
const OCTAVES: [(usize, f64); 2] = [(4, 0.7), (8, 0.3)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub max_shift: usize,
    pub seed: u64,
    /// Template id of class 0; separates class universes sharing a seed.
    pub class_offset: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 40,
            train_per_class: 100,
            test_per_class: 50,
            image_size: 32,
            channels: 1,
            noise_sigma: 0.25,
            max_shift: 2,
            seed: 0,
            class_offset: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
    /// Read back from a file, which does not record the split.
    Unspecified,
}

/// Labelled images, channel-major `C×H×W` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub labels: Vec<usize>,
    pub pixels: Vec<f64>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Bitwise equality of geometry, labels and pixels; the split tag is ignored.
    pub fn bits_eq(&self, other: &Dataset) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.n_classes == other.n_classes
            && self.labels == other.labels
            && self.pixels.len() == other.pixels.len()
            && self.pixels.iter().zip(&other.pixels).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("class count, image size and channels must be positive".into()));
        }
        if self.n_classes > u16::MAX as usize || self.image_size > u16::MAX as usize {
            return Err(Error::Config("class count and image size must fit in 16 bits".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if 2 * self.max_shift >= self.image_size {
            return Err(Error::Config(format!(
                "max shift {} must be below half the image size {}",
                self.max_shift, self.image_size
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one `(seed, tag, a, b)` coordinate.
fn substream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed ^ tag).wrapping_add(a)).wrapping_add(b));
    ChaCha8Rng::seed_from_u64(key)
}

/// Periodic bilinear upsampling of a `cells × cells` lattice to `size × size`.
fn upsample(lattice: &[f64], cells: usize, size: usize) -> Vec<f64> {
    let step = size as f64 / cells as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f64 + 0.5) / step - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        let y0 = (y0 as isize).rem_euclid(cells as isize) as usize;
        let y1 = (y0 + 1) % cells;
        for x in 0..size {
            let fx = (x as f64 + 0.5) / step - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let x0 = (x0 as isize).rem_euclid(cells as isize) as usize;
            let x1 = (x0 + 1) % cells;
            let at = |r: usize, c: usize| lattice[r * cells + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Template of global class id `id`, values in `[0.15, 0.85]` at `f32` precision.
pub fn template(spec: &SynthSpec, id: usize) -> Vec<f64> {
    let mut rng = substream(spec.seed, TAG_TEMPLATE, id as u64, 0);
    let s = spec.image_size;
    let mut out = vec![0.0; spec.pixels()];
    for ch in out.chunks_mut(s * s) {
        for &(cells, weight) in &OCTAVES {
            let cells = cells.min(s);
            let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
            for (o, v) in ch.iter_mut().zip(upsample(&lattice, cells, s)) {
                *o += weight * v;
            }
        }
    }
    out.iter().map(|v| ((0.15 + 0.7 * v) as f32) as f64).collect()
}

/// Templates of the spec's classes in label order.
pub fn templates(spec: &SynthSpec) -> Vec<Vec<f64>> {
    (0..spec.n_classes).map(|c| template(spec, spec.class_offset + c)).collect()
}

/// Circular shift of every channel by `(dy, dx)`.
pub fn circular_shift(img: &[f64], channels: usize, size: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..channels {
        let base = ch * size * size;
        for y in 0..size {
            let sy = (y as isize - dy).rem_euclid(size as isize) as usize;
            for x in 0..size {
                let sx = (x as isize - dx).rem_euclid(size as isize) as usize;
                out[base + y * size + x] = img[base + sy * size + sx];
            }
        }
    }
    out
}

fn sample(spec: &SynthSpec, tmpl: &[f64], tag: u64, class_id: usize, index: usize) -> Vec<f64> {
    let mut rng = substream(spec.seed, tag, class_id as u64, index as u64);
    let m = spec.max_shift as i64;
    let dy = rng.random_range(-m..=m) as isize;
    let dx = rng.random_range(-m..=m) as isize;
    let shifted = circular_shift(tmpl, spec.channels, spec.image_size, dy, dx);
    shifted
        .into_iter()
        .map(|v| {
            let n: f64 = rng.sample(StandardNormal);
            ((v + spec.noise_sigma * n).clamp(0.0, 1.0) as f32) as f64
        })
        .collect()
}

/// One split of the spec's classes, ordered class by class.
pub fn generate(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let (tag, per_class) = match split {
        Split::Train => (TAG_TRAIN, spec.train_per_class),
        Split::Test => (TAG_TEST, spec.test_per_class),
        Split::Unspecified => return Err(Error::Config("generate needs a train or test split".into())),
    };
    if per_class == 0 {
        return Err(Error::Config("samples per class must be positive".into()));
    }
    let mut labels = Vec::with_capacity(spec.n_classes * per_class);
    let mut pixels = Vec::with_capacity(spec.n_classes * per_class * spec.pixels());
    for (c, tmpl) in templates(spec).iter().enumerate() {
        let id = spec.class_offset + c;
        for i in 0..per_class {
            labels.push(c);
            pixels.extend(sample(spec, tmpl, tag, id, i));
        }
    }
    Ok(Dataset {
        height: spec.image_size,
        width: spec.image_size,
        channels: spec.channels,
        n_classes: spec.n_classes,
        labels,
        pixels,
        split,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Label of the closest template in Euclidean distance.
pub fn nearest_template(templates: &[Vec<f64>], img: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, t) in templates.iter().enumerate() {
        let d = sq_dist(t, img);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Worst pairwise template margin relative to the intra-class spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separability {
    /// Smallest pairwise template distance.
    pub min_distance: f64,
    /// Over all pairs, the smallest ratio of template distance to the
    /// intra-class spread along the line joining the two templates.
    pub min_ratio: f64,
}

impl Separability {
    pub fn passes(&self, factor: f64) -> bool {
        self.min_ratio > factor
    }
}

/// Compares template distances with the within-class spread projected on
/// each pair's separating direction (shift jitter plus noise). The spread of
/// a full noise vector grows with the pixel count and says nothing about
/// confusability, hence the projection.
pub fn separability(spec: &SynthSpec) -> Result<Separability> {
    spec.validate()?;
    let tmpls = templates(spec);
    let m = spec.max_shift as isize;
    let shifts: Vec<(isize, isize)> = (-m..=m).flat_map(|y| (-m..=m).map(move |x| (y, x))).collect();
    let shifted: Vec<Vec<Vec<f64>>> = tmpls
        .iter()
        .map(|t| {
            shifts
                .iter()
                .map(|&(dy, dx)| circular_shift(t, spec.channels, spec.image_size, dy, dx))
                .collect()
        })
        .collect();
    let mut min_distance = f64::INFINITY;
    let mut min_ratio = f64::INFINITY;
    for a in 0..tmpls.len() {
        for b in a + 1..tmpls.len() {
            let diff: Vec<f64> = tmpls[a].iter().zip(&tmpls[b]).map(|(x, y)| x - y).collect();
            let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            min_distance = min_distance.min(dist);
            if dist == 0.0 {
                min_ratio = 0.0;
                continue;
            }
            let mut worst = 0.0f64;
            for (c, t) in [(a, &tmpls[a]), (b, &tmpls[b])] {
                let var = shifted[c]
                    .iter()
                    .map(|s| {
                        let proj: f64 =
                            s.iter().zip(t.iter()).zip(&diff).map(|((p, q), u)| (p - q) * u).sum();
                        (proj / dist).powi(2)
                    })
                    .sum::<f64>()
                    / shifts.len() as f64;
                worst = worst.max(var);
            }
            let spread = (worst + spec.noise_sigma.powi(2)).sqrt();
            min_ratio = min_ratio.min(dist / spread);
        }
    }
    Ok(Separability {
        min_distance,
        min_ratio,
    })
}

/// Generates a split and warns when the templates are poorly separated.
pub fn generate_checked(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    let sep = separability(spec)?;
    if !sep.passes(4.0) {
        log::warn!(
            "templates poorly separated: min distance/spread ratio {:.2} below 4",
            sep.min_ratio
        );
    }
    generate(spec, split)
}
