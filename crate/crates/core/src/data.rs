//! Datasets and input encoding: the CIFAR binary and IDX formats, a
//! synthetic CIFAR-format image set, Gaussian blobs and a synthetic
//! keyword text task.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{stream, Image, Payload, Sample, Target};
use crate::diffcore::{Normalization, Real};
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Number of classes; `None` for a regression task.
    pub classes: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Input shape of the first sample's encoding, given a text vocabulary.
    pub fn input_shape(&self, vocab: usize) -> Result<Vec<usize>> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        Ok(match &first.payload {
            Payload::Image(img) => img.shape.to_vec(),
            Payload::Text { .. } => vec![vocab],
            Payload::Vector { features } => vec![features.len()],
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Decodes CIFAR-10 binary records: a label byte then the R, G and B
/// planes, each 32×32 row-major. Pixels are scaled to `[0, 1]`.
pub fn decode_cifar(bytes: &[u8], id_prefix: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "CIFAR file size {} is not a multiple of {}",
            bytes.len(),
            CIFAR_RECORD
        )));
    }
    let mut samples = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!("record {}: label {} > 9", i, rec[0])));
        }
        let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(Sample {
            id: format!("{}{}", id_prefix, i),
            payload: Payload::Image(Image {
                shape: CIFAR_SHAPE,
                data,
            }),
            label: Target::Class(rec[0] as usize),
        });
    }
    Ok(Dataset {
        samples,
        classes: Some(10),
    })
}

pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cifar");
    decode_cifar(&read(path)?, &format!("{}-", stem))
}

/// Encodes 3×32×32 images with class labels in `0..=9`; pixels are rounded
/// to the nearest of 256 levels.
pub fn encode_cifar(records: &[(u8, Image)]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for (label, img) in records {
        if *label > 9 || img.shape != CIFAR_SHAPE {
            return Err(Error::Dataset(format!(
                "cannot encode label {} with shape {:?}",
                label, img.shape
            )));
        }
        out.push(*label);
        out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar_binary(path: &Path, records: &[(u8, Image)]) -> Result<()> {
    std::fs::write(path, encode_cifar(records)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

const SYN_NOISE: f64 = 0.05;
const SYN_JITTER: f64 = 1.5;
const SYN_TINT: f64 = 0.1;
const SYN_SHIFT: f64 = 4.0;

/// A CIFAR-format stand-in: ten classes, each a fixed arrangement of three
/// colored Gaussian blobs. A sample moves each blob of its class template a
/// little, tints its colors, translates the whole by up to four pixels,
/// mirrors it with probability one half, overlays two random distractor
/// blobs, scales the contrast and adds pixel noise, so crop and flip are
/// label-preserving.
pub fn synthetic_cifar(n: usize, seed: u64, split: &str) -> Vec<(u8, Image)> {
    struct Blob {
        cy: f64,
        cx: f64,
        radius: f64,
        color: [f64; 3],
    }
    let mut trng = stream(seed, "templates", 0, "synthetic-cifar");
    let templates: Vec<Vec<Blob>> = (0..10)
        .map(|_| {
            (0..3)
                .map(|_| Blob {
                    cy: trng.random_range(6.0..26.0),
                    cx: trng.random_range(6.0..26.0),
                    radius: trng.random_range(3.0..7.0),
                    color: [trng.random(), trng.random(), trng.random()],
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, SYN_NOISE).expect("valid sigma");
    let random_blob = |rng: &mut ChaCha8Rng| Blob {
        cy: rng.random_range(4.0..28.0),
        cx: rng.random_range(4.0..28.0),
        radius: rng.random_range(3.0..7.0),
        color: [rng.random(), rng.random(), rng.random()],
    };
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, split, i as u64, "synthetic-cifar");
            let label = rng.random_range(0..10u8);
            let dy = rng.random_range(-SYN_SHIFT..=SYN_SHIFT);
            let dx = rng.random_range(-SYN_SHIFT..=SYN_SHIFT);
            let flip = rng.random_bool(0.5);
            let contrast = rng.random_range(0.6..1.0);
            let background: f64 = rng.random_range(0.2..0.5);
            let mut blobs: Vec<Blob> = templates[label as usize]
                .iter()
                .map(|b| Blob {
                    cy: b.cy + rng.random_range(-SYN_JITTER..=SYN_JITTER),
                    cx: b.cx + rng.random_range(-SYN_JITTER..=SYN_JITTER),
                    radius: b.radius * rng.random_range(0.8..1.2),
                    color: b
                        .color
                        .map(|c| (c + rng.random_range(-SYN_TINT..=SYN_TINT)).clamp(0.0, 1.0)),
                })
                .collect();
            blobs.push(random_blob(&mut rng));
            blobs.push(random_blob(&mut rng));
            let mut data = vec![0f32; 3 * 32 * 32];
            for y in 0..32 {
                for x in 0..32 {
                    let xs = if flip { 31 - x } else { x } as f64;
                    let mut px = [background; 3];
                    for b in &blobs {
                        let d2 = (y as f64 - b.cy - dy).powi(2) + (xs - b.cx - dx).powi(2);
                        let a = (-d2 / (2.0 * b.radius * b.radius)).exp();
                        for (p, c) in px.iter_mut().zip(b.color) {
                            *p = *p * (1.0 - a) + c * a;
                        }
                    }
                    for (c, p) in px.iter().enumerate() {
                        let v = 0.5 + contrast * (p - 0.5) + noise.sample(&mut rng);
                        data[(c * 32 + y) * 32 + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            (
                label,
                Image {
                    shape: CIFAR_SHAPE,
                    data,
                },
            )
        })
        .collect()
}

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset("IDX header truncated".into()))
}

/// IDX unsigned-byte label file.
pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Dataset(format!("bad IDX label magic {:#010x}", magic)));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Dataset(format!(
            "IDX labels: header says {}, found {}",
            n,
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// IDX unsigned-byte image file; each image becomes `[1, rows, cols]`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Dataset(format!("bad IDX image magic {:#010x}", magic)));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Dataset(format!(
            "IDX images: expected {} bytes, found {}",
            n * rows * cols,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact((rows * cols).max(1))
        .take(n)
        .map(|px| Image {
            shape: [1, rows, cols],
            data: px.iter().map(|&b| b as f32 / 255.0).collect(),
        })
        .collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = decode_idx_images(&read(images)?)?;
    let labels = decode_idx_labels(&read(labels)?)?;
    if imgs.len() != labels.len() {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            imgs.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let stem = images.file_stem().and_then(|s| s.to_str()).unwrap_or("idx");
    let samples = imgs
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (img, l))| Sample {
            id: format!("{}-{}", stem, i),
            payload: Payload::Image(img),
            label: Target::Class(l as usize),
        })
        .collect();
    Ok(Dataset {
        samples,
        classes: Some(classes),
    })
}

/// Isotropic unit-variance Gaussian clusters. Class means sit on a circle
/// in the first two coordinates (a line when `dim == 1`) with neighboring
/// means six standard deviations apart.
pub fn make_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(Error::Dataset("blobs need at least one class and one dimension".into()));
    }
    let gap = 6.0;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim == 1 || classes <= 2 {
                m[0] = gap * (c as f64 - (classes - 1) as f64 / 2.0);
            } else {
                let radius = gap / (2.0 * (PI / classes as f64).sin());
                let angle = 2.0 * PI * c as f64 / classes as f64;
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let samples = (0..n)
        .map(|i| {
            let id = format!("blob-{}", i);
            let mut rng = stream(seed, &id, 0, "blobs");
            let c = rng.random_range(0..classes);
            let features = means[c].iter().map(|&m| (m + unit.sample(&mut rng)) as f32).collect();
            Sample {
                id,
                payload: Payload::Vector { features },
                label: Target::Class(c),
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        classes: Some(classes),
    })
}

/// Layout of the synthetic keyword text task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextTask {
    pub classes: usize,
    pub fillers: usize,
    pub keywords_per_class: usize,
    pub length: usize,
}

impl Default for TextTask {
    fn default() -> Self {
        TextTask {
            classes: 2,
            fillers: 24,
            keywords_per_class: 6,
            length: 12,
        }
    }
}

impl TextTask {
    pub fn vocab(&self) -> usize {
        self.fillers + self.classes * self.keywords_per_class
    }

    fn keyword(&self, class: usize, k: usize) -> u32 {
        (self.fillers + class * self.keywords_per_class + k) as u32
    }

    /// The class whose keywords occur most often, ties to the lower class.
    pub fn keyword_class(&self, tokens: &[u32]) -> usize {
        let mut counts = vec![0usize; self.classes];
        for &t in tokens {
            let t = t as usize;
            if t >= self.fillers && t < self.vocab() {
                counts[(t - self.fillers) / self.keywords_per_class] += 1;
            }
        }
        let best = counts.iter().copied().max().unwrap_or(0);
        counts.iter().position(|&c| c == best).unwrap_or(0)
    }

    /// Sentences of frequency-skewed filler tokens with keywords of the
    /// labeled class mixed in and occasional keywords of other classes.
    pub fn generate(&self, n: usize, seed: u64, split: &str) -> Result<Dataset> {
        if self.classes == 0 || self.fillers == 0 || self.keywords_per_class == 0 || self.length == 0 {
            return Err(Error::Dataset(format!("degenerate text task {:?}", self)));
        }
        let samples = (0..n)
            .map(|i| {
                let id = format!("{}-{}", split, i);
                let mut rng = stream(seed, &id, 0, "text");
                let c = rng.random_range(0..self.classes);
                let tokens: Vec<u32> = (0..self.length)
                    .map(|pos| {
                        let u: f64 = rng.random();
                        if pos == 0 || u < 0.25 {
                            self.keyword(c, rng.random_range(0..self.keywords_per_class))
                        } else if u < 0.3 && self.classes > 1 {
                            let other = (c + rng.random_range(1..self.classes)) % self.classes;
                            self.keyword(other, rng.random_range(0..self.keywords_per_class))
                        } else {
                            let r: f64 = rng.random();
                            ((r * r) * self.fillers as f64) as u32
                        }
                    })
                    .collect();
                let label = self.keyword_class(&tokens);
                Sample {
                    id,
                    payload: Payload::Text { tokens },
                    label: Target::Class(label),
                }
            })
            .collect();
        Ok(Dataset {
            samples,
            classes: Some(self.classes),
        })
    }
}

/// Per-channel (images) or per-feature (vectors) mean and standard
/// deviation. Text inputs are not standardized.
pub fn compute_normalization(samples: &[Sample]) -> Option<Normalization> {
    let first = samples.first()?;
    let (groups, width) = match &first.payload {
        Payload::Image(img) => (img.shape[0], img.shape[1] * img.shape[2]),
        Payload::Vector { features } => (features.len(), 1),
        Payload::Text { .. } => return None,
    };
    let mut sum = vec![0.0f64; groups];
    let mut sq = vec![0.0f64; groups];
    let mut count = 0usize;
    for s in samples {
        let values: &[f32] = match &s.payload {
            Payload::Image(img) => &img.data,
            Payload::Vector { features } => features,
            Payload::Text { .. } => continue,
        };
        if values.len() != groups * width {
            continue;
        }
        for (g, chunk) in values.chunks_exact(width).enumerate() {
            for &v in chunk {
                sum[g] += v as f64;
                sq[g] += (v as f64) * (v as f64);
            }
        }
        count += width;
    }
    if count == 0 {
        return None;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / count as f64 - m * m).max(0.0).sqrt()).max(1e-6))
        .collect();
    Some(Normalization { mean, std })
}

/// Turns payloads into model input rows. Images and vectors are
/// standardized when a normalization is present; text becomes a
/// term-frequency vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEncoder {
    pub input_shape: Vec<usize>,
    pub normalization: Option<Normalization>,
}

impl InputEncoder {
    pub fn new(input_shape: Vec<usize>, normalization: Option<Normalization>) -> Self {
        InputEncoder {
            input_shape,
            normalization,
        }
    }

    pub fn width(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Appends the encoding of `payload` to `out`.
    pub fn encode_into<T: Real>(&self, payload: &Payload, out: &mut Vec<T>) -> Result<()> {
        let width = self.width();
        match payload {
            Payload::Image(img) => {
                if img.shape[..] != self.input_shape[..] {
                    return Err(Error::Shape(format!(
                        "image {:?} does not match input {:?}",
                        img.shape, self.input_shape
                    )));
                }
                self.push_standardized(&img.data, img.shape[1] * img.shape[2], out);
            }
            Payload::Vector { features } => {
                if features.len() != width || self.input_shape.len() != 1 {
                    return Err(Error::Shape(format!(
                        "{} features do not match input {:?}",
                        features.len(),
                        self.input_shape
                    )));
                }
                self.push_standardized(features, 1, out);
            }
            Payload::Text { tokens } => {
                if self.input_shape.len() != 1 {
                    return Err(Error::Shape(format!("text cannot feed input {:?}", self.input_shape)));
                }
                let start = out.len();
                out.resize(start + width, T::zero());
                let inc = T::lit(1.0 / tokens.len().max(1) as f64);
                for &t in tokens {
                    let slot = out
                        .get_mut(start + t as usize)
                        .ok_or_else(|| Error::Shape(format!("token {} outside vocabulary of {}", t, width)))?;
                    *slot += inc;
                }
            }
        }
        Ok(())
    }

    fn push_standardized<T: Real>(&self, values: &[f32], plane: usize, out: &mut Vec<T>) {
        match &self.normalization {
            Some(n) if n.mean.len() * plane == values.len() => {
                for (g, chunk) in values.chunks_exact(plane).enumerate() {
                    let (m, s) = (n.mean[g], n.std[g]);
                    out.extend(chunk.iter().map(|&v| T::lit((v as f64 - m) / s)));
                }
            }
            _ => out.extend(values.iter().map(|&v| T::lit(v as f64))),
        }
    }
}
