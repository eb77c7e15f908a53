//! Labelled image samples: IDX files and a seeded synthetic stroke generator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An image with pixels in `[0, 1]` and its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S> {
    pub image: Tensor<S>,
    pub label: usize,
}

impl<S: Scalar> Sample<S> {
    pub fn new(image: Tensor<S>, label: usize) -> Result<Self> {
        if let Some(v) = image
            .data()
            .iter()
            .find(|v| !(**v >= S::zero() && **v <= S::one()))
        {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { image, label })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub samples: Vec<Sample<S>>,
    pub classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(samples: Vec<Sample<S>>, classes: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= classes) {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes,
            });
        }
        Ok(Self { samples, classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated IDX header")))
}

/// Parses IDX image and label buffers. Pixels are rescaled from `0..=255` to `[0, 1]`.
pub fn parse_idx<S: Scalar>(
    images: &[u8],
    labels: &[u8],
    classes: Option<usize>,
) -> Result<Dataset<S>> {
    let magic = read_be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad IDX magic {magic:#010x}"
        )));
    }
    let n = read_be_u32(images, 4, "images")? as usize;
    let rows = read_be_u32(images, 8, "images")? as usize;
    let cols = read_be_u32(images, 12, "images")? as usize;
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() != n * pixels {
        return Err(Error::Format(format!(
            "images: expected {} pixel bytes, found {}",
            n * pixels,
            body.len()
        )));
    }

    let magic = read_be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad IDX magic {magic:#010x}"
        )));
    }
    let nl = read_be_u32(labels, 4, "labels")? as usize;
    let lbody = &labels[8..];
    if nl != n || lbody.len() != n {
        return Err(Error::Format(format!(
            "label count {} does not match image count {n}",
            lbody.len()
        )));
    }

    let classes =
        classes.unwrap_or_else(|| lbody.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
    let scale = S::of(255.0);
    let samples = body
        .chunks_exact(pixels.max(1))
        .zip(lbody)
        .map(|(px, &label)| Sample {
            image: Tensor::new(
                vec![1, rows, cols],
                px.iter().map(|&b| S::of(b as f64) / scale).collect(),
            )
            .expect("idx image shape"),
            label: label as usize,
        })
        .collect();
    Dataset::new(samples, classes)
}

pub fn load_idx<S: Scalar>(
    images: &Path,
    labels: &Path,
    classes: Option<usize>,
) -> Result<Dataset<S>> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&ib, &lb, classes)
}

/// Encodes single-channel samples as IDX image and label buffers (pixels rounded to bytes).
pub fn encode_idx<S: Scalar>(samples: &[Sample<S>]) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = samples
        .first()
        .map(|s| s.image.shape().to_vec())
        .ok_or(Error::EmptyDataset)?;
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Format(format!(
            "IDX export needs [1, H, W] images, got {shape:?}"
        )));
    }
    let mut images = Vec::new();
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    images.extend_from_slice(&(shape[1] as u32).to_be_bytes());
    images.extend_from_slice(&(shape[2] as u32).to_be_bytes());
    let mut labels = Vec::new();
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Format(
                "IDX export needs uniform image shapes".into(),
            ));
        }
        images.extend(
            s.image
                .data()
                .iter()
                .map(|v| (v.as_f64() * 255.0).round() as u8),
        );
        labels.push(u8::try_from(s.label).map_err(|_| Error::Format("label exceeds 255".into()))?);
    }
    Ok((images, labels))
}

/// Seeded generator of digit-like stroke images.
///
/// Every class owns a template of line segments drawn from `seed`. Each sample
/// jitters the segment endpoints, shifts the whole glyph, renders the strokes
/// with a Gaussian profile and adds clipped pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub size: usize,
    pub strokes: usize,
    /// Endpoint jitter in pixels (standard deviation).
    pub jitter: f64,
    /// Whole-glyph shift in pixels (uniform half-width).
    pub shift: f64,
    /// Additive pixel noise (standard deviation) before clipping.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            size: 28,
            strokes: 3,
            jitter: 1.8,
            shift: 2.0,
            noise: 0.08,
            seed: 2024,
        }
    }
}

type Segment = [(f64, f64); 2];

impl SyntheticConfig {
    fn templates(&self) -> Vec<Vec<Segment>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let lo = self.size as f64 * 0.2;
        let hi = self.size as f64 * 0.8;
        (0..self.classes)
            .map(|_| {
                (0..self.strokes)
                    .map(|_| {
                        [
                            (rng.random_range(lo..hi), rng.random_range(lo..hi)),
                            (rng.random_range(lo..hi), rng.random_range(lo..hi)),
                        ]
                    })
                    .collect()
            })
            .collect()
    }

    /// Generates `count` samples from an independent stream. Labels cycle
    /// through the classes so every class is equally represented.
    pub fn generate<S: Scalar>(&self, count: usize, stream: u64) -> Result<Dataset<S>> {
        if self.classes == 0 || self.size == 0 || self.strokes == 0 {
            return Err(Error::InvalidParameter(
                "synthetic generator needs classes, size and strokes > 0".into(),
            ));
        }
        let templates = self.templates();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let jitter = Normal::new(0.0, self.jitter.max(0.0))
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let noise = Normal::new(0.0, self.noise.max(0.0))
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let n = self.size;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % self.classes;
            let dx = rng.random_range(-self.shift..=self.shift);
            let dy = rng.random_range(-self.shift..=self.shift);
            let width: f64 = rng.random_range(0.9..1.4);
            let ink: f64 = rng.random_range(0.7..1.0);
            let segs: Vec<Segment> = templates[label]
                .iter()
                .map(|s| {
                    let mut p = *s;
                    for pt in p.iter_mut() {
                        pt.0 += dx + jitter.sample(&mut rng);
                        pt.1 += dy + jitter.sample(&mut rng);
                    }
                    p
                })
                .collect();
            let mut px = vec![0.0f64; n * n];
            for y in 0..n {
                for x in 0..n {
                    let c = (x as f64 + 0.5, y as f64 + 0.5);
                    let d2 = segs
                        .iter()
                        .map(|s| segment_distance_sq(c, s))
                        .fold(f64::INFINITY, f64::min);
                    px[y * n + x] = ink * (-d2 / (2.0 * width * width)).exp();
                }
            }
            for v in px.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            samples.push(Sample {
                image: Tensor::new(vec![1, n, n], px.into_iter().map(S::of).collect())?,
                label,
            });
        }
        Dataset::new(samples, self.classes)
    }
}

fn segment_distance_sq(p: (f64, f64), s: &Segment) -> f64 {
    let (a, b) = (s[0], s[1]);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    qx * qx + qy * qy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_rejects_out_of_range_pixels() {
        let img = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.5, 1.5]).unwrap();
        assert!(Sample::new(img, 0).is_err());
        let img = Tensor::<f64>::from_f64(&[1, 1, 1], &[f64::NAN]).unwrap();
        assert!(Sample::new(img, 0).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let samples: Vec<Sample<f64>> = (0..3)
            .map(|i| {
                Sample::new(
                    Tensor::from_fn(&[1, 2, 3], |j| ((i * 6 + j) * 10) as f64 / 255.0),
                    i,
                )
                .unwrap()
            })
            .collect();
        let (ib, lb) = encode_idx(&samples).unwrap();
        assert_eq!(&ib[..4], &[0, 0, 8, 3]);
        assert_eq!(&lb[..4], &[0, 0, 8, 1]);
        let ds: Dataset<f64> = parse_idx(&ib, &lb, None).unwrap();
        assert_eq!(ds.classes, 3);
        for (a, b) in ds.samples.iter().zip(&samples) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn idx_rejects_bad_magic_and_count() {
        let (mut ib, lb) =
            encode_idx(&[Sample::new(Tensor::<f64>::zeros(&[1, 2, 2]), 0).unwrap()]).unwrap();
        let mut bad = ib.clone();
        bad[3] = 0x04;
        assert!(parse_idx::<f64>(&bad, &lb, None).is_err());
        ib.pop();
        assert!(parse_idx::<f64>(&ib, &lb, None).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_in_range() {
        let cfg = SyntheticConfig::default();
        let a: Dataset<f64> = cfg.generate(20, 0).unwrap();
        let b: Dataset<f64> = cfg.generate(20, 0).unwrap();
        let c: Dataset<f64> = cfg.generate(20, 1).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
        assert_eq!(a.image_shape(), Some(&[1, 28, 28][..]));
        for s in &a.samples {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
