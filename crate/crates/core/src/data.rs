//! Labelled image sets: the CIFAR-10 binary format and a synthetic
//! class-conditional blob generator for fast runs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vit::IN_CHANNELS;

pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Per-channel normalization applied to CIFAR-10 pixels after scaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };

    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

/// Images stored flat, `3·S·S` values per sample in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        image_size: usize,
        num_classes: usize,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        normalization: Normalization,
    ) -> Result<Self> {
        let per = IN_CHANNELS * image_size * image_size;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} pixel values for {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset {
            image_size,
            num_classes,
            pixels,
            labels,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        IN_CHANNELS * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Images `[B, 3, S, S]` and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let s = self.image_size;
        let images = Tensor::new(&[indices.len(), IN_CHANNELS, s, s], data).expect("sized batch");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples `start..end` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let n = self.sample_len();
        let end = end.min(self.len());
        let start = start.min(end);
        Dataset {
            image_size: self.image_size,
            num_classes: self.num_classes,
            pixels: self.pixels[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
            normalization: self.normalization,
        }
    }

    /// Training part and the last `fraction` of samples by index for validation.
    pub fn split_validation(&self, fraction: f64) -> (Dataset, Dataset) {
        let val = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - val.min(self.len());
        (self.slice(0, cut), self.slice(cut, self.len()))
    }

    /// Same images, labels permuted by a seeded shuffle.
    pub fn with_shuffled_labels(&self, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = self.labels.clone();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        Dataset { labels, ..self.clone() }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes as
/// R, G and B planes of 32×32.
pub fn parse_cifar10(bytes: &[u8], normalization: Normalization) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let records = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("record {i}: label {label} > 9")));
        }
        labels.push(label);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            let (m, s) = (normalization.mean[c], normalization.std[c]);
            pixels.extend(plane.iter().map(|&b| (b as f64 / 255.0 - m) / s));
        }
    }
    Dataset::new(32, 10, pixels, labels, normalization)
}

pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_cifar10(&bytes, Normalization::CIFAR10)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e.root())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarSplit {
    Train,
    Test,
}

/// Loads the five training batches or the test batch from `dir`.
pub fn load_cifar10(dir: &Path, split: CifarSplit) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        CifarSplit::Train => CIFAR_TRAIN_FILES.to_vec(),
        CifarSplit::Test => vec![CIFAR_TEST_FILE],
    };
    let mut out: Option<Dataset> = None;
    for f in files {
        let part = load_cifar10_file(&dir.join(f))?;
        match &mut out {
            None => out = Some(part),
            Some(acc) => {
                acc.pixels.extend_from_slice(&part.pixels);
                acc.labels.extend_from_slice(&part.labels);
            }
        }
    }
    Ok(out.expect("at least one file"))
}

/// Class-conditional blob images: each class owns a few coloured Gaussian
/// bumps at fixed positions; samples jitter positions and amplitudes and add
/// pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_blobs")]
    pub blobs_per_class: usize,
    /// Standard deviation of blob-centre jitter, in pixels.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_image_size() -> usize {
    32
}
fn default_blobs() -> usize {
    3
}
fn default_jitter() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.3
}

impl SyntheticSpec {
    pub fn new(seed: u64, classes: usize, samples: usize) -> Self {
        SyntheticSpec {
            seed,
            classes,
            samples,
            image_size: default_image_size(),
            blobs_per_class: default_blobs(),
            jitter: default_jitter(),
            noise: default_noise(),
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.image_size == 0 || self.blobs_per_class == 0 {
            return Err(Error::Config(
                "synthetic images need a size and at least one blob".into(),
            ));
        }
        if !(self.jitter >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("synthetic jitter and noise must be non-negative".into()));
        }
        let s = self.image_size;
        let sf = s as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // (centre y, centre x, width, colour) per blob per class
        let prototypes: Vec<Vec<(f64, f64, f64, [f64; 3])>> = (0..self.classes)
            .map(|_| {
                (0..self.blobs_per_class)
                    .map(|_| {
                        let y = rng.random_range(0.15 * sf..0.85 * sf);
                        let x = rng.random_range(0.15 * sf..0.85 * sf);
                        let w = rng.random_range(0.06 * sf..0.12 * sf);
                        let colour = [
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ];
                        (y, x, w, colour)
                    })
                    .collect()
            })
            .collect();

        let jitter = Normal::new(0.0, self.jitter.max(f64::MIN_POSITIVE)).expect("valid jitter");
        let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
        let per = IN_CHANNELS * s * s;
        let mut pixels = vec![0.0; self.samples * per];
        let mut labels = Vec::with_capacity(self.samples);
        for (i, img) in pixels.chunks_exact_mut(per).enumerate() {
            let class = i % self.classes;
            labels.push(class);
            for &(cy, cx, w, colour) in &prototypes[class] {
                let y0 = cy
                    + if self.jitter > 0.0 {
                        jitter.sample(&mut rng)
                    } else {
                        0.0
                    };
                let x0 = cx
                    + if self.jitter > 0.0 {
                        jitter.sample(&mut rng)
                    } else {
                        0.0
                    };
                let amp = rng.random_range(0.7..1.3);
                let inv = 1.0 / (2.0 * w * w);
                for y in 0..s {
                    for x in 0..s {
                        let dy = y as f64 - y0;
                        let dx = x as f64 - x0;
                        let g = amp * (-(dy * dy + dx * dx) * inv).exp();
                        for (c, &col) in colour.iter().enumerate() {
                            img[(c * s + y) * s + x] += g * col;
                        }
                    }
                }
            }
            if self.noise > 0.0 {
                for v in img.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
        }
        Dataset::new(s, self.classes, pixels, labels, Normalization::IDENTITY)
    }
}

/// Default-shaped synthetic set of 32×32 images.
pub fn gen_synthetic(seed: u64, classes: usize, samples: usize) -> Result<Dataset> {
    SyntheticSpec::new(seed, classes, samples).generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, CIFAR_PIXELS));
        r
    }

    #[test]
    fn two_record_round_trip() {
        let mut bytes = record(3, 0);
        let mut second = record(7, 255);
        second[1] = 128; // first red pixel
        bytes.extend(second);
        let ds = parse_cifar10(&bytes, Normalization::IDENTITY).unwrap();
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.image(0)[0], 0.0);
        assert_eq!(ds.image(1)[0], 128.0 / 255.0);
        assert_eq!(ds.image(1)[1], 1.0);
    }

    #[test]
    fn bad_sizes_and_labels() {
        assert!(matches!(
            parse_cifar10(&[0u8; 100], Normalization::IDENTITY),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_cifar10(&record(10, 0), Normalization::IDENTITY),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = gen_synthetic(5, 3, 12).unwrap();
        assert_eq!(a, gen_synthetic(5, 3, 12).unwrap());
        assert_ne!(a.pixels, gen_synthetic(6, 3, 12).unwrap().pixels);
        assert_eq!(a.class_histogram(), vec![4, 4, 4]);
        assert!(gen_synthetic(5, 1, 12).is_err());
    }

    #[test]
    fn validation_is_tail() {
        let ds = gen_synthetic(1, 2, 20).unwrap();
        let (train, val) = ds.split_validation(0.1);
        assert_eq!((train.len(), val.len()), (18, 2));
        assert_eq!(val.image(0), ds.image(18));
    }
}
