//! Dataset manifests and image sources.
//!
//! A manifest pairs caption ids (keys into an [`EmbeddingCache`]) with image
//! locators. Two locator kinds are supported: `synth:<n>` renders sample `n`
//! of the manifest's synthetic corpus, anything else is a PNG path relative
//! to the manifest file.
//!
//! The synthetic corpus has `classes` prototype directions on the unit
//! sphere. Sample `n` belongs to class `n % classes`; its caption embedding
//! is the prototype plus a per-sample perturbation, renormalized, and its
//! image is a fixed random linear rendering of that caption embedding tiled
//! over the canvas with pixel noise. Everything is a pure function of
//! `(seed, n)`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::{EmbeddingCache, EmbeddingRecord};
use crate::error::{LiftError, Result};
use crate::vit::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub caption_id: u64,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub shuffle_seed: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    /// Directory that relative image paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LiftError::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| LiftError::Config(format!("{}: {e}", path.display())))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        crate::util::write_atomic(path, text.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn caption_ids(&self, indices: &[usize]) -> Vec<u64> {
        indices
            .iter()
            .map(|&i| self.entries[i].caption_id)
            .collect()
    }

    /// Fails with every caption id the cache cannot resolve.
    pub fn check_resolvable(&self, cache: &EmbeddingCache) -> Result<()> {
        let missing: Vec<u64> = self
            .entries
            .iter()
            .map(|e| e.caption_id)
            .filter(|&id| !cache.contains(id))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(LiftError::NotFoundMany(missing))
        }
    }

    /// Deterministic permutation of entry indices for one epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.shuffle_seed, 0x5eed, epoch));
        order.shuffle(&mut rng);
        order
    }

    pub fn load_image(&self, index: usize, channels: usize, size: usize) -> Result<ImageTensor> {
        let entry = &self.entries[index];
        let ingest = |reason: String| LiftError::Ingest {
            locator: entry.source.clone(),
            reason,
        };
        if let Some(rest) = entry.source.strip_prefix("synth:") {
            let spec = self
                .synthetic
                .as_ref()
                .ok_or_else(|| ingest("manifest has no synthetic section".into()))?;
            let n: u64 = rest
                .parse()
                .map_err(|_| ingest("bad synthetic sample index".into()))?;
            if spec.channels != channels || spec.image_size != size {
                return Err(ingest(format!(
                    "synthetic images are {}x{}x{}, model expects {channels}x{size}x{size}",
                    spec.channels, spec.image_size, spec.image_size
                )));
            }
            return Ok(spec.render(n));
        }
        let path = self.root.join(&entry.source);
        load_png(&path, channels, size).map_err(|e| ingest(e.to_string()))
    }

    pub fn load_images(
        &self,
        indices: &[usize],
        channels: usize,
        size: usize,
    ) -> Result<Vec<ImageTensor>> {
        indices
            .iter()
            .map(|&i| self.load_image(i, channels, size))
            .collect()
    }
}

/// Reads a PNG of exactly `size x size` pixels and scales it to `[-1, 1]`.
pub fn load_png(path: &Path, channels: usize, size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| LiftError::Ingest {
        locator: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if img.width() as usize != size || img.height() as usize != size {
        return Err(LiftError::shape(
            "image",
            format!("{size}x{size}"),
            format!("{}x{}", img.width(), img.height()),
        ));
    }
    let chw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => {
            let rgb = img.to_rgb8();
            let mut out = vec![0u8; 3 * size * size];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out[c * size * size + i] = px[c];
                }
            }
            out
        }
        other => {
            return Err(LiftError::Config(format!(
                "unsupported channel count {other} for PNG input"
            )));
        }
    };
    ImageTensor::from_u8(channels, size, size, &chw)
}

/// splitmix64-style seed derivation.
pub(crate) fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z =
        seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_PROTO: u64 = 1;
const TAG_CAPTION: u64 = 2;
const TAG_RENDER: u64 = 3;
const TAG_PIXEL: u64 = 4;

fn gaussian_vec(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn default_tile() -> usize {
    4
}

/// Parameters of the class-structured synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    pub dim: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Side of the repeated pattern; the image size must be a multiple.
    #[serde(default = "default_tile")]
    pub tile: usize,
    /// Scale of the per-sample caption perturbation relative to the prototype.
    pub spread: f64,
    pub pixel_noise: f64,
}

impl SynthSpec {
    /// 256 samples over 16 classes, 32x32 RGB, 32-d embeddings.
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            classes: 16,
            samples: 256,
            dim: 32,
            image_size: 32,
            channels: 3,
            tile: 4,
            spread: 0.8,
            pixel_noise: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.samples == 0 || self.dim == 0 || self.channels == 0 {
            return Err(LiftError::Config(
                "synthetic corpus needs >= 2 classes and nonzero sizes".into(),
            ));
        }
        if self.tile == 0 || self.image_size % self.tile != 0 {
            return Err(LiftError::Config(format!(
                "image_size {} is not a multiple of tile {}",
                self.image_size, self.tile
            )));
        }
        Ok(())
    }

    pub fn class_of(&self, sample: u64) -> usize {
        (sample % self.classes as u64) as usize
    }

    pub fn prototype(&self, class: usize) -> Vec<f64> {
        unit(gaussian_vec(
            mix(self.seed, TAG_PROTO, class as u64),
            self.dim,
        ))
    }

    pub fn caption_embedding(&self, sample: u64) -> Vec<f64> {
        let proto = self.prototype(self.class_of(sample));
        let noise = gaussian_vec(mix(self.seed, TAG_CAPTION, sample), self.dim);
        let scale = self.spread / (self.dim as f64).sqrt();
        unit(
            proto
                .iter()
                .zip(&noise)
                .map(|(p, n)| p + scale * n)
                .collect(),
        )
    }

    /// `(channels * tile * tile) x dim` rendering matrix.
    fn render_matrix(&self) -> Array2<f64> {
        let rows = self.channels * self.tile * self.tile;
        let g = gaussian_vec(mix(self.seed, TAG_RENDER, 0), rows * self.dim);
        Array2::from_shape_vec((rows, self.dim), g).unwrap()
    }

    pub fn render(&self, sample: u64) -> ImageTensor {
        let z = ndarray::Array1::from_vec(self.caption_embedding(sample));
        let pattern = self.render_matrix().dot(&z);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, TAG_PIXEL, sample));
        let (s, t) = (self.image_size, self.tile);
        let mut data = Array3::<f32>::zeros((self.channels, s, s));
        for c in 0..self.channels {
            for y in 0..s {
                for x in 0..s {
                    let base = pattern[c * t * t + (y % t) * t + x % t];
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data[[c, y, x]] = (base + self.pixel_noise * noise).tanh() as f32;
                }
            }
        }
        ImageTensor::new(data).expect("tanh output lies in [-1, 1]")
    }

    pub fn caption_records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        (0..self.samples as u64).map(move |n| {
            EmbeddingRecord::new(
                n,
                self.caption_embedding(n)
                    .into_iter()
                    .map(|x| x as f32)
                    .collect(),
            )
        })
    }

    pub fn prototype_records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        (0..self.classes).map(move |c| {
            EmbeddingRecord::new(
                c as u64,
                self.prototype(c).into_iter().map(|x| x as f32).collect(),
            )
        })
    }

    pub fn label_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class_{c:02}")).collect()
    }

    pub fn manifest(&self, shuffle_seed: u64) -> DatasetManifest {
        DatasetManifest {
            shuffle_seed,
            entries: (0..self.samples as u64)
                .map(|n| ManifestEntry {
                    caption_id: n,
                    source: format!("synth:{n}"),
                    label: Some(self.class_of(n)),
                })
                .collect(),
            synthetic: Some(self.clone()),
            labels: self.label_names(),
            root: PathBuf::new(),
        }
    }
}
