//! Dataset ingestion and device partitioning.
//!
//! Reads the classic IDX binary pair (big-endian magic + dimension sizes +
//! raw unsigned bytes), splits samples across `M` devices either uniformly
//! (IID) or with a two-classes-per-device bias (non-IID), and provides a
//! deterministic synthetic 10-class image set for environments where the
//! real corpus is not on disk.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::learner::Batch;
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// A labelled image set with pixel values scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u8>,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, labels: Vec<u8>, feature_dim: usize) -> Result<Self> {
        if features.len() != labels.len() * feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} features vs {} labels × {} dims",
                features.len(),
                labels.len(),
                feature_dim
            )));
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// The first `n` samples as a new dataset (desk-scale cap). `n = 0` or
    /// `n >= len` keeps everything.
    pub fn truncated(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        Dataset {
            features: self.features[..n * self.feature_dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            feature_dim: self.feature_dim,
        }
    }

    /// Materializes the given rows as a batch.
    pub fn batch(&self, indices: &[u32]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
            }
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.feature_dim)
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone(), self.feature_dim)
    }

    /// Sample indices grouped by label, ascending within each class.
    pub fn class_indices(&self, classes: usize) -> Vec<Vec<u32>> {
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if usize::from(l) < classes {
                by_class[usize::from(l)].push(i as u32);
            }
        }
        by_class
    }
}

/// Per-device sample index lists. Every list has the same length `B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub device_indices: Vec<Vec<u32>>,
}

impl Partition {
    pub fn devices(&self) -> usize {
        self.device_indices.len()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Truncated(what.to_string()))?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

/// Loads an IDX image/label pair. Pixels are divided by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut image_bytes = Vec::new();
    File::open(images_path)?.read_to_end(&mut image_bytes)?;
    let mut label_bytes = Vec::new();
    File::open(labels_path)?.read_to_end(&mut label_bytes)?;

    let image_magic = read_u32_be(&image_bytes, 0, "image magic")?;
    if image_magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGE_MAGIC,
            found: image_magic,
        });
    }
    let label_magic = read_u32_be(&label_bytes, 0, "label magic")?;
    if label_magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: LABEL_MAGIC,
            found: label_magic,
        });
    }

    let n_images = read_u32_be(&image_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&image_bytes, 8, "image rows")? as usize;
    let cols = read_u32_be(&image_bytes, 12, "image cols")? as usize;
    let n_labels = read_u32_be(&label_bytes, 4, "label count")? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let feature_dim = rows * cols;
    let pixel_bytes = image_bytes
        .get(16..16 + n_images * feature_dim)
        .ok_or_else(|| Error::Truncated("image data".into()))?;
    let labels = label_bytes
        .get(8..8 + n_labels)
        .ok_or_else(|| Error::Truncated("label data".into()))?
        .to_vec();

    let features = pixel_bytes
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Dataset::new(features, labels, feature_dim)
}

/// IID split: `M · B` distinct indices drawn uniformly without replacement,
/// dealt into `M` lists of `B`.
pub fn partition_iid(
    ds: &Dataset,
    devices: usize,
    per_device: usize,
    rng: &mut impl Rng,
) -> Result<Partition> {
    let needed = devices * per_device;
    if needed > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "IID partition needs {needed} samples, dataset has {}",
            ds.len()
        )));
    }
    // Partial Fisher-Yates: only the first M·B positions are needed.
    let mut pool: Vec<u32> = (0..ds.len() as u32).collect();
    for i in 0..needed {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let device_indices = pool[..needed]
        .chunks(per_device)
        .map(<[u32]>::to_vec)
        .collect();
    Ok(Partition { device_indices })
}

/// Non-IID split: per device, two distinct classes chosen uniformly, then
/// `B/2` samples drawn from each class without replacement within that
/// device. Devices may overlap in the samples they draw.
pub fn partition_noniid(
    ds: &Dataset,
    devices: usize,
    per_device: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<Partition> {
    if per_device % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "non-IID partition needs an even per-device size, got {per_device}"
        )));
    }
    let half = per_device / 2;
    let by_class = ds.class_indices(classes);
    if let Some((c, _)) = by_class.iter().enumerate().find(|(_, v)| v.len() < half) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has fewer than {half} samples"
        )));
    }

    let mut device_indices = Vec::with_capacity(devices);
    for _ in 0..devices {
        let first = rng.gen_range(0..classes);
        let mut second = rng.gen_range(0..classes - 1);
        if second >= first {
            second += 1;
        }
        let mut indices = Vec::with_capacity(per_device);
        for class in [first, second] {
            indices.extend(by_class[class].choose_multiple(rng, half).copied());
        }
        device_indices.push(indices);
    }
    Ok(Partition { device_indices })
}

/// Deterministic synthetic stand-in for the real 28x28 / 10-class corpus.
///
/// Each class owns a template of bright pixels drawn from a shared central
/// pool, so classes overlap and the task is learnable but not trivial.
/// Labels cycle through the classes, keeping any prefix balanced. Same seed,
/// same bytes.
pub fn synthetic_dataset(n: usize, seed: u64) -> Dataset {
    const SIDE: usize = 28;
    const CLASSES: usize = 10;
    const POOL_SIDE: usize = 14;
    const SIGNAL_PIXELS: usize = 72;
    let feature_dim = SIDE * SIDE;

    // Central 14x14 pool of candidate signal positions.
    let mut pool = Vec::with_capacity(POOL_SIDE * POOL_SIDE);
    for r in 7..7 + POOL_SIDE {
        for c in 7..7 + POOL_SIDE {
            pool.push(r * SIDE + c);
        }
    }

    let mut template_rng = crate::seeded_stream(seed, "synthetic/templates");
    let mut templates = vec![vec![0.0f32; feature_dim]; CLASSES];
    for template in &mut templates {
        let picks: Vec<usize> = pool
            .choose_multiple(&mut template_rng, SIGNAL_PIXELS)
            .copied()
            .collect();
        for p in picks {
            template[p] = template_rng.gen_range(0.35..0.95);
        }
    }

    let mut sample_rng = crate::seeded_stream(seed, "synthetic/samples");
    let mut features = Vec::with_capacity(n * feature_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        labels.push(class as u8);
        let amplitude: f32 = sample_rng.gen_range(0.6..1.0);
        for &t in &templates[class] {
            let noise: f32 = sample_rng.gen_range(-0.18..0.18);
            let background: f32 = sample_rng.gen_range(0.0..0.08);
            features.push((t * amplitude + background + noise).clamp(0.0, 1.0));
        }
    }
    Dataset {
        features,
        labels,
        feature_dim,
    }
}
