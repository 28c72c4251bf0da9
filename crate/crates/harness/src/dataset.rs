//! On-disk dataset layout and in-memory samples.
//!
//! A dataset directory holds `images/*.ppm`, matching `labels/*.pgm` raw
//! parsing maps, and a `manifest.csv` with columns
//! `path,identity,camera,split,junk_flag`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpb_core::error::{CoreError, Result};
use dpb_core::masks::{group_labels, GroupingScheme, PartLabelMap, RawParsingMap};
use dpb_core::pnm;

/// Channel-major `[3, H, W]` float image in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageF32 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(height: usize, width: usize) -> Self {
        ImageF32 {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn from_ppm(path: &Path) -> Result<Self> {
        let (w, h, rgb) = pnm::read_ppm(path)?;
        let mut image = ImageF32::new(h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    image.set(c, y, x, rgb[(y * w + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        Ok(image)
    }

    pub fn to_ppm(&self, path: &Path) -> Result<()> {
        let mut rgb = vec![0u8; self.height * self.width * 3];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                    rgb[(y * self.width + x) * 3 + c] = v;
                }
            }
        }
        pnm::write_ppm(path, self.width, self.height, &rgb)
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut out = ImageF32::new(self.height, self.width);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub identity: i64,
    pub camera: i64,
    pub split: Split,
    pub junk_flag: u8,
}

#[derive(Clone)]
pub struct Sample {
    pub image: ImageF32,
    pub raw_labels: RawParsingMap,
    pub identity: i64,
    pub camera: i64,
    pub split: Split,
    pub junk: bool,
    /// Dense class index over the train split's identities; `None` for
    /// identities that never appear in training.
    pub class_index: Option<usize>,
}

pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub num_train_identities: usize,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = root.join("manifest.csv");
        if !manifest.exists() {
            return Err(CoreError::invalid(format!(
                "dataset: no manifest.csv under {}",
                root.display()
            )));
        }
        let mut reader = csv::Reader::from_path(&manifest).map_err(|e| CoreError::FileFormat {
            path: manifest.display().to_string(),
            message: e.to_string(),
        })?;
        let mut rows: Vec<ManifestRow> = Vec::new();
        for record in reader.deserialize() {
            rows.push(record.map_err(|e| CoreError::FileFormat {
                path: manifest.display().to_string(),
                message: e.to_string(),
            })?);
        }
        // dense class indices over train identities, in first-seen order
        let mut train_ids: Vec<i64> = Vec::new();
        for row in rows.iter().filter(|r| r.split == Split::Train) {
            if !train_ids.contains(&row.identity) {
                train_ids.push(row.identity);
            }
        }
        let mut samples = Vec::with_capacity(rows.len());
        for row in &rows {
            let image_path = root.join(&row.path);
            let image = ImageF32::from_ppm(&image_path)?;
            let label_path = label_path_for(root, &row.path)?;
            let raw_labels = RawParsingMap::from_pgm(&label_path)?;
            if raw_labels.width() != image.width || raw_labels.height() != image.height {
                return Err(CoreError::LabelMap(format!(
                    "{}: label map {}x{} does not match image {}x{}",
                    row.path,
                    raw_labels.width(),
                    raw_labels.height(),
                    image.width,
                    image.height
                )));
            }
            samples.push(Sample {
                image,
                raw_labels,
                identity: row.identity,
                camera: row.camera,
                split: row.split,
                junk: row.junk_flag != 0,
                class_index: train_ids.iter().position(|&id| id == row.identity),
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            samples,
            num_train_identities: train_ids.len(),
        })
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Group every sample's raw parsing map under one scheme.
    pub fn grouped_labels(&self, scheme: &GroupingScheme) -> Result<Vec<PartLabelMap>> {
        self.samples
            .iter()
            .map(|s| group_labels(&s.raw_labels, scheme))
            .collect()
    }
}

/// `images/foo.ppm -> labels/foo.pgm`.
pub fn label_path_for(root: &Path, image_rel: &str) -> Result<PathBuf> {
    let rel = Path::new(image_rel);
    let stem = rel
        .file_stem()
        .ok_or_else(|| CoreError::invalid(format!("dataset: bad image path '{image_rel}'")))?;
    let mut name = stem.to_os_string();
    name.push(".pgm");
    Ok(root.join("labels").join(name))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CoreError::FileFormat {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for row in rows {
        writer.serialize(row).map_err(|e| CoreError::FileFormat {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    writer.flush()?;
    Ok(())
}

/// PK batches: each batch holds `p` distinct train classes with `k`
/// sampled images each.
pub struct PkSampler {
    /// (class index, sample indices) for classes with at least k images.
    classes: Vec<(usize, Vec<usize>)>,
    pub p: usize,
    pub k: usize,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, p: usize, k: usize) -> Result<Self> {
        let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> =
            std::collections::BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.split == Split::Train && !s.junk {
                if let Some(class) = s.class_index {
                    by_class.entry(class).or_default().push(i);
                }
            }
        }
        let classes: Vec<(usize, Vec<usize>)> = by_class
            .into_iter()
            .filter(|(_, v)| v.len() >= k)
            .collect();
        if classes.len() < p {
            return Err(CoreError::invalid(format!(
                "pk sampler: {} classes with >= {k} images, need {p}",
                classes.len()
            )));
        }
        Ok(PkSampler { classes, p, k })
    }

    /// One epoch of batches. Every class appears in at most one batch per
    /// epoch; classes beyond the largest multiple of `p` are dropped for
    /// that epoch.
    pub fn epoch_batches(&self, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.shuffle(rng);
        let mut batches = Vec::new();
        for chunk in order.chunks_exact(self.p) {
            let mut batch = Vec::with_capacity(self.p * self.k);
            for &ci in chunk {
                let (_, ref images) = self.classes[ci];
                let mut picks: Vec<usize> = images.clone();
                picks.shuffle(rng);
                batch.extend(picks.into_iter().take(self.k));
            }
            batches.push(batch);
        }
        batches
    }
}
