//! Human-parsing label maps: category grouping, nearest-neighbor resizing,
//! and the L1-normalized confidence maps consumed by the human part branch.
//!
//! Raw label maps carry the 20-category parsing vocabulary (19 human parts
//! plus background at index 0). A [`GroupingScheme`] folds those into K
//! groups; group 0 is background whenever K >= 2.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pnm;

/// Number of raw parsing categories: background + 19 human parts.
pub const RAW_CATEGORIES: usize = 20;

/// Per-pixel parsing output with labels in `[0, 20)`, as produced by an
/// external parsing model and stored as an 8-bit PGM.
#[derive(Clone, Debug)]
pub struct RawParsingMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl RawParsingMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(CoreError::LabelMap(format!(
                "label count {} does not match {width}x{height}",
                labels.len()
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= RAW_CATEGORIES {
                return Err(CoreError::LabelMap(format!(
                    "label {l} at pixel ({}, {}) exceeds the {RAW_CATEGORIES}-category vocabulary",
                    i % width,
                    i / width
                )));
            }
        }
        Ok(RawParsingMap {
            width,
            height,
            labels,
        })
    }

    pub fn from_pgm(path: &Path) -> Result<Self> {
        let (width, height, labels) = pnm::read_pgm(path)?;
        Self::new(width, height, labels)
    }

    pub fn to_pgm(&self, path: &Path) -> Result<()> {
        pnm::write_pgm(path, self.width, self.height, &self.labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Total map from the 20 raw categories to K group indices.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct GroupingScheme {
    #[serde(rename = "K")]
    pub k: usize,
    pub table: Vec<u8>,
}

impl GroupingScheme {
    pub fn new(k: usize, table: Vec<u8>) -> Result<Self> {
        let scheme = GroupingScheme { k, table };
        scheme.validate()?;
        Ok(scheme)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::LabelMap("grouping needs K >= 1".into()));
        }
        if self.table.len() != RAW_CATEGORIES {
            return Err(CoreError::LabelMap(format!(
                "grouping table must cover all {RAW_CATEGORIES} raw categories, got {}",
                self.table.len()
            )));
        }
        let mut seen = vec![false; self.k];
        for (raw, &g) in self.table.iter().enumerate() {
            if g as usize >= self.k {
                return Err(CoreError::LabelMap(format!(
                    "raw category {raw} maps to group {g}, outside [0, {})",
                    self.k
                )));
            }
            seen[g as usize] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(CoreError::LabelMap(
                "group indices must cover a contiguous range".into(),
            ));
        }
        if self.k >= 2 && self.table[0] != 0 {
            return Err(CoreError::LabelMap(
                "raw background (category 0) must map to group 0 when K >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Whole image as a single part.
    pub fn single_part() -> Self {
        GroupingScheme {
            k: 1,
            table: vec![0; RAW_CATEGORIES],
        }
    }

    /// Background vs. foreground.
    pub fn foreground_background() -> Self {
        let mut table = vec![1u8; RAW_CATEGORIES];
        table[0] = 0;
        GroupingScheme { k: 2, table }
    }

    /// Five groups: background, head, upper torso, lower torso, shoe.
    /// The exact raw-to-group assignment is a documented project choice.
    ///
    /// Raw order: background, hat, hair, glove, sunglasses, upper-clothes,
    /// dress, coat, socks, pants, jumpsuits, scarf, skirt, face, right-arm,
    /// left-arm, right-leg, left-leg, right-shoe, left-shoe.
    pub fn five_part() -> Self {
        GroupingScheme {
            k: 5,
            table: vec![0, 1, 1, 2, 1, 2, 2, 2, 3, 3, 2, 1, 3, 1, 2, 2, 3, 3, 4, 4],
        }
    }

    /// Identity mapping: every raw category is its own group.
    pub fn identity() -> Self {
        GroupingScheme {
            k: RAW_CATEGORIES,
            table: (0..RAW_CATEGORIES as u8).collect(),
        }
    }

    /// The built-in scheme for a part count, if one exists.
    pub fn for_part_count(k: usize) -> Result<Self> {
        match k {
            1 => Ok(Self::single_part()),
            2 => Ok(Self::foreground_background()),
            5 => Ok(Self::five_part()),
            20 => Ok(Self::identity()),
            _ => Err(CoreError::LabelMap(format!(
                "no built-in grouping for K = {k}; supply a scheme file"
            ))),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let scheme: GroupingScheme = serde_json::from_str(&text)?;
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-pixel part labels in `[0, K)` at some resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartLabelMap {
    width: usize,
    height: usize,
    part_count: usize,
    labels: Vec<u8>,
}

impl PartLabelMap {
    pub fn new(width: usize, height: usize, part_count: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(CoreError::LabelMap(format!(
                "label count {} does not match {width}x{height}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= part_count) {
            return Err(CoreError::LabelMap(format!(
                "label {bad} outside [0, {part_count})"
            )));
        }
        Ok(PartLabelMap {
            width,
            height,
            part_count,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of pixels N = width * height.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn part_count(&self) -> usize {
        self.part_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Labels widened to usize, for indexing part representations.
    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Mirror the map left-right (used by flip augmentation).
    pub fn flipped_horizontal(&self) -> Self {
        let mut labels = vec![0u8; self.labels.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                labels[y * self.width + x] = self.labels[y * self.width + (self.width - 1 - x)];
            }
        }
        PartLabelMap {
            width: self.width,
            height: self.height,
            part_count: self.part_count,
            labels,
        }
    }

    /// True where the pixel is background (non-human). Needs a scheme that
    /// distinguishes background, i.e. K >= 2.
    pub fn non_human_mask(&self) -> Result<Vec<bool>> {
        if self.part_count < 2 {
            return Err(CoreError::LabelMap(
                "binary human mask needs K >= 2; a single-part map has no foreground".into(),
            ));
        }
        Ok(self.labels.iter().map(|&l| l == 0).collect())
    }

    /// Complement of [`PartLabelMap::non_human_mask`].
    pub fn human_mask(&self) -> Result<Vec<bool>> {
        Ok(self.non_human_mask()?.iter().map(|&m| !m).collect())
    }
}

/// Apply a grouping scheme to a raw parsing map.
pub fn group_labels(raw: &RawParsingMap, scheme: &GroupingScheme) -> Result<PartLabelMap> {
    scheme.validate()?;
    let labels: Vec<u8> = raw.labels.iter().map(|&l| scheme.table[l as usize]).collect();
    PartLabelMap::new(raw.width, raw.height, scheme.k, labels)
}

/// Nearest-neighbor resize. Labels are categorical, so no interpolation:
/// source index = floor((i + 0.5) * src / dst) along each axis.
pub fn resize_nearest(map: &PartLabelMap, out_h: usize, out_w: usize) -> Result<PartLabelMap> {
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::invalid(
            "resize_nearest: target extents must be positive",
        ));
    }
    let scale_y = map.height as f64 / out_h as f64;
    let scale_x = map.width as f64 / out_w as f64;
    let mut labels = vec![0u8; out_h * out_w];
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * scale_y) as usize).min(map.height - 1);
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * scale_x) as usize).min(map.width - 1);
            labels[oy * out_w + ox] = map.labels[sy * map.width + sx];
        }
    }
    PartLabelMap::new(out_w, out_h, map.part_count, labels)
}

/// K L1-normalized indicator maps over the N pixels. For the part a pixel
/// belongs to, its weight is 1 / (pixel count of that part); empty parts
/// stay all-zero (the division is skipped).
#[derive(Clone, Debug)]
pub struct ConfidenceMaps {
    part_count: usize,
    pixels: usize,
    weights: Vec<f64>,
    counts: Vec<usize>,
}

impl ConfidenceMaps {
    pub fn part_count(&self) -> usize {
        self.part_count
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    /// Row-major `[K, N]` weight matrix.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.pixels..(k + 1) * self.pixels]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

pub fn build_confidence_maps(map: &PartLabelMap) -> ConfidenceMaps {
    let k = map.part_count;
    let n = map.len();
    let mut counts = vec![0usize; k];
    for &l in map.labels() {
        counts[l as usize] += 1;
    }
    let mut weights = vec![0.0f64; k * n];
    for (i, &l) in map.labels().iter().enumerate() {
        let c = counts[l as usize];
        weights[l as usize * n + i] = 1.0 / c as f64;
    }
    ConfidenceMaps {
        part_count: k,
        pixels: n,
        weights,
        counts,
    }
}
