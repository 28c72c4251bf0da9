//! Training-time augmentation: horizontal flip (image and label map
//! together) and random erasing (image only — the label maps come from an
//! external parsing model that never saw the erased pixels).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageF32;
use dpb_core::masks::PartLabelMap;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub erase: bool,
    pub flip_probability: f64,
    pub erase_probability: f64,
    /// Erased-rectangle area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    /// Per-channel fill for erased pixels.
    pub erase_fill: [f32; 3],
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            flip: true,
            erase: true,
            flip_probability: 0.5,
            erase_probability: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 1.0 / 0.3),
            erase_fill: [0.4914, 0.4822, 0.4465],
        }
    }
}

impl AugmentFlags {
    pub fn disabled() -> Self {
        AugmentFlags {
            flip: false,
            erase: false,
            ..AugmentFlags::default()
        }
    }
}

/// Sample an erasing rectangle whose actual area ratio and aspect fall
/// inside the configured bounds. Returns (y, x, h, w) or `None` when no
/// attempt fits.
pub fn sample_erase_rect(
    height: usize,
    width: usize,
    flags: &AugmentFlags,
    rng: &mut impl Rng,
) -> Option<(usize, usize, usize, usize)> {
    let image_area = (height * width) as f64;
    for _ in 0..100 {
        let target = rng.gen_range(flags.erase_area.0..flags.erase_area.1) * image_area;
        let aspect = rng.gen_range(flags.erase_aspect.0..flags.erase_aspect.1);
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= height || w >= width {
            continue;
        }
        let ratio = (h * w) as f64 / image_area;
        if ratio < flags.erase_area.0 || ratio > flags.erase_area.1 {
            continue;
        }
        let y = rng.gen_range(0..=height - h);
        let x = rng.gen_range(0..=width - w);
        return Some((y, x, h, w));
    }
    None
}

pub fn erase_rect(image: &mut ImageF32, rect: (usize, usize, usize, usize), fill: [f32; 3]) {
    let (y0, x0, h, w) = rect;
    for c in 0..3 {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                image.set(c, y, x, fill[c]);
            }
        }
    }
}

/// Apply the configured augmentations. The label map flips with the image;
/// erasing leaves it untouched.
pub fn augment(
    image: &ImageF32,
    labels: &PartLabelMap,
    flags: &AugmentFlags,
    rng: &mut impl Rng,
) -> (ImageF32, PartLabelMap) {
    let mut out_image = image.clone();
    let mut out_labels = labels.clone();
    if flags.flip && rng.gen_bool(flags.flip_probability) {
        out_image = out_image.flipped_horizontal();
        out_labels = out_labels.flipped_horizontal();
    }
    if flags.erase && rng.gen_bool(flags.erase_probability) {
        if let Some(rect) = sample_erase_rect(image.height, image.width, flags, rng) {
            erase_rect(&mut out_image, rect, flags.erase_fill);
        }
    }
    (out_image, out_labels)
}
