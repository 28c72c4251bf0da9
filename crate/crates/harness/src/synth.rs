//! Synthetic person-retrieval data. Each identity is a vertical arrangement
//! of colored body bands (head, torso, legs, shoes) drawn from small color
//! palettes, so distinct identities frequently collide on clothing color.
//! Around half of the identities carry a distinctly colored "accessory"
//! blob beside the body in every one of their images; the ground-truth
//! label maps mark it as background, exactly like the clutter rectangles,
//! so only appearance grouping — not parsing — can exploit it.
//!
//! Images vary by body jitter, per-image background clutter, camera tint,
//! and pixel noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, ImageF32, ManifestRow, Split};
use dpb_core::error::{CoreError, Result};
use dpb_core::masks::RawParsingMap;

// raw parsing categories used by the generator
const LABEL_BACKGROUND: u8 = 0;
const LABEL_FACE: u8 = 13;
const LABEL_UPPER_CLOTHES: u8 = 5;
const LABEL_PANTS: u8 = 9;
const LABEL_LEFT_SHOE: u8 = 19;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayoutParams {
    /// Horizontal body jitter in pixels, per image.
    pub jitter_x: i32,
    pub jitter_y: i32,
    /// Background clutter rectangles per image, colored like clothing.
    pub clutter: usize,
    /// Clothing color palette size; small values force identity collisions.
    pub palette_size: usize,
    /// Fraction of identities that carry an accessory blob.
    pub accessory_prob: f64,
    /// Camera tint strength (0 disables tinting).
    pub tint_strength: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            jitter_x: 3,
            jitter_y: 2,
            clutter: 4,
            palette_size: 3,
            accessory_prob: 0.75,
            tint_strength: 0.25,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    /// Gaussian pixel noise sigma.
    pub noise: f64,
    pub seed: u64,
    pub layout: LayoutParams,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            train_identities: 24,
            test_identities: 12,
            images_per_identity: 8,
            cameras: 4,
            height: 96,
            width: 32,
            noise: 0.04,
            seed: 7,
            layout: LayoutParams::default(),
        }
    }
}

fn stream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in tag.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= a.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= b.rotate_left(32);
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Per-camera multiplicative tint, keyed by (seed, camera).
pub fn camera_tint(spec: &SyntheticDatasetSpec, camera: usize) -> [f32; 3] {
    let mut rng = stream(spec.seed, "camera", camera as u64, 0);
    let s = spec.layout.tint_strength as f32;
    [
        1.0 - s * rng.gen_range(0.0..1.0f32),
        1.0 - s * rng.gen_range(0.0..1.0f32),
        1.0 - s * rng.gen_range(0.0..1.0f32),
    ]
}

#[derive(Clone)]
struct IdentityAppearance {
    head: [f32; 3],
    torso: [f32; 3],
    legs: [f32; 3],
    shoes: [f32; 3],
    accessory: Option<Accessory>,
}

#[derive(Clone)]
struct Accessory {
    color: [f32; 3],
    /// true: left of the body, false: right.
    left_side: bool,
    /// Size and vertical anchor as fractions of the image height.
    h_frac: f64,
    w_frac: f64,
    y_frac: f64,
}

fn palette(spec: &SyntheticDatasetSpec, tag: &str) -> Vec<[f32; 3]> {
    let mut rng = stream(spec.seed, tag, 0, 0);
    let k = spec.layout.palette_size.max(1);
    let phase: f64 = rng.gen_range(0.0..1.0);
    let value = if tag.ends_with("legs") { 0.45 } else { 0.8 };
    (0..k)
        .map(|i| hsv_to_rgb(phase + i as f64 / k as f64, 0.85, value))
        .collect()
}

fn identity_appearance(spec: &SyntheticDatasetSpec, id: usize) -> IdentityAppearance {
    let torso_palette = palette(spec, "palette-torso");
    let legs_palette = palette(spec, "palette-legs");
    let mut rng = stream(spec.seed, "identity", id as u64, 0);
    let skin = [
        [0.85f32, 0.72, 0.60],
        [0.72, 0.57, 0.44],
        [0.55, 0.41, 0.31],
    ];
    let head = skin[rng.gen_range(0..skin.len())];
    let torso = torso_palette[rng.gen_range(0..torso_palette.len())];
    let legs = legs_palette[rng.gen_range(0..legs_palette.len())];
    let shoes = [
        [0.08f32, 0.08, 0.08],
        [0.35, 0.25, 0.15],
        [0.85, 0.85, 0.85],
    ][rng.gen_range(0..3)];
    let accessory = if rng.gen_bool(spec.layout.accessory_prob) {
        Some(Accessory {
            color: hsv_to_rgb(rng.gen_range(0.0..1.0), 1.0, 0.95),
            left_side: rng.gen_bool(0.5),
            h_frac: rng.gen_range(0.12..0.20),
            w_frac: rng.gen_range(0.18..0.28),
            y_frac: rng.gen_range(0.28..0.45),
        })
    } else {
        None
    };
    IdentityAppearance {
        head,
        torso,
        legs,
        shoes,
        accessory,
    }
}

struct Painter<'a> {
    image: &'a mut ImageF32,
    labels: Option<&'a mut Vec<u8>>,
}

impl<'a> Painter<'a> {
    fn rect(&mut self, y0: i64, x0: i64, h: i64, w: i64, color: [f32; 3], label: Option<u8>) {
        let height = self.image.height as i64;
        let width = self.image.width as i64;
        for y in y0.max(0)..(y0 + h).min(height) {
            for x in x0.max(0)..(x0 + w).min(width) {
                for c in 0..3 {
                    self.image.set(c, y as usize, x as usize, color[c]);
                }
                if let (Some(labels), Some(l)) = (self.labels.as_deref_mut(), label) {
                    labels[(y * width + x) as usize] = l;
                }
            }
        }
    }
}

/// Render one image and its raw label map.
fn render(
    spec: &SyntheticDatasetSpec,
    appearance: &IdentityAppearance,
    id: usize,
    image_index: usize,
    camera: usize,
) -> (ImageF32, RawParsingMap) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream(spec.seed, "image", id as u64, image_index as u64);
    let mut image = ImageF32::new(h, w);
    let mut labels = vec![LABEL_BACKGROUND; h * w];

    // background, slightly varied per image
    let bg = 0.55 + rng.gen_range(-0.05..0.05f32);
    for v in image.data.iter_mut() {
        *v = bg;
    }

    // clutter rectangles, colored like clothing so a global average
    // confuses them with the body
    let torso_palette = palette(spec, "palette-torso");
    let legs_palette = palette(spec, "palette-legs");
    for _ in 0..spec.layout.clutter {
        let mut color = if rng.gen_bool(0.5) {
            torso_palette[rng.gen_range(0..torso_palette.len())]
        } else {
            legs_palette[rng.gen_range(0..legs_palette.len())]
        };
        for c in color.iter_mut() {
            *c = (*c + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0);
        }
        let ch = rng.gen_range(h / 12..h / 4) as i64;
        let cw = rng.gen_range(w / 8..w / 2) as i64;
        let cy = rng.gen_range(0..h) as i64 - ch / 2;
        let cx = rng.gen_range(0..w) as i64 - cw / 2;
        let mut painter = Painter {
            image: &mut image,
            labels: None,
        };
        painter.rect(cy, cx, ch, cw, color, None);
    }

    // body bands over the clutter
    let dx = rng.gen_range(-spec.layout.jitter_x..=spec.layout.jitter_x) as i64;
    let dy = rng.gen_range(-spec.layout.jitter_y..=spec.layout.jitter_y) as i64;
    let cx = w as i64 / 2 + dx;
    let band = |frac: f64| (frac * h as f64) as i64 + dy;
    let half = |frac: f64| (frac * w as f64) as i64;
    let mut painter = Painter {
        image: &mut image,
        labels: Some(&mut labels),
    };
    painter.rect(
        band(0.10),
        cx - half(0.16),
        band(0.22) - band(0.10),
        2 * half(0.16),
        appearance.head,
        Some(LABEL_FACE),
    );
    painter.rect(
        band(0.22),
        cx - half(0.25),
        band(0.55) - band(0.22),
        2 * half(0.25),
        appearance.torso,
        Some(LABEL_UPPER_CLOTHES),
    );
    painter.rect(
        band(0.55),
        cx - half(0.22),
        band(0.83) - band(0.55),
        2 * half(0.22),
        appearance.legs,
        Some(LABEL_PANTS),
    );
    painter.rect(
        band(0.83),
        cx - half(0.19),
        band(0.90) - band(0.83),
        2 * half(0.19),
        appearance.shoes,
        Some(LABEL_LEFT_SHOE),
    );

    // accessory beside the torso; labeled background on purpose
    if let Some(acc) = &appearance.accessory {
        let ah = (acc.h_frac * h as f64) as i64;
        let aw = (acc.w_frac * w as f64) as i64;
        let ay = band(acc.y_frac);
        let ax = if acc.left_side {
            cx - half(0.25) - aw
        } else {
            cx + half(0.25)
        };
        let mut painter = Painter {
            image: &mut image,
            labels: None,
        };
        painter.rect(ay, ax, ah, aw, acc.color, None);
    }

    // camera tint
    let tint = camera_tint(spec, camera);
    for c in 0..3 {
        for p in 0..h * w {
            image.data[c * h * w + p] *= tint[c];
        }
    }

    // pixel noise (Box-Muller)
    if spec.noise > 0.0 {
        for v in image.data.iter_mut() {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v = (*v + (z * spec.noise) as f32).clamp(0.0, 1.0);
        }
    }

    let raw = RawParsingMap::new(w, h, labels).expect("generator labels are in vocabulary");
    (image, raw)
}

/// Write the dataset: `images/`, `labels/`, `manifest.csv`, `spec.json`.
/// Train identities contribute all their images to the train split; test
/// identities put their last-camera images into the query split and the
/// rest into the gallery.
pub fn synth_generate(spec: &SyntheticDatasetSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    if spec.images_per_identity == 0 || spec.cameras == 0 {
        return Err(CoreError::invalid(
            "synthetic dataset needs at least one image and one camera",
        ));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("labels"))?;
    let total = spec.train_identities + spec.test_identities;
    let mut rows = Vec::new();
    for id in 0..total {
        let appearance = identity_appearance(spec, id);
        for j in 0..spec.images_per_identity {
            let camera = j % spec.cameras;
            let (image, raw) = render(spec, &appearance, id, j, camera);
            let name = format!("id{id:04}_img{j:02}");
            let rel = format!("images/{name}.ppm");
            image.to_ppm(&out_dir.join(&rel))?;
            raw.to_pgm(&out_dir.join(format!("labels/{name}.pgm")))?;
            let split = if id < spec.train_identities {
                Split::Train
            } else if camera == spec.cameras - 1 {
                Split::Query
            } else {
                Split::Gallery
            };
            rows.push(ManifestRow {
                path: rel,
                identity: id as i64,
                camera: camera as i64,
                split,
                junk_flag: 0,
            });
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    std::fs::write(
        out_dir.join("spec.json"),
        serde_json::to_string_pretty(spec)?,
    )?;
    Ok(rows)
}
