//! Procedural texture corpora with injected pixel-exact defects.
//!
//! Normal images are stationary textures (band-limited value noise, stripes,
//! checker) with small per-image jitter. Defect images start from a clean
//! base and overwrite pixels along scratches, blobs, tint patches, and
//! crack polylines; the ground-truth mask is exactly the set of pixels that
//! changed. The pretext corpus provides k visually distinct texture families
//! for teacher pretraining.

use crate::data::{Item, ItemKind, LabeledCorpus, Mask, Split};
use crate::error::{Error, Result};
use crate::nn::init::{below, rng_from, uniform};
use crate::nn::tensor::{Shape, Tensor4};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    SmoothNoise,
    Stripes,
    Checker,
}

impl TextureKind {
    pub fn parse(s: &str) -> Result<TextureKind> {
        match s {
            "smooth" | "smooth-noise" => Ok(TextureKind::SmoothNoise),
            "stripes" => Ok(TextureKind::Stripes),
            "checker" => Ok(TextureKind::Checker),
            other => Err(Error::config(format!("unknown texture kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    /// Feature size in pixels.
    pub period: f64,
    /// Contrast around the base color.
    pub amplitude: f64,
    pub base: [f64; 3],
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            kind: TextureKind::SmoothNoise,
            period: 16.0,
            amplitude: 0.30,
            base: [0.55, 0.50, 0.45],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefectKind {
    Scratch,
    Blob,
    ColorShift,
    Crack,
}

impl DefectKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Blob => "blob",
            DefectKind::ColorShift => "color_shift",
            DefectKind::Crack => "crack",
        }
    }
}

/// One defect family: geometry size range (pixels), intensity range of the
/// pixel change, and how many instances to paint per image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub size: (usize, usize),
    pub intensity: (f64, f64),
    pub count: (usize, usize),
}

pub fn default_defect_specs() -> Vec<DefectSpec> {
    vec![
        DefectSpec { kind: DefectKind::Scratch, size: (10, 26), intensity: (0.25, 0.50), count: (1, 2) },
        DefectSpec { kind: DefectKind::Blob, size: (3, 7), intensity: (0.25, 0.50), count: (1, 2) },
        DefectSpec { kind: DefectKind::ColorShift, size: (4, 9), intensity: (0.18, 0.35), count: (1, 1) },
        DefectSpec { kind: DefectKind::Crack, size: (14, 34), intensity: (0.30, 0.55), count: (1, 1) },
    ]
}

// ---------------------------------------------------------------------------
// texture fields
// ---------------------------------------------------------------------------

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Band-limited value noise: random lattice values blended with smoothstep.
fn value_noise(size: usize, period: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = ((size as f64 / period).ceil() as usize) + 2;
    let mut lattice = vec![0.0f64; cells * cells];
    for v in lattice.iter_mut() {
        *v = uniform(rng, -1.0, 1.0);
    }
    let mut out = vec![0.0f64; size * size];
    for y in 0..size {
        let gy = y as f64 / period;
        let y0 = gy.floor() as usize;
        let ty = smoothstep(gy - gy.floor());
        for x in 0..size {
            let gx = x as f64 / period;
            let x0 = gx.floor() as usize;
            let tx = smoothstep(gx - gx.floor());
            let v00 = lattice[y0 * cells + x0];
            let v01 = lattice[y0 * cells + x0 + 1];
            let v10 = lattice[(y0 + 1) * cells + x0];
            let v11 = lattice[(y0 + 1) * cells + x0 + 1];
            let top = v00 + tx * (v01 - v00);
            let bot = v10 + tx * (v11 - v10);
            out[y * size + x] = top + ty * (bot - top);
        }
    }
    out
}

/// Scalar field in [-1, 1] for one image of the given texture.
fn texture_field(spec: &TextureSpec, size: usize, corpus_seed: u64, image_label: &str) -> Vec<f64> {
    let mut rng = rng_from(corpus_seed, image_label);
    match spec.kind {
        TextureKind::SmoothNoise => {
            let coarse = value_noise(size, spec.period, &mut rng);
            let fine = value_noise(size, (spec.period / 2.0).max(2.0), &mut rng);
            coarse
                .iter()
                .zip(fine)
                .map(|(c, f)| 0.75 * c + 0.25 * f)
                .collect()
        }
        TextureKind::Stripes => {
            // Orientation is a corpus-level property; phase jitters per image.
            let mut corpus_rng = rng_from(corpus_seed, "texture/orientation");
            let angle = uniform(&mut corpus_rng, 0.0, std::f64::consts::PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            let phase = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let freq = std::f64::consts::TAU / spec.period;
            let mut out = vec![0.0f64; size * size];
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 * ca + y as f64 * sa) * freq + phase;
                    out[y * size + x] = t.sin();
                }
            }
            out
        }
        TextureKind::Checker => {
            let ox = uniform(&mut rng, 0.0, spec.period);
            let oy = uniform(&mut rng, 0.0, spec.period);
            let mut out = vec![0.0f64; size * size];
            for y in 0..size {
                for x in 0..size {
                    let cx = ((x as f64 + ox) / spec.period).floor() as i64;
                    let cy = ((y as f64 + oy) / spec.period).floor() as i64;
                    out[y * size + x] = if (cx + cy) % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
            out
        }
    }
}

const CHANNEL_GAIN: [f64; 3] = [1.0, 0.9, 0.8];

fn render_normal(spec: &TextureSpec, size: usize, corpus_seed: u64, image_label: &str) -> Tensor4 {
    let field = texture_field(spec, size, corpus_seed, image_label);
    let mut jitter_rng = rng_from(corpus_seed, &format!("{image_label}/jitter"));
    let brightness = uniform(&mut jitter_rng, -0.03, 0.03);
    let mut img = Tensor4::zeros(Shape::new(1, 3, size, size));
    for c in 0..3 {
        let chan = &mut img.data_mut()[c * size * size..(c + 1) * size * size];
        for (i, v) in field.iter().enumerate() {
            let val = spec.base[c] + brightness + spec.amplitude * CHANNEL_GAIN[c] * v;
            chan[i] = val.clamp(0.0, 1.0) as f32;
        }
    }
    img
}

// ---------------------------------------------------------------------------
// defects
// ---------------------------------------------------------------------------

/// Overwrite one pixel, pushing each selected channel away from its current
/// value by `delta` toward whichever bound has headroom.
fn paint_pixel(img: &mut Tensor4, x: usize, y: usize, delta: f64, channels: &[usize]) {
    let size = img.shape().w;
    let plane = img.shape().h * size;
    for &c in channels {
        let i = c * plane + y * size + x;
        let old = img.data()[i] as f64;
        let target = if old + delta <= 1.0 { old + delta } else { old - delta };
        img.data_mut()[i] = target.clamp(0.0, 1.0) as f32;
    }
}

fn paint_disk(img: &mut Tensor4, cx: i64, cy: i64, r: i64, delta: f64, channels: &[usize]) {
    let size = img.shape().w as i64;
    for y in (cy - r).max(0)..=(cy + r).min(size - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(size - 1) {
            if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                paint_pixel(img, x as usize, y as usize, delta, channels);
            }
        }
    }
}

fn apply_defect(img: &mut Tensor4, spec: &DefectSpec, rng: &mut ChaCha8Rng) {
    let size = img.shape().w;
    let all = [0usize, 1, 2];
    let delta_sign = if below(rng, 2) == 0 { 1.0 } else { -1.0 };
    let delta = uniform(rng, spec.intensity.0, spec.intensity.1) * delta_sign;
    // paint_pixel chooses the feasible direction itself, so use |delta| and
    // let the sign pick via headroom only when pushing up is impossible.
    let delta = delta.abs();
    match spec.kind {
        DefectKind::Scratch => {
            let len = below(rng, spec.size.1 - spec.size.0 + 1) + spec.size.0;
            let x0 = below(rng, size) as f64;
            let y0 = below(rng, size) as f64;
            let angle = uniform(rng, 0.0, std::f64::consts::TAU);
            let thick = 1 + below(rng, 2) as i64;
            for t in 0..len {
                let x = x0 + t as f64 * angle.cos();
                let y = y0 + t as f64 * angle.sin();
                paint_disk(img, x.round() as i64, y.round() as i64, thick - 1, delta, &all);
            }
        }
        DefectKind::Blob => {
            let r = (below(rng, spec.size.1 - spec.size.0 + 1) + spec.size.0) as i64;
            let cx = below(rng, size) as i64;
            let cy = below(rng, size) as i64;
            paint_disk(img, cx, cy, r, delta, &all);
        }
        DefectKind::ColorShift => {
            let r = (below(rng, spec.size.1 - spec.size.0 + 1) + spec.size.0) as i64;
            let cx = below(rng, size) as i64;
            let cy = below(rng, size) as i64;
            let channel = below(rng, 3);
            paint_disk(img, cx, cy, r, delta, &[channel]);
        }
        DefectKind::Crack => {
            let steps = below(rng, spec.size.1 - spec.size.0 + 1) + spec.size.0;
            let mut x = below(rng, size) as f64;
            let mut y = below(rng, size) as f64;
            let mut dir = uniform(rng, 0.0, std::f64::consts::TAU);
            for _ in 0..steps {
                paint_disk(img, x.round() as i64, y.round() as i64, 0, delta, &all);
                dir += uniform(rng, -0.6, 0.6);
                x = (x + dir.cos()).clamp(0.0, (size - 1) as f64);
                y = (y + dir.sin()).clamp(0.0, (size - 1) as f64);
            }
        }
    }
}

/// Mask of pixels where the two images differ in any channel.
fn changed_pixels(clean: &Tensor4, dirty: &Tensor4) -> Mask {
    let s = clean.shape();
    let plane = s.h * s.w;
    let mut mask = Mask::zeros(s.h, s.w);
    for p in 0..plane {
        for c in 0..3 {
            if clean.data()[c * plane + p] != dirty.data()[c * plane + p] {
                mask.data[p] = 1;
                break;
            }
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// corpus generators
// ---------------------------------------------------------------------------

/// Deterministic synthetic anomaly corpus: `n_train` normal training images,
/// plus a test split of normal and defective images with pixel-exact masks.
pub fn gen_synthetic(
    n_train: usize,
    n_test_normal: usize,
    n_test_defect: usize,
    size: usize,
    texture: &TextureSpec,
    defects: &[DefectSpec],
    seed: u64,
) -> Result<(LabeledCorpus, LabeledCorpus)> {
    if n_train == 0 || n_test_normal == 0 || n_test_defect == 0 {
        return Err(Error::config("corpus counts must all be >= 1"));
    }
    if defects.is_empty() {
        return Err(Error::config("at least one defect spec is required"));
    }
    for d in defects {
        if d.size.1 >= size {
            return Err(Error::config(format!(
                "defect size {} does not fit a {size}px image",
                d.size.1
            )));
        }
        if d.size.0 > d.size.1 || d.intensity.0 > d.intensity.1 || d.count.0 > d.count.1 || d.count.0 == 0 {
            return Err(Error::config("defect spec ranges must be non-empty"));
        }
    }

    let train_items: Vec<Item> = (0..n_train)
        .into_par_iter()
        .map(|i| Item {
            name: format!("{i:03}"),
            image: render_normal(texture, size, seed, &format!("train/{i}")),
            kind: ItemKind::Normal,
            mask: None,
        })
        .collect();

    let normal_items: Vec<Item> = (0..n_test_normal)
        .into_par_iter()
        .map(|i| Item {
            name: format!("{i:03}"),
            image: render_normal(texture, size, seed, &format!("test-normal/{i}")),
            kind: ItemKind::Normal,
            mask: None,
        })
        .collect();

    let defect_items: Vec<Item> = (0..n_test_defect)
        .into_par_iter()
        .map(|i| {
            let clean = render_normal(texture, size, seed, &format!("test-defect/{i}"));
            let spec = &defects[i % defects.len()];
            let mut rng = rng_from(seed, &format!("defect/{i}"));
            let mut dirty = clean.clone();
            let count = below(&mut rng, spec.count.1 - spec.count.0 + 1) + spec.count.0;
            for _ in 0..count {
                apply_defect(&mut dirty, spec, &mut rng);
            }
            let mask = changed_pixels(&clean, &dirty);
            assert!(mask.positive_count() > 0, "defect image {i} changed no pixels");
            Item {
                name: format!("{i:03}"),
                image: dirty,
                kind: ItemKind::Defect { kind: spec.kind.name().to_string() },
                mask: Some(mask),
            }
        })
        .collect();

    let train = LabeledCorpus {
        split: Split::Train,
        category: "synthetic".to_string(),
        items: train_items,
    };
    let mut test_items = normal_items;
    test_items.extend(defect_items);
    let test = LabeledCorpus {
        split: Split::Test,
        category: "synthetic".to_string(),
        items: test_items,
    };
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

/// Names and base colors of the pretext texture families.
const PRETEXT_FAMILIES: [(&str, [f64; 3]); 8] = [
    ("stripes_h", [0.62, 0.42, 0.42]),
    ("stripes_v", [0.42, 0.62, 0.42]),
    ("stripes_d", [0.42, 0.42, 0.62]),
    ("checker", [0.60, 0.60, 0.36]),
    ("dots", [0.36, 0.60, 0.60]),
    ("smooth", [0.60, 0.36, 0.60]),
    ("coarse", [0.50, 0.50, 0.50]),
    ("gradient", [0.66, 0.50, 0.36]),
];

fn render_pretext(class: usize, size: usize, seed: u64, idx: usize) -> Tensor4 {
    let (name, base) = PRETEXT_FAMILIES[class];
    let label = format!("pretext/{name}/{idx}");
    let mut rng = rng_from(seed, &label);
    let amplitude = uniform(&mut rng, 0.22, 0.38);
    let mut img = Tensor4::zeros(Shape::new(1, 3, size, size));
    let field: Vec<f64> = match name {
        "stripes_h" | "stripes_v" | "stripes_d" => {
            let period = uniform(&mut rng, 6.0, 12.0);
            let phase = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let (ca, sa) = match name {
                "stripes_h" => (0.0, 1.0),
                "stripes_v" => (1.0, 0.0),
                _ => (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
            };
            let freq = std::f64::consts::TAU / period;
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    ((x * ca + y * sa) * freq + phase).sin()
                })
                .collect()
        }
        "checker" => {
            let period = uniform(&mut rng, 6.0, 12.0);
            let ox = uniform(&mut rng, 0.0, period);
            let oy = uniform(&mut rng, 0.0, period);
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    let cx = ((x + ox) / period).floor() as i64;
                    let cy = ((y + oy) / period).floor() as i64;
                    if (cx + cy) % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect()
        }
        "dots" => {
            let spacing = uniform(&mut rng, 8.0, 14.0);
            let r = spacing * 0.3;
            let ox = uniform(&mut rng, 0.0, spacing);
            let oy = uniform(&mut rng, 0.0, spacing);
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64 + ox, (i / size) as f64 + oy);
                    let dx = x - (x / spacing).round() * spacing;
                    let dy = y - (y / spacing).round() * spacing;
                    if dx * dx + dy * dy <= r * r {
                        1.0
                    } else {
                        -0.6
                    }
                })
                .collect()
        }
        "smooth" => value_noise(size, uniform(&mut rng, 12.0, 20.0), &mut rng),
        "coarse" => value_noise(size, uniform(&mut rng, 3.0, 5.0), &mut rng),
        "gradient" => {
            let dir = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let (ca, sa) = (dir.cos(), dir.sin());
            let diag = size as f64 * std::f64::consts::SQRT_2;
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    2.0 * (x * ca + y * sa) / diag
                })
                .collect()
        }
        _ => unreachable!(),
    };
    for c in 0..3 {
        let chan = &mut img.data_mut()[c * size * size..(c + 1) * size * size];
        for (i, v) in field.iter().enumerate() {
            chan[i] = (base[c] + amplitude * CHANNEL_GAIN[c] * v).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// Balanced k-class texture-family corpus for teacher pretraining.
pub fn gen_pretext(k_classes: usize, n_per_class: usize, size: usize, seed: u64) -> Result<LabeledCorpus> {
    if !(2..=PRETEXT_FAMILIES.len()).contains(&k_classes) {
        return Err(Error::config(format!(
            "pretext classes must be in 2..={}, got {k_classes}",
            PRETEXT_FAMILIES.len()
        )));
    }
    if n_per_class == 0 {
        return Err(Error::config("pretext images per class must be >= 1"));
    }
    let items: Vec<Item> = (0..k_classes * n_per_class)
        .into_par_iter()
        .map(|i| {
            let class = i / n_per_class;
            let idx = i % n_per_class;
            Item {
                name: format!("{}_{idx:03}", PRETEXT_FAMILIES[class].0),
                image: render_pretext(class, size, seed, idx),
                kind: ItemKind::PretextClass {
                    class,
                    name: PRETEXT_FAMILIES[class].0.to_string(),
                },
                mask: None,
            }
        })
        .collect();
    Ok(LabeledCorpus {
        split: Split::Train,
        category: "pretext".to_string(),
        items,
    })
}
