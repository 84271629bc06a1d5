//! MVTec-style directory layout:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<defect>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```
//!
//! Synthetic corpora export to the same layout, so the disk path is the only
//! ingestion path the pipeline ever exercises.

use crate::data::{Item, ItemKind, LabeledCorpus, Mask, Split};
use crate::error::{Error, Result};
use crate::nn::tensor::{Shape, Tensor4};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use std::fs;
use std::path::{Path, PathBuf};

/// Quantize a 1x3xHxW tensor in [0,1] to an 8-bit RGB image.
pub fn tensor_to_rgb8(t: &Tensor4) -> RgbImage {
    let s = t.shape();
    let plane = s.h * s.w;
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            let px = [
                (t.data()[y * s.w + x] * 255.0).round().clamp(0.0, 255.0) as u8,
                (t.data()[plane + y * s.w + x] * 255.0).round().clamp(0.0, 255.0) as u8,
                (t.data()[2 * plane + y * s.w + x] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Tensor4 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor4::zeros(Shape::new(1, 3, h, w));
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.data_mut()[c * plane + y * w + x] = p[c] as f32 / 255.0;
            }
        }
    }
    t
}

fn mask_to_gray(mask: &Mask) -> GrayImage {
    let mut img = GrayImage::new(mask.w as u32, mask.h as u32);
    for y in 0..mask.h {
        for x in 0..mask.w {
            img.put_pixel(x as u32, y as u32, image::Luma([mask.data[y * mask.w + x] * 255]));
        }
    }
    img
}

fn gray_to_mask(img: &GrayImage) -> Mask {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            // re-binarize at 0.5
            mask.data[y * w + x] = u8::from(img.get_pixel(x as u32, y as u32)[0] > 127);
        }
    }
    mask
}

/// Write an anomaly corpus pair to the MVTec layout under `root/category`.
pub fn export_mvtec_layout(
    root: &Path,
    category: &str,
    train: &LabeledCorpus,
    test: &LabeledCorpus,
) -> Result<()> {
    train.validate()?;
    test.validate()?;
    let cat = root.join(category);
    fs::create_dir_all(cat.join("train/good"))?;
    for item in &train.items {
        tensor_to_rgb8(&item.image)
            .save(cat.join("train/good").join(format!("{}.png", item.name)))?;
    }
    for item in &test.items {
        match &item.kind {
            ItemKind::Normal => {
                let dir = cat.join("test/good");
                fs::create_dir_all(&dir)?;
                tensor_to_rgb8(&item.image).save(dir.join(format!("{}.png", item.name)))?;
            }
            ItemKind::Defect { kind } => {
                let dir = cat.join("test").join(kind);
                let gt = cat.join("ground_truth").join(kind);
                fs::create_dir_all(&dir)?;
                fs::create_dir_all(&gt)?;
                tensor_to_rgb8(&item.image).save(dir.join(format!("{}.png", item.name)))?;
                let mask = item.mask.as_ref().expect("validated defect has mask");
                mask_to_gray(mask).save(gt.join(format!("{}_mask.png", item.name)))?;
            }
            ItemKind::PretextClass { .. } => {
                return Err(Error::Input("pretext items do not belong in an anomaly corpus".into()))
            }
        }
    }
    Ok(())
}

/// Write a pretext corpus as one directory per class.
pub fn export_pretext_layout(root: &Path, corpus: &LabeledCorpus) -> Result<()> {
    for item in &corpus.items {
        let ItemKind::PretextClass { name, .. } = &item.kind else {
            return Err(Error::Input("non-pretext item in pretext corpus".into()));
        };
        let dir = root.join("pretext").join(name);
        fs::create_dir_all(&dir)?;
        tensor_to_rgb8(&item.image).save(dir.join(format!("{}.png", item.name)))?;
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    out.sort();
    Ok(out)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

fn load_image_resized(path: &Path, size: usize) -> Result<Tensor4> {
    let img = image::open(path)?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        other => other.to_rgb8(),
    };
    let rgb = if rgb.width() as usize != size || rgb.height() as usize != size {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    } else {
        rgb
    };
    Ok(rgb8_to_tensor(&rgb))
}

fn load_mask_resized(path: &Path, size: usize) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest)
    } else {
        img
    };
    Ok(gray_to_mask(&img))
}

fn stem_of(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Load one category from the MVTec layout, resizing everything to
/// `image_size` (triangle filter for images, nearest + re-binarize for
/// masks).
pub fn load_mvtec_layout(
    root: &Path,
    category: &str,
    image_size: usize,
) -> Result<(LabeledCorpus, LabeledCorpus)> {
    let cat = root.join(category);
    let train_good = cat.join("train/good");
    if !train_good.is_dir() {
        return Err(Error::Ingestion(format!(
            "missing train/good directory under {}",
            cat.display()
        )));
    }

    let mut train_items = Vec::new();
    for path in sorted_entries(&train_good)? {
        if !is_image_file(&path) {
            continue;
        }
        train_items.push(Item {
            name: stem_of(&path),
            image: load_image_resized(&path, image_size)?,
            kind: ItemKind::Normal,
            mask: None,
        });
    }
    if train_items.is_empty() {
        return Err(Error::Ingestion(format!(
            "empty train split under {}",
            train_good.display()
        )));
    }

    let mut test_items = Vec::new();
    let test_dir = cat.join("test");
    if test_dir.is_dir() {
        for defect_dir in sorted_entries(&test_dir)? {
            if !defect_dir.is_dir() {
                continue;
            }
            let label = stem_of(&defect_dir);
            for path in sorted_entries(&defect_dir)? {
                if !is_image_file(&path) {
                    continue;
                }
                let image = load_image_resized(&path, image_size)?;
                if label == "good" {
                    test_items.push(Item {
                        name: stem_of(&path),
                        image,
                        kind: ItemKind::Normal,
                        mask: None,
                    });
                } else {
                    let mask_path = cat
                        .join("ground_truth")
                        .join(&label)
                        .join(format!("{}_mask.png", stem_of(&path)));
                    if !mask_path.is_file() {
                        return Err(Error::Ingestion(format!(
                            "missing ground-truth mask {} for defect image {}",
                            mask_path.display(),
                            path.display()
                        )));
                    }
                    test_items.push(Item {
                        name: stem_of(&path),
                        image,
                        kind: ItemKind::Defect { kind: label.clone() },
                        mask: Some(load_mask_resized(&mask_path, image_size)?),
                    });
                }
            }
        }
    }

    let train = LabeledCorpus {
        split: Split::Train,
        category: category.to_string(),
        items: train_items,
    };
    let test = LabeledCorpus {
        split: Split::Test,
        category: category.to_string(),
        items: test_items,
    };
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{default_defect_specs, gen_synthetic, TextureSpec};

    #[test]
    fn export_then_load_roundtrips_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) =
            gen_synthetic(3, 2, 4, 64, &TextureSpec::default(), &default_defect_specs(), 21).unwrap();
        export_mvtec_layout(dir.path(), "synthetic", &train, &test).unwrap();
        let (ltrain, ltest) = load_mvtec_layout(dir.path(), "synthetic", 64).unwrap();
        assert_eq!(ltrain.len(), 3);
        assert_eq!(ltest.len(), 6);
        assert!(ltrain.items.iter().all(|i| !i.is_defect()));
        // Images roundtrip through 8-bit quantization exactly (values were
        // quantized on export, so load reproduces them bit-for-bit).
        let exported = tensor_to_rgb8(&train.items[0].image);
        let reloaded = tensor_to_rgb8(&ltrain.items[0].image);
        assert_eq!(exported.as_raw(), reloaded.as_raw());
        // Defect items keep their masks; labels come from directory names.
        for item in ltest.items.iter().filter(|i| i.is_defect()) {
            assert!(item.mask.as_ref().unwrap().positive_count() > 0);
            let ItemKind::Defect { kind } = &item.kind else { panic!() };
            assert!(["scratch", "blob", "color_shift", "crack"].contains(&kind.as_str()));
        }
    }

    #[test]
    fn missing_mask_is_an_ingestion_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) =
            gen_synthetic(2, 2, 2, 64, &TextureSpec::default(), &default_defect_specs(), 22).unwrap();
        export_mvtec_layout(dir.path(), "synthetic", &train, &test).unwrap();
        // Remove one mask file.
        let gt = dir.path().join("synthetic/ground_truth");
        let defect_dir = sorted_entries(&gt).unwrap().into_iter().next().unwrap();
        let mask_file = sorted_entries(&defect_dir).unwrap().into_iter().next().unwrap();
        std::fs::remove_file(&mask_file).unwrap();
        let err = load_mvtec_layout(dir.path(), "synthetic", 64).unwrap_err();
        match err {
            Error::Ingestion(msg) => assert!(msg.contains("_mask.png"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_train_split_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("cat/train/good")).unwrap();
        let err = load_mvtec_layout(dir.path(), "cat", 64).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    #[test]
    fn loader_resizes_to_requested_size() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) =
            gen_synthetic(2, 2, 2, 64, &TextureSpec::default(), &default_defect_specs(), 23).unwrap();
        export_mvtec_layout(dir.path(), "synthetic", &train, &test).unwrap();
        let (ltrain, ltest) = load_mvtec_layout(dir.path(), "synthetic", 32).unwrap();
        assert_eq!(ltrain.items[0].image.shape(), Shape::new(1, 3, 32, 32));
        let defect = ltest.items.iter().find(|i| i.is_defect()).unwrap();
        let m = defect.mask.as_ref().unwrap();
        assert_eq!((m.h, m.w), (32, 32));
        assert!(m.data.iter().all(|&v| v == 0 || v == 1));
        ltrain.validate().unwrap();
    }
}
