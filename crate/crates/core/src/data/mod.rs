//! Corpus handling: labeled image collections, deterministic batching, the
//! synthetic defect generator, and MVTec-style directory ingestion/export.

pub mod mvtec;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::nn::init;
use crate::nn::tensor::{Shape, Tensor4};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Test,
}

/// Binary per-pixel defect mask (1 = defective).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Mask {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn positive_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ItemKind {
    Normal,
    Defect { kind: String },
    /// Pretext classification sample (teacher pretraining).
    PretextClass { class: usize, name: String },
}

#[derive(Clone, Debug)]
pub struct Item {
    pub name: String,
    /// 1x3xHxW image with values in [0, 1].
    pub image: Tensor4,
    pub kind: ItemKind,
    pub mask: Option<Mask>,
}

impl Item {
    pub fn is_defect(&self) -> bool {
        matches!(self.kind, ItemKind::Defect { .. })
    }

    pub fn label01(&self) -> u8 {
        if self.is_defect() {
            1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledCorpus {
    pub split: Split,
    pub category: String,
    pub items: Vec<Item>,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.items.first().map(|i| {
            let s = i.image.shape();
            (s.h, s.w)
        })
    }

    /// Enforce corpus invariants: a train split holds only normal items,
    /// every defect item carries a mask matching its image dims, and pixel
    /// values stay inside [0, 1].
    pub fn validate(&self) -> Result<()> {
        for item in &self.items {
            let s = item.image.shape();
            if s.n != 1 || s.c != 3 {
                return Err(Error::Input(format!(
                    "item '{}' must be a 1x3xHxW image, got {s}",
                    item.name
                )));
            }
            if self.split == Split::Train && item.is_defect() {
                return Err(Error::Input(format!(
                    "train split contains defect item '{}'; training is one-class",
                    item.name
                )));
            }
            if item.is_defect() {
                match &item.mask {
                    None => {
                        return Err(Error::Input(format!("defect item '{}' has no mask", item.name)))
                    }
                    Some(m) => {
                        if m.h != s.h || m.w != s.w {
                            return Err(Error::Input(format!(
                                "mask dims {}x{} do not match image {}x{} for '{}'",
                                m.h, m.w, s.h, s.w, item.name
                            )));
                        }
                        if m.positive_count() == 0 {
                            return Err(Error::Input(format!(
                                "defect item '{}' has an empty mask",
                                item.name
                            )));
                        }
                    }
                }
            }
            for &v in item.image.data() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Input(format!(
                        "item '{}' has pixel value {v} outside [0, 1]",
                        item.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Seeded batch schedule for one epoch: a permutation of item indices cut
/// into `batch_size` chunks, keeping the final partial batch.
pub fn batch_iter(n_items: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n_items == 0 {
        return Err(Error::Input("batch iteration over an empty corpus".to_string()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let mut rng = init::rng_from(seed, &format!("batch/epoch-{epoch}"));
    let perm = init::permutation(&mut rng, n_items);
    Ok(perm.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Stack corpus items into an (B, 3, H, W) batch in the given index order.
pub fn stack_batch(corpus: &LabeledCorpus, indices: &[usize]) -> Tensor4 {
    let (h, w) = corpus.image_size().expect("non-empty corpus");
    let mut batch = Tensor4::zeros(Shape::new(indices.len(), 3, h, w));
    for (bi, &idx) in indices.iter().enumerate() {
        let img = &corpus.items[idx].image;
        batch.image_mut(bi).copy_from_slice(img.data());
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_iter_partitions_with_partial_tail() {
        let batches = batch_iter(10, 4, 1, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_iter_is_seed_and_epoch_sensitive() {
        let a = batch_iter(32, 8, 5, 0).unwrap();
        let b = batch_iter(32, 8, 5, 0).unwrap();
        let c = batch_iter(32, 8, 5, 1).unwrap();
        let d = batch_iter(32, 8, 6, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn batch_iter_rejects_empty_corpus() {
        assert!(matches!(batch_iter(0, 4, 1, 0), Err(Error::Input(_))));
    }
}
