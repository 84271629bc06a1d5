//! Teacher pretraining on a synthetic texture-classification pretext task.
//!
//! A temporary global-average-pool + linear head is attached, the network is
//! trained with cross-entropy, the head is discarded, and the network is
//! frozen. Held-out accuracy is stored as metadata so downstream tooling can
//! tell an informative teacher from a random one.

use crate::backbones::{Level, Mode, Network};
use crate::data::{batch_iter, stack_batch, ItemKind, LabeledCorpus, Split};
use crate::error::{Error, Result};
use crate::nn::init::{he_normal, permutation, rng_from};
use crate::nn::kernels as k;
use crate::nn::params::{ParamSet, Parameter};
use crate::nn::sgd::{sgd_step, SgdConfig};
use crate::nn::tape::Tape;
use crate::nn::tensor::{Shape, Tensor4};

#[derive(Clone, Debug)]
pub struct PretextConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fraction of the corpus held out for the accuracy estimate.
    pub holdout_frac: f64,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            epochs: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            holdout_frac: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretextOutcome {
    pub accuracy: f64,
    pub classes: usize,
    /// True when accuracy did not clear chance + 0.05; the teacher is
    /// probably uninformative but still usable.
    pub warned: bool,
    pub epoch_losses: Vec<f64>,
}

fn class_of(item_kind: &ItemKind) -> Result<usize> {
    match item_kind {
        ItemKind::PretextClass { class, .. } => Ok(*class),
        _ => Err(Error::Input("pretext corpus must contain only pretext-class items".into())),
    }
}

/// Train `net` on the pretext task, then freeze it with its held-out
/// accuracy recorded. The classification head never leaves this function.
pub fn pretrain_teacher(
    net: &mut Network<f32>,
    pretext: &LabeledCorpus,
    cfg: &PretextConfig,
) -> Result<PretextOutcome> {
    if net.frozen {
        return Err(Error::state("cannot pretrain a frozen network"));
    }
    if pretext.split != Split::Train || pretext.is_empty() {
        return Err(Error::Input("pretext corpus must be a non-empty train split".into()));
    }
    let labels: Vec<usize> = pretext
        .items
        .iter()
        .map(|i| class_of(&i.kind))
        .collect::<Result<_>>()?;
    let k_classes = labels.iter().max().unwrap() + 1;
    if k_classes < 2 {
        return Err(Error::Input("pretext task needs at least 2 classes".into()));
    }

    // Held-out split from a seeded permutation.
    let mut split_rng = rng_from(cfg.seed, "pretext/split");
    let perm = permutation(&mut split_rng, pretext.len());
    let n_hold = ((pretext.len() as f64 * cfg.holdout_frac).round() as usize)
        .clamp(1, pretext.len() - 1);
    let holdout_idx: Vec<usize> = perm[..n_hold].to_vec();
    let train_idx: Vec<usize> = perm[n_hold..].to_vec();

    // Temporary head.
    let bottleneck_c = net.spec.as_pyramid()?.channels[3];
    let mut head = ParamSet::new();
    let mut head_rng = rng_from(cfg.seed, "pretext/head");
    head.insert(
        "fc.weight",
        Parameter::new(he_normal(Shape::new(k_classes, bottleneck_c, 1, 1), bottleneck_c, &mut head_rng), true),
    );
    head.insert(
        "fc.bias",
        Parameter::new(Tensor4::zeros(Shape::new(1, k_classes, 1, 1)), true),
    );

    let sgd_cfg = SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for batch in batch_iter(train_idx.len(), cfg.batch_size, cfg.seed, epoch)? {
            let indices: Vec<usize> = batch.iter().map(|&b| train_idx[b]).collect();
            let x = stack_batch(pretext, &indices);
            let batch_labels: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let xid = tape.constant(x);
            let fwd = net.forward_pyramid_tape(&mut tape, xid, Mode::Train, Level::ThirtySecond)?;
            let pooled = tape.global_avg_pool(*fwd.taps.get(Level::ThirtySecond));
            let wid = tape.leaf(head.get("fc.weight").value.clone(), true);
            let bid = tape.leaf(head.get("fc.bias").value.clone(), true);
            let logits = tape.linear(pooled, wid, bid)?;
            let loss = tape.softmax_cross_entropy(logits, batch_labels)?;
            tape.backward(loss)?;

            net.pull_grads(&tape, &fwd.bound);
            if let Some(g) = tape.grad(wid) {
                head.get_mut("fc.weight").accumulate_grad(g);
            }
            if let Some(g) = tape.grad(bid) {
                head.get_mut("fc.bias").accumulate_grad(g);
            }
            sgd_step(&mut net.params, &sgd_cfg)?;
            sgd_step(&mut head, &sgd_cfg)?;
            net.apply_bn_updates(&fwd.bn_updates);

            epoch_loss += tape.value(loss).scalar_value() as f64 * indices.len() as f64;
            seen += indices.len();
        }
        epoch_losses.push(epoch_loss / seen as f64);
    }

    // Held-out accuracy with the trained head, eval-mode features.
    let mut correct = 0usize;
    for chunk in holdout_idx.chunks(cfg.batch_size) {
        let x = stack_batch(pretext, chunk);
        let feats = net.features_eval(&x, Level::ThirtySecond)?;
        let pooled = k::global_avg_pool_fwd(feats.get(Level::ThirtySecond));
        let logits = k::linear_fwd(&pooled, &head.get("fc.weight").value, &head.get("fc.bias").value)?;
        for (bi, &idx) in chunk.iter().enumerate() {
            let row = &logits.data()[bi * k_classes..(bi + 1) * k_classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == labels[idx] {
                correct += 1;
            }
        }
    }
    let accuracy = correct as f64 / holdout_idx.len() as f64;

    net.freeze();
    net.pretext_accuracy = Some(accuracy);
    Ok(PretextOutcome {
        accuracy,
        classes: k_classes,
        warned: accuracy <= 1.0 / k_classes as f64 + 0.05,
        epoch_losses,
    })
}

/// Skip-pretraining path: freeze the network as-is; metadata records no
/// accuracy. Useful for fast tests and ablation baselines.
pub fn freeze_untrained(net: &mut Network<f32>) {
    net.freeze();
    net.pretext_accuracy = None;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{build_network, NetSpec, PyramidSpec, Role};
    use crate::data::synthetic::gen_pretext;

    fn tiny_spec() -> PyramidSpec {
        PyramidSpec { stem_channels: 8, blocks: [1, 1, 1, 1], channels: [8, 16, 24, 32] }
    }

    #[test]
    fn pretraining_learns_the_tiny_task_and_freezes() {
        let corpus = gen_pretext(3, 20, 32, 41).unwrap();
        let mut net = build_network(Role::TeacherA, NetSpec::Pyramid(tiny_spec()), 41).unwrap();
        let cfg = PretextConfig { epochs: 6, batch_size: 16, seed: 41, ..Default::default() };
        let out = pretrain_teacher(&mut net, &corpus, &cfg).unwrap();
        assert!(net.frozen);
        assert_eq!(net.pretext_accuracy, Some(out.accuracy));
        assert!(out.accuracy > 1.0 / 3.0 + 0.05, "accuracy {}", out.accuracy);
        assert!(!out.warned);
        // Head is gone: no fc parameters on the network.
        assert!(!net.params.contains("fc.weight"));
        // Loss moved downward overall.
        assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
    }

    #[test]
    fn freeze_untrained_keeps_accuracy_null_and_runs() {
        let mut net = build_network(Role::TeacherA, NetSpec::Pyramid(tiny_spec()), 2).unwrap();
        freeze_untrained(&mut net);
        assert!(net.frozen);
        assert_eq!(net.pretext_accuracy, None);
        let x = Tensor4::zeros(Shape::new(1, 3, 32, 32));
        net.features_eval(&x, Level::Sixteenth).unwrap();
    }

    #[test]
    fn pretraining_a_frozen_net_is_a_state_error() {
        let corpus = gen_pretext(2, 4, 32, 1).unwrap();
        let mut net = build_network(Role::TeacherA, NetSpec::Pyramid(tiny_spec()), 1).unwrap();
        net.freeze();
        assert!(matches!(
            pretrain_teacher(&mut net, &corpus, &PretextConfig::default()),
            Err(Error::State(_))
        ));
    }
}
