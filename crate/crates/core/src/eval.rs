//! ROC-AUC evaluation (rank-based Mann-Whitney with half-credit ties) and
//! the ablation harness: baseline vs dual fusion, attention on/off,
//! per-resolution scoring, and optional teacher-swap bundles.

use crate::anomaly::{
    image_score, maps_from_features, AnomalyMap, ImageFeatures, MapOptions,
};
use crate::backbones::bundle::ModelBundle;
use crate::backbones::{Level, DISTILL_LEVELS};
use crate::data::{LabeledCorpus, Mask, Split};
use crate::error::{Error, Result};
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// ROC AUC
// ---------------------------------------------------------------------------

/// Area under the ROC curve via midranks, equal to the Mann-Whitney
/// statistic P(score_pos > score_neg) + 0.5 P(tie). O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("scores must be finite".to_string()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Metric("labels must be 0 or 1".to_string()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUC needs at least one positive and one negative label".to_string(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Midranks over tie groups; ranks are 1-based.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Exhaustive O(n^2) pairwise oracle for [`roc_auc`]; test/verification use.
pub fn roc_auc_pairwise_oracle(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric("single-class labels".to_string()));
    }
    let mut credit = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (pos.len() as f64 * neg.len() as f64))
}

/// Pixel-level AUC over the pooled pixel population of a whole test set.
/// `masks[i]` of `None` marks a defect-free image (all-negative pixels).
pub fn pixel_auc(maps: &[AnomalyMap], masks: &[Option<&Mask>]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Metric("one mask slot per map required".to_string()));
    }
    let total: usize = maps.iter().map(|m| m.data.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (map, mask) in maps.iter().zip(masks) {
        if let Some(m) = mask {
            if m.h != map.h || m.w != map.w {
                return Err(Error::Metric(format!(
                    "mask {}x{} does not match map {}x{}",
                    m.h, m.w, map.h, map.w
                )));
            }
        }
        for (i, &v) in map.data.iter().enumerate() {
            scores.push(v as f64);
            labels.push(mask.map(|m| m.data[i]).unwrap_or(0));
        }
    }
    roc_auc(&scores, &labels)
}

/// Mean of per-image pixel AUCs over images that contain both classes;
/// the alternative pooling exposed behind a flag.
pub fn pixel_auc_per_image_mean(maps: &[AnomalyMap], masks: &[Option<&Mask>]) -> Result<f64> {
    let mut aucs = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let Some(m) = mask else { continue };
        let pos = m.positive_count();
        if pos == 0 || pos == m.data.len() {
            continue;
        }
        let scores: Vec<f64> = map.data.iter().map(|&v| v as f64).collect();
        aucs.push(roc_auc(&scores, &m.data)?);
    }
    if aucs.is_empty() {
        return Err(Error::Metric("no image holds both pixel classes".to_string()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Image-level AUC over per-image scores.
pub fn image_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    roc_auc(scores, labels)
}

// ---------------------------------------------------------------------------
// evaluation over a corpus
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Baseline,
    Dual,
}

impl FusionMode {
    pub fn tag(&self) -> &'static str {
        match self {
            FusionMode::Baseline => "baseline",
            FusionMode::Dual => "dual",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mode: FusionMode,
    pub attention: bool,
    pub normalize_maps: bool,
    /// Use per-image-mean pixel pooling instead of global pooling.
    pub pixel_per_image: bool,
    /// Label for the teacher-B configuration in reports ("deeper" for the
    /// standard bundle, "same-as-a" for swap ablations).
    pub teacher_tag: String,
}

impl EvalOptions {
    pub fn new(mode: FusionMode, attention: bool) -> EvalOptions {
        EvalOptions {
            mode,
            attention,
            normalize_maps: false,
            pixel_per_image: false,
            teacher_tag: "deeper".to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AucPair {
    pub pixel: f64,
    pub image: f64,
}

#[derive(Clone, Debug)]
pub struct PerLevelRow {
    pub level: Level,
    /// "sum" (A_l + B_l), "pair_a", or "pair_b".
    pub variant: String,
    pub aucs: AucPair,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub category: String,
    pub mode: FusionMode,
    pub attention: bool,
    pub teacher_tag: String,
    /// AUCs of the fused (multi-scale) map.
    pub fused: AucPair,
    pub per_level: Vec<PerLevelRow>,
}

impl EvalReport {
    /// Best single-resolution AUC over the summed-pair (or baseline pair-A)
    /// variant, the comparison column for multi-scale dominance checks.
    pub fn best_single_level(&self) -> AucPair {
        let primary = match self.mode {
            FusionMode::Dual => "sum",
            FusionMode::Baseline => "pair_a",
        };
        let mut best = AucPair { pixel: 0.0, image: 0.0 };
        for row in self.per_level.iter().filter(|r| r.variant == primary) {
            best.pixel = best.pixel.max(row.aucs.pixel);
            best.image = best.image.max(row.aucs.image);
        }
        best
    }
}

/// Extract features for every test item once; heavy forwards are shared by
/// all report variants.
pub fn prepare_features(bundle: &ModelBundle, corpus: &LabeledCorpus) -> Result<Vec<ImageFeatures>> {
    if corpus.split != Split::Test {
        return Err(Error::Input("evaluation requires the test split".into()));
    }
    corpus.validate()?;
    corpus
        .items
        .par_iter()
        .map(|item| crate::anomaly::extract_features(bundle, &item.image))
        .collect()
}

fn auc_of_maps(
    maps: &[AnomalyMap],
    corpus: &LabeledCorpus,
    per_image: bool,
) -> Result<AucPair> {
    let masks: Vec<Option<&Mask>> = corpus.items.iter().map(|i| i.mask.as_ref()).collect();
    let pixel = if per_image {
        pixel_auc_per_image_mean(maps, &masks)?
    } else {
        pixel_auc(maps, &masks)?
    };
    let scores: Vec<f64> = maps.iter().map(|m| image_score(m) as f64).collect();
    let labels: Vec<u8> = corpus.items.iter().map(|i| i.label01()).collect();
    let image = image_auc(&scores, &labels)?;
    Ok(AucPair { pixel, image })
}

/// Build one report (fused + per-resolution rows) from prepared features.
pub fn report_from_features(
    features: &[ImageFeatures],
    corpus: &LabeledCorpus,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if features.len() != corpus.len() {
        return Err(Error::Input("feature/corpus length mismatch".into()));
    }
    let map_opts = MapOptions {
        attention: opts.attention,
        dual: opts.mode == FusionMode::Dual,
        normalize_maps: opts.normalize_maps,
    };
    let inferences = features
        .par_iter()
        .map(|f| maps_from_features(f, &map_opts))
        .collect::<Result<Vec<_>>>()?;

    let finals: Vec<AnomalyMap> = inferences.iter().map(|inf| inf.final_map.clone()).collect();
    let fused = auc_of_maps(&finals, corpus, opts.pixel_per_image)?;

    let mut per_level = Vec::new();
    for (li, level) in DISTILL_LEVELS.iter().enumerate() {
        let a_maps: Vec<AnomalyMap> = inferences.iter().map(|inf| inf.maps_a[li].clone()).collect();
        match opts.mode {
            FusionMode::Baseline => {
                per_level.push(PerLevelRow {
                    level: *level,
                    variant: "pair_a".to_string(),
                    aucs: auc_of_maps(&a_maps, corpus, opts.pixel_per_image)?,
                });
            }
            FusionMode::Dual => {
                let b_maps: Vec<AnomalyMap> =
                    inferences.iter().map(|inf| inf.maps_b.as_ref().unwrap()[li].clone()).collect();
                let sum_maps: Vec<AnomalyMap> = a_maps
                    .iter()
                    .zip(&b_maps)
                    .map(|(a, b)| {
                        let mut m = a.clone();
                        for (v, bv) in m.data.iter_mut().zip(&b.data) {
                            *v += bv;
                        }
                        m.source = crate::anomaly::MapSource::PairSum { level: *level };
                        m
                    })
                    .collect();
                per_level.push(PerLevelRow {
                    level: *level,
                    variant: "sum".to_string(),
                    aucs: auc_of_maps(&sum_maps, corpus, opts.pixel_per_image)?,
                });
                per_level.push(PerLevelRow {
                    level: *level,
                    variant: "pair_a".to_string(),
                    aucs: auc_of_maps(&a_maps, corpus, opts.pixel_per_image)?,
                });
                per_level.push(PerLevelRow {
                    level: *level,
                    variant: "pair_b".to_string(),
                    aucs: auc_of_maps(&b_maps, corpus, opts.pixel_per_image)?,
                });
            }
        }
    }
    Ok(EvalReport {
        category: corpus.category.clone(),
        mode: opts.mode,
        attention: opts.attention,
        teacher_tag: opts.teacher_tag.clone(),
        fused,
        per_level,
    })
}

/// Evaluate one bundle in one configuration.
pub fn evaluate(bundle: &ModelBundle, corpus: &LabeledCorpus, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.mode == FusionMode::Dual {
        bundle.require_dual().map_err(|_| {
            Error::config("dual-mode evaluation requested but the bundle is baseline-only".to_string())
        })?;
    }
    let features = prepare_features(bundle, corpus)?;
    report_from_features(&features, corpus, opts)
}

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub modes: Vec<FusionMode>,
    pub attention: Vec<bool>,
    pub normalize_maps: bool,
    pub pixel_per_image: bool,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            modes: vec![FusionMode::Baseline, FusionMode::Dual],
            attention: vec![true, false],
            normalize_maps: false,
            pixel_per_image: false,
        }
    }
}

/// Run every (mode, attention) cell of the plan on the main bundle, plus the
/// dual rows for a teacher-swap bundle when provided. Features per bundle
/// are prepared once and shared across cells.
pub fn ablate(
    main: &ModelBundle,
    same_teacher: Option<&ModelBundle>,
    corpus: &LabeledCorpus,
    plan: &AblationPlan,
) -> Result<Vec<EvalReport>> {
    if plan.modes.contains(&FusionMode::Dual) && !main.is_dual() {
        return Err(Error::config(
            "ablation plan includes dual mode but the main bundle is baseline-only".to_string(),
        ));
    }
    let mut reports = Vec::new();
    let features = prepare_features(main, corpus)?;
    for &mode in &plan.modes {
        for &attention in &plan.attention {
            let mut opts = EvalOptions::new(mode, attention);
            opts.normalize_maps = plan.normalize_maps;
            opts.pixel_per_image = plan.pixel_per_image;
            reports.push(report_from_features(&features, corpus, &opts)?);
        }
    }
    if let Some(swap) = same_teacher {
        swap.require_dual().map_err(|_| {
            Error::config("teacher-swap bundle is not a full dual bundle".to_string())
        })?;
        let swap_features = prepare_features(swap, corpus)?;
        for &attention in &plan.attention {
            let mut opts = EvalOptions::new(FusionMode::Dual, attention);
            opts.normalize_maps = plan.normalize_maps;
            opts.pixel_per_image = plan.pixel_per_image;
            opts.teacher_tag = "same-as-a".to_string();
            reports.push(report_from_features(&swap_features, corpus, &opts)?);
        }
    }
    Ok(reports)
}

/// Combined CSV mirroring the table structure: one fused row plus
/// per-resolution rows per configuration.
pub fn write_reports_csv(reports: &[EvalReport], w: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "category,mode,attention,teacher_b,variant,level,pixel_auc,image_auc")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},fused,multi,{:.6},{:.6}",
            r.category,
            r.mode.tag(),
            if r.attention { "on" } else { "off" },
            r.teacher_tag,
            r.fused.pixel,
            r.fused.image
        )?;
        for row in &r.per_level {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.6},{:.6}",
                r.category,
                r.mode.tag(),
                if r.attention { "on" } else { "off" },
                r.teacher_tag,
                row.variant,
                row.level.tag(),
                row.aucs.pixel,
                row.aucs.image
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anomaly::MapSource;
    use crate::nn::init::{below, rng_from, unit_f64};

    #[test]
    fn perfect_and_inverted_separation() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn tie_handling_hand_case() {
        // pairs: (0.5 vs 0.5) tie -> 0.5, (0.7 vs 0.5) -> 1; AUC = 0.75
        let auc = roc_auc(&[0.5, 0.5, 0.7], &[0, 1, 1]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::Metric(_))));
        assert!(matches!(roc_auc(&[0.1, 0.2], &[0, 0]), Err(Error::Metric(_))));
    }

    #[test]
    fn matches_pairwise_oracle_exactly_with_ties() {
        let mut rng = rng_from(1, "auc");
        for round in 0..300 {
            let n = 2 + below(&mut rng, 499);
            // coarse score grid forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (unit_f64(&mut rng) * 8.0).floor() / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| below(&mut rng, 2) as u8).collect();
            labels[0] = 0;
            labels[if n > 1 { 1 } else { 0 }] = 1;
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = roc_auc_pairwise_oracle(&scores, &labels).unwrap();
            assert_eq!(fast, slow, "round {round} n {n}");
        }
    }

    #[test]
    fn invariant_under_monotone_transform_and_complement() {
        let mut rng = rng_from(2, "auc2");
        for _ in 0..50 {
            let n = 5 + below(&mut rng, 200);
            let scores: Vec<f64> = (0..n).map(|_| unit_f64(&mut rng) * 4.0 - 2.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| below(&mut rng, 2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let base = roc_auc(&scores, &labels).unwrap();
            // strictly increasing transform: x -> exp(x) + 3x
            let transformed: Vec<f64> = scores.iter().map(|&s| s.exp() + 3.0 * s).collect();
            assert_eq!(base, roc_auc(&transformed, &labels).unwrap());
            // complement identity
            let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
            let comp = roc_auc(&scores, &flipped).unwrap();
            assert!((base + comp - 1.0).abs() < 1e-12);
        }
    }

    fn map_from(mask: &Mask) -> AnomalyMap {
        AnomalyMap {
            h: mask.h,
            w: mask.w,
            data: mask.data.iter().map(|&v| v as f32).collect(),
            source: MapSource::Final,
        }
    }

    #[test]
    fn oracle_detector_scores_pixel_auc_one() {
        let mut mask = Mask::zeros(8, 8);
        for i in [3usize, 9, 17, 40] {
            mask.data[i] = 1;
        }
        let maps = vec![map_from(&mask), AnomalyMap { h: 8, w: 8, data: vec![0.0; 64], source: MapSource::Final }];
        let masks: Vec<Option<&Mask>> = vec![Some(&mask), None];
        assert_eq!(pixel_auc(&maps, &masks).unwrap(), 1.0);
    }

    #[test]
    fn constant_maps_score_half_by_tie_credit() {
        let mut mask = Mask::zeros(4, 4);
        mask.data[5] = 1;
        let flat = AnomalyMap { h: 4, w: 4, data: vec![0.7; 16], source: MapSource::Final };
        let masks: Vec<Option<&Mask>> = vec![Some(&mask)];
        assert_eq!(pixel_auc(&[flat], &masks).unwrap(), 0.5);
    }

    #[test]
    fn no_defect_pixels_is_undefined_metric() {
        let maps = vec![AnomalyMap { h: 2, w: 2, data: vec![0.1; 4], source: MapSource::Final }];
        let masks: Vec<Option<&Mask>> = vec![None];
        assert!(matches!(pixel_auc(&maps, &masks), Err(Error::Metric(_))));
    }

    #[test]
    fn shuffled_labels_hover_near_half() {
        let mut rng = rng_from(3, "shuffle");
        let n = 120;
        let scores: Vec<f64> = (0..n).map(|_| unit_f64(&mut rng)).collect();
        let mut mean = 0.0;
        let rounds = 100;
        for _ in 0..rounds {
            let mut labels = vec![0u8; n];
            for l in labels.iter_mut().take(n / 2) {
                *l = 1;
            }
            // Fisher-Yates shuffle of labels
            for i in (1..n).rev() {
                labels.swap(i, below(&mut rng, i + 1));
            }
            mean += roc_auc(&scores, &labels).unwrap();
        }
        mean /= rounds as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn per_image_mean_pooling_works_behind_flag() {
        let mut mask = Mask::zeros(4, 4);
        mask.data[0] = 1;
        let good = map_from(&mask);
        let masks: Vec<Option<&Mask>> = vec![Some(&mask)];
        assert_eq!(pixel_auc_per_image_mean(&[good], &masks).unwrap(), 1.0);
    }
}
