//! Test-time anomaly-map construction and fusion.
//!
//! Per level, the map value at a position is the same half-squared-difference
//! of channel-normalized features that drives training, so training loss and
//! test score are one function. Low-resolution maps are lifted to input
//! resolution bilinearly; the baseline path multiplies the three pair-A maps,
//! the dual path adds same-resolution maps across pairs first and then
//! multiplies across resolutions. The image-level score is the final map's
//! maximum.

use crate::backbones::bundle::ModelBundle;
use crate::backbones::{Level, Pair, Pyramid, DISTILL_LEVELS};
use crate::distill::{apply_attention, normalize_channels, AttentionGates};
use crate::error::{Error, Result};
use crate::nn::kernels as k;
use crate::nn::tensor::{Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    Level { pair: Pair, level: Level },
    PairSum { level: Level },
    Final,
}

/// Nonnegative per-pixel score field at input resolution.
#[derive(Clone, Debug)]
pub struct AnomalyMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
    pub source: MapSource,
}

impl AnomalyMap {
    pub fn from_tensor(t: &Tensor4, source: MapSource) -> AnomalyMap {
        let s = t.shape();
        debug_assert_eq!((s.n, s.c), (1, 1));
        AnomalyMap { h: s.h, w: s.w, data: t.data().to_vec(), source }
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(Shape::new(1, 1, self.h, self.w), self.data.clone()).expect("dims match")
    }

    /// Per-map min-max rescale to [0, 1]; constant maps become zero.
    pub fn minmax_normalized(&self) -> AnomalyMap {
        let lo = self.data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        AnomalyMap { h: self.h, w: self.w, data, source: self.source }
    }
}

/// Low-resolution per-level map: position_loss between the normalized
/// teacher features and the normalized (already attention-modulated) student
/// features. Input batch must be a single image.
pub fn level_anomaly_map(ft: &Tensor4, fs_modulated: &Tensor4, source: MapSource) -> Result<AnomalyMap> {
    if ft.shape() != fs_modulated.shape() {
        return Err(Error::shape(format!(
            "anomaly map operands differ: {} vs {}",
            ft.shape(),
            fs_modulated.shape()
        )));
    }
    let s = ft.shape();
    if s.n != 1 {
        return Err(Error::shape("anomaly maps are per-image (batch must be 1)".to_string()));
    }
    let t_hat = normalize_channels(ft);
    let s_hat = normalize_channels(fs_modulated);
    let plane = s.h * s.w;
    let mut data = vec![0.0f32; plane];
    for p in 0..plane {
        let mut acc = 0.0f32;
        for c in 0..s.c {
            let d = t_hat.data()[c * plane + p] - s_hat.data()[c * plane + p];
            acc += d * d;
        }
        data[p] = 0.5 * acc;
    }
    Ok(AnomalyMap { h: s.h, w: s.w, data, source })
}

/// Bilinear lift to input resolution; nonnegativity is preserved by the
/// interpolation bounds.
pub fn lift_to_input(map: &AnomalyMap, h: usize, w: usize) -> Result<AnomalyMap> {
    let t = map.to_tensor();
    let up = k::bilinear_fwd(&t, h, w)?;
    Ok(AnomalyMap::from_tensor(&up, map.source))
}

fn check_same_dims(maps: &[&AnomalyMap]) -> Result<(usize, usize)> {
    let (h, w) = (maps[0].h, maps[0].w);
    for m in maps {
        if m.h != h || m.w != w {
            return Err(Error::shape(format!(
                "fusion dims mismatch: {}x{} vs {h}x{w}",
                m.h, m.w
            )));
        }
    }
    Ok((h, w))
}

/// Baseline fusion: elementwise product of the three lifted maps.
pub fn fuse_product(maps: &[AnomalyMap; 3]) -> Result<AnomalyMap> {
    let (h, w) = check_same_dims(&[&maps[0], &maps[1], &maps[2]])?;
    let mut data = vec![0.0f32; h * w];
    for i in 0..h * w {
        data[i] = maps[0].data[i] * maps[1].data[i] * maps[2].data[i];
    }
    Ok(AnomalyMap { h, w, data, source: MapSource::Final })
}

/// Dual fusion: add same-resolution maps across the two pairs, then multiply
/// across resolutions.
pub fn fuse_dual(maps_a: &[AnomalyMap; 3], maps_b: &[AnomalyMap; 3]) -> Result<AnomalyMap> {
    let (h, w) = check_same_dims(&[
        &maps_a[0], &maps_a[1], &maps_a[2], &maps_b[0], &maps_b[1], &maps_b[2],
    ])?;
    for (a, b) in maps_a.iter().zip(maps_b) {
        let (MapSource::Level { level: la, .. }, MapSource::Level { level: lb, .. }) = (a.source, b.source) else {
            continue;
        };
        if la != lb {
            return Err(Error::shape("dual fusion requires matching level order".to_string()));
        }
    }
    let mut data = vec![0.0f32; h * w];
    for i in 0..h * w {
        data[i] = (maps_a[0].data[i] + maps_b[0].data[i])
            * (maps_a[1].data[i] + maps_b[1].data[i])
            * (maps_a[2].data[i] + maps_b[2].data[i]);
    }
    Ok(AnomalyMap { h, w, data, source: MapSource::Final })
}

/// Image-level score: the maximum pixel of the final map.
pub fn image_score(map: &AnomalyMap) -> f32 {
    map.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

// ---------------------------------------------------------------------------
// end-to-end inference
// ---------------------------------------------------------------------------

/// Raw per-image features from every network in a bundle, computed once so
/// different map variants (baseline/dual, attention on/off) can be derived
/// without re-running the backbones.
pub struct ImageFeatures {
    pub input_h: usize,
    pub input_w: usize,
    pub teacher_a: Pyramid<Tensor4>,
    pub student_a: Pyramid<Tensor4>,
    pub teacher_b: Option<Pyramid<Tensor4>>,
    pub student_b: Option<Pyramid<Tensor4>>,
    /// Attention fields per distillation level, native resolution.
    pub attention_a: Option<[Tensor4; 3]>,
    pub attention_b: Option<[Tensor4; 3]>,
}

fn gate_maps(gates: &AttentionGates<f32>, teacher: &Pyramid<Tensor4>) -> Result<[Tensor4; 3]> {
    Ok([
        gates.forward_eval(Level::Quarter, &teacher.quarter)?,
        gates.forward_eval(Level::Eighth, &teacher.eighth)?,
        gates.forward_eval(Level::Sixteenth, &teacher.sixteenth)?,
    ])
}

/// Run every model in the bundle on one image (1x3xHxW at the bundle's
/// configured size).
pub fn extract_features(bundle: &ModelBundle, image: &Tensor4) -> Result<ImageFeatures> {
    bundle.require_baseline()?;
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("inference input must be 1x3xHxW, got {s}")));
    }
    if s.h != bundle.image_size || s.w != bundle.image_size {
        return Err(Error::shape(format!(
            "image is {}x{} but the bundle was trained at {}x{}",
            s.h, s.w, bundle.image_size, bundle.image_size
        )));
    }
    let teacher_a = bundle.teacher_a.features_eval(image, Level::ThirtySecond)?;
    let student_a = bundle
        .student_a
        .as_ref()
        .expect("require_baseline")
        .features_eval(image, Level::Sixteenth)?;
    let (teacher_b, student_b) = if bundle.is_dual() {
        let tb = bundle.teacher_b.as_ref().unwrap().features_eval(image, Level::Sixteenth)?;
        let bottleneck = teacher_a.bottleneck.as_ref().expect("teacher-A taps 1/32");
        let sb = bundle.student_b.as_ref().unwrap().decode_eval(bottleneck)?;
        (Some(tb), Some(sb))
    } else {
        (None, None)
    };
    let attention_a = match &bundle.gates_a {
        Some(g) => Some(gate_maps(g, &teacher_a)?),
        None => None,
    };
    let attention_b = match (&bundle.gates_b, &teacher_b) {
        (Some(g), Some(tb)) => Some(gate_maps(g, tb)?),
        _ => None,
    };
    Ok(ImageFeatures {
        input_h: s.h,
        input_w: s.w,
        teacher_a,
        student_a,
        teacher_b,
        student_b,
        attention_a,
        attention_b,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct MapOptions {
    /// Apply attention modulation to student features before scoring,
    /// matching the training pipeline. Off bypasses the gates entirely.
    pub attention: bool,
    /// Use the six-map dual fusion; off scores from pair A alone.
    pub dual: bool,
    /// Optional per-map min-max rescale before fusion (experimentation only).
    pub normalize_maps: bool,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions { attention: true, dual: true, normalize_maps: false }
    }
}

/// Everything inference produces for one image.
pub struct Inference {
    /// Lifted per-level maps for pair A, level order 1/4, 1/8, 1/16.
    pub maps_a: [AnomalyMap; 3],
    pub maps_b: Option<[AnomalyMap; 3]>,
    pub final_map: AnomalyMap,
    pub score: f32,
    /// Native-resolution attention fields, when gates exist.
    pub attention_a: Option<[Tensor4; 3]>,
    pub attention_b: Option<[Tensor4; 3]>,
}

fn pair_maps(
    teacher: &Pyramid<Tensor4>,
    student: &Pyramid<Tensor4>,
    attention: Option<&[Tensor4; 3]>,
    pair: Pair,
    h: usize,
    w: usize,
    normalize_maps: bool,
) -> Result<[AnomalyMap; 3]> {
    let mut out = Vec::with_capacity(3);
    for (i, level) in DISTILL_LEVELS.iter().enumerate() {
        let fs = student.get(*level);
        let modulated;
        let fs_mod = match attention {
            Some(a) => {
                modulated = apply_attention(fs, &a[i])?;
                &modulated
            }
            None => fs,
        };
        let low = level_anomaly_map(teacher.get(*level), fs_mod, MapSource::Level { pair, level: *level })?;
        let mut lifted = lift_to_input(&low, h, w)?;
        if normalize_maps {
            lifted = lifted.minmax_normalized();
        }
        out.push(lifted);
    }
    Ok(out.try_into().map_err(|_| Error::shape("three levels expected".to_string())).unwrap())
}

/// Derive maps, fusion, and the image score from extracted features.
pub fn maps_from_features(feats: &ImageFeatures, opts: &MapOptions) -> Result<Inference> {
    let (h, w) = (feats.input_h, feats.input_w);
    let att_a = if opts.attention { feats.attention_a.as_ref() } else { None };
    let maps_a = pair_maps(&feats.teacher_a, &feats.student_a, att_a, Pair::A, h, w, opts.normalize_maps)?;

    let maps_b = if opts.dual {
        let (Some(tb), Some(sb)) = (&feats.teacher_b, &feats.student_b) else {
            return Err(Error::state(
                "dual-mode maps requested but the bundle features lack pair B".to_string(),
            ));
        };
        let att_b = if opts.attention { feats.attention_b.as_ref() } else { None };
        Some(pair_maps(tb, sb, att_b, Pair::B, h, w, opts.normalize_maps)?)
    } else {
        None
    };

    let final_map = match &maps_b {
        Some(mb) => fuse_dual(&maps_a, mb)?,
        None => fuse_product(&maps_a)?,
    };
    let score = image_score(&final_map);
    Ok(Inference {
        maps_a,
        maps_b,
        final_map,
        score,
        attention_a: feats.attention_a.clone(),
        attention_b: feats.attention_b.clone(),
    })
}

/// One-call inference: extract features and derive maps.
pub fn infer(bundle: &ModelBundle, image: &Tensor4, opts: &MapOptions) -> Result<Inference> {
    if opts.dual {
        bundle.require_dual()?;
    }
    let feats = extract_features(bundle, image)?;
    maps_from_features(&feats, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::{rng_from, uniform};

    fn map_of(level: Level, pair: Pair, h: usize, w: usize, vals: &[f32]) -> AnomalyMap {
        AnomalyMap {
            h,
            w,
            data: vals.to_vec(),
            source: MapSource::Level { pair, level },
        }
    }

    fn random_features(shape: Shape, seed: u64) -> Tensor4 {
        let mut rng = rng_from(seed, "anomaly-test");
        let mut t = Tensor4::zeros(shape);
        for v in t.data_mut() {
            *v = uniform(&mut rng, -1.0, 1.0) as f32;
        }
        t
    }

    #[test]
    fn equal_features_give_zero_map() {
        let f = random_features(Shape::new(1, 6, 4, 4), 1);
        let m = level_anomaly_map(&f, &f, MapSource::Level { pair: Pair::A, level: Level::Quarter }).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthogonal_features_give_unit_map() {
        let mut ft = Tensor4::zeros(Shape::new(1, 2, 3, 3));
        let mut fs = Tensor4::zeros(Shape::new(1, 2, 3, 3));
        for p in 0..9 {
            ft.data_mut()[p] = 2.0; // channel 0
            fs.data_mut()[9 + p] = 5.0; // channel 1
        }
        let m = level_anomaly_map(&ft, &fs, MapSource::Final).unwrap();
        for &v in &m.data {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn level_map_matches_double_loop_oracle() {
        use crate::distill::position_loss;
        let ft = random_features(Shape::new(1, 5, 4, 4), 2);
        let fs = random_features(Shape::new(1, 5, 4, 4), 3);
        let m = level_anomaly_map(&ft, &fs, MapSource::Final).unwrap();
        let t_hat = normalize_channels(&ft);
        let s_hat = normalize_channels(&fs);
        for y in 0..4 {
            for x in 0..4 {
                let tv: Vec<f32> = (0..5).map(|c| t_hat.at(0, c, y, x)).collect();
                let sv: Vec<f32> = (0..5).map(|c| s_hat.at(0, c, y, x)).collect();
                let expect = position_loss(&tv, &sv).unwrap();
                assert!((m.data[y * 4 + x] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lift_preserves_constants_shape_and_bounds() {
        let m = map_of(Level::Quarter, Pair::A, 4, 4, &[0.3; 16]);
        let up = lift_to_input(&m, 64, 64).unwrap();
        assert_eq!((up.h, up.w), (64, 64));
        assert!(up.data.iter().all(|&v| v == 0.3));

        let mut vals = [0.0f32; 16];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = i as f32 / 15.0;
        }
        let m2 = map_of(Level::Quarter, Pair::A, 4, 4, &vals);
        let up2 = lift_to_input(&m2, 32, 48).unwrap();
        let (lo, hi) = (0.0f32, 1.0f32);
        assert!(up2.data.iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn fuse_product_examples() {
        let z = map_of(Level::Quarter, Pair::A, 2, 2, &[0.0; 4]);
        let a = map_of(Level::Eighth, Pair::A, 2, 2, &[0.7, 0.1, 0.9, 0.2]);
        let b = map_of(Level::Sixteenth, Pair::A, 2, 2, &[0.5; 4]);
        let fused = fuse_product(&[a.clone(), z, b.clone()]).unwrap();
        assert!(fused.data.iter().all(|&v| v == 0.0));

        let half = map_of(Level::Quarter, Pair::A, 1, 1, &[0.5]);
        let h2 = map_of(Level::Eighth, Pair::A, 1, 1, &[0.5]);
        let h3 = map_of(Level::Sixteenth, Pair::A, 1, 1, &[0.5]);
        assert!((fuse_product(&[half, h2, h3]).unwrap().data[0] - 0.125).abs() < 1e-7);

        let bad = map_of(Level::Quarter, Pair::A, 3, 3, &[0.0; 9]);
        assert!(matches!(fuse_product(&[a, b, bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn fuse_dual_examples_and_rescue_behavior() {
        let a = [
            map_of(Level::Quarter, Pair::A, 1, 1, &[0.1]),
            map_of(Level::Eighth, Pair::A, 1, 1, &[0.2]),
            map_of(Level::Sixteenth, Pair::A, 1, 1, &[0.3]),
        ];
        let b = [
            map_of(Level::Quarter, Pair::B, 1, 1, &[0.3]),
            map_of(Level::Eighth, Pair::B, 1, 1, &[0.2]),
            map_of(Level::Sixteenth, Pair::B, 1, 1, &[0.1]),
        ];
        let fused = fuse_dual(&a, &b).unwrap();
        assert!((fused.data[0] - 0.4 * 0.4 * 0.4).abs() < 1e-7);

        // zero side B degenerates to the product of A.
        let zeros = [
            map_of(Level::Quarter, Pair::B, 1, 1, &[0.0]),
            map_of(Level::Eighth, Pair::B, 1, 1, &[0.0]),
            map_of(Level::Sixteenth, Pair::B, 1, 1, &[0.0]),
        ];
        let with_zero = fuse_dual(&a, &zeros).unwrap();
        let product = fuse_product(&a).unwrap();
        assert_eq!(with_zero.data, product.data);

        // pair A missing at 1/4 but pair B seeing it: the sum prevents the
        // product from annihilating.
        let a_miss = [
            map_of(Level::Quarter, Pair::A, 1, 1, &[0.0]),
            map_of(Level::Eighth, Pair::A, 1, 1, &[0.2]),
            map_of(Level::Sixteenth, Pair::A, 1, 1, &[0.3]),
        ];
        let rescued = fuse_dual(&a_miss, &b).unwrap();
        assert!(rescued.data[0] > 0.0);
        assert_eq!(fuse_product(&a_miss).unwrap().data[0], 0.0);
    }

    #[test]
    fn image_score_is_max_and_permutation_invariant() {
        let m = map_of(Level::Quarter, Pair::A, 2, 2, &[0.0, 0.9, 0.0, 0.0]);
        assert_eq!(image_score(&m), 0.9);
        let zeros = map_of(Level::Quarter, Pair::A, 2, 2, &[0.0; 4]);
        assert_eq!(image_score(&zeros), 0.0);

        let mut rng = rng_from(4, "perm");
        let mut vals: Vec<f32> = (0..64).map(|_| uniform(&mut rng, 0.0, 2.0) as f32).collect();
        let m1 = map_of(Level::Quarter, Pair::A, 8, 8, &vals);
        let s1 = image_score(&m1);
        assert!(vals.contains(&s1));
        vals.reverse();
        vals.swap(3, 40);
        let m2 = map_of(Level::Quarter, Pair::A, 8, 8, &vals);
        assert_eq!(s1, image_score(&m2));
    }

    #[test]
    fn fusion_is_monotone_in_every_constituent() {
        let mut rng = rng_from(5, "mono");
        for _ in 0..1000 {
            let mk = |pair, level, rng: &mut rand_chacha::ChaCha8Rng| {
                let vals: Vec<f32> = (0..4).map(|_| uniform(rng, 0.0, 2.0) as f32).collect();
                map_of(level, pair, 2, 2, &vals)
            };
            let a = [
                mk(Pair::A, Level::Quarter, &mut rng),
                mk(Pair::A, Level::Eighth, &mut rng),
                mk(Pair::A, Level::Sixteenth, &mut rng),
            ];
            let b = [
                mk(Pair::B, Level::Quarter, &mut rng),
                mk(Pair::B, Level::Eighth, &mut rng),
                mk(Pair::B, Level::Sixteenth, &mut rng),
            ];
            let base_d = fuse_dual(&a, &b).unwrap();
            let base_p = fuse_product(&a).unwrap();
            // bump one random constituent at one random pixel
            let which = crate::nn::init::below(&mut rng, 3);
            let px = crate::nn::init::below(&mut rng, 4);
            let bump = uniform(&mut rng, 0.0, 1.0) as f32;
            let mut a2 = a.clone();
            a2[which].data[px] += bump;
            assert!(fuse_dual(&a2, &b).unwrap().data[px] >= base_d.data[px]);
            assert!(fuse_product(&a2).unwrap().data[px] >= base_p.data[px]);
        }
    }
}
