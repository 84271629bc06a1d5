//! The four networks: teacher-A/student-A (identical miniature residual
//! pyramids), the deeper teacher-B, and the student-B decoder that
//! reconstructs teacher-B's pyramid from teacher-A's 1/32 bottleneck.

pub mod bundle;
pub mod pretext;

use crate::error::{Error, Result};
use crate::nn::init::{he_normal, rng_from};
use crate::nn::kernels::BN_MOMENTUM;
use crate::nn::params::{ParamSet, Parameter};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::{Elem, Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Pyramid scales relative to the input resolution.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum Level {
    Quarter,
    Eighth,
    Sixteenth,
    ThirtySecond,
}

impl Level {
    pub fn divisor(&self) -> usize {
        match self {
            Level::Quarter => 4,
            Level::Eighth => 8,
            Level::Sixteenth => 16,
            Level::ThirtySecond => 32,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Level::Quarter => "quarter",
            Level::Eighth => "eighth",
            Level::Sixteenth => "sixteenth",
            Level::ThirtySecond => "thirty_second",
        }
    }
}

/// The three scales where distillation (and anomaly scoring) happens.
pub const DISTILL_LEVELS: [Level; 3] = [Level::Quarter, Level::Eighth, Level::Sixteenth];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum Pair {
    A,
    B,
}

impl Pair {
    pub fn tag(&self) -> &'static str {
        match self {
            Pair::A => "a",
            Pair::B => "b",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum Role {
    TeacherA,
    StudentA,
    TeacherB,
    StudentB,
}

impl Role {
    pub fn tag(&self) -> &'static str {
        match self {
            Role::TeacherA => "teacher_a",
            Role::StudentA => "student_a",
            Role::TeacherB => "teacher_b",
            Role::StudentB => "student_b",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Four-stage residual pyramid: a stride-2 stem, then one stage per scale
/// (1/4, 1/8, 1/16, 1/32), each opened by a stride-2 projection block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub stem_channels: usize,
    pub blocks: [usize; 4],
    pub channels: [usize; 4],
}

impl PyramidSpec {
    /// Desk-scale teacher-A / student-A shape.
    pub fn desk_a() -> PyramidSpec {
        PyramidSpec { stem_channels: 16, blocks: [1, 1, 1, 1], channels: [16, 32, 64, 128] }
    }

    /// Desk-scale teacher-B: strictly deeper and wider than desk_a.
    pub fn desk_b() -> PyramidSpec {
        PyramidSpec { stem_channels: 24, blocks: [2, 2, 2, 2], channels: [24, 48, 96, 192] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::config("stem channels must be >= 1"));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("stage channels must be >= 1"));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(format!(
                "stage channels must be non-decreasing, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Channel count of the tap at a given level.
    pub fn channels_at(&self, level: Level) -> usize {
        match level {
            Level::Quarter => self.channels[0],
            Level::Eighth => self.channels[1],
            Level::Sixteenth => self.channels[2],
            Level::ThirtySecond => self.channels[3],
        }
    }
}

/// Decoder: three (upsample x2 -> conv+BN+ReLU -> residual block -> 1x1 head)
/// stages mapping the 1/32 bottleneck to teacher-B-shaped taps at 1/16, 1/8,
/// and 1/4. `widths` are the internal channel counts per stage, in that
/// order; `head_channels` must match teacher-B's tap channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub input_channels: usize,
    pub widths: [usize; 3],
    pub head_channels: [usize; 3],
}

impl DecoderSpec {
    /// Decoder wired between the desk teachers: consumes teacher-A's 1/32
    /// bottleneck, emits teacher-B-shaped taps.
    pub fn between(teacher_a: &PyramidSpec, teacher_b: &PyramidSpec) -> DecoderSpec {
        DecoderSpec {
            input_channels: teacher_a.channels[3],
            widths: [
                teacher_b.channels[2],
                teacher_b.channels[1],
                teacher_b.channels[0],
            ],
            head_channels: [
                teacher_b.channels[2],
                teacher_b.channels[1],
                teacher_b.channels[0],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.widths.iter().any(|&w| w == 0)
            || self.head_channels.iter().any(|&c| c == 0)
        {
            return Err(Error::config("decoder channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Head output channels at a distillation level.
    pub fn channels_at(&self, level: Level) -> Result<usize> {
        match level {
            Level::Sixteenth => Ok(self.head_channels[0]),
            Level::Eighth => Ok(self.head_channels[1]),
            Level::Quarter => Ok(self.head_channels[2]),
            Level::ThirtySecond => Err(Error::shape("decoder has no 1/32 output".to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NetSpec {
    Pyramid(PyramidSpec),
    Decoder(DecoderSpec),
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Pyramid(p) => p.validate(),
            NetSpec::Decoder(d) => d.validate(),
        }
    }

    pub fn as_pyramid(&self) -> Result<&PyramidSpec> {
        match self {
            NetSpec::Pyramid(p) => Ok(p),
            NetSpec::Decoder(_) => Err(Error::state("expected a pyramid network".to_string())),
        }
    }

    pub fn as_decoder(&self) -> Result<&DecoderSpec> {
        match self {
            NetSpec::Decoder(d) => Ok(d),
            NetSpec::Pyramid(_) => Err(Error::state("expected a decoder network".to_string())),
        }
    }
}

/// Feature taps per level; `bottleneck` is present when the walk ran through
/// the 1/32 stage.
#[derive(Clone, Debug)]
pub struct Pyramid<T> {
    pub quarter: T,
    pub eighth: T,
    pub sixteenth: T,
    pub bottleneck: Option<T>,
}

impl<T> Pyramid<T> {
    pub fn get(&self, level: Level) -> &T {
        match level {
            Level::Quarter => &self.quarter,
            Level::Eighth => &self.eighth,
            Level::Sixteenth => &self.sixteenth,
            Level::ThirtySecond => self.bottleneck.as_ref().expect("bottleneck tap not computed"),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Pyramid<U> {
        Pyramid {
            quarter: f(&self.quarter),
            eighth: f(&self.eighth),
            sixteenth: f(&self.sixteenth),
            bottleneck: self.bottleneck.as_ref().map(f),
        }
    }
}

// ---------------------------------------------------------------------------
// parameter enumeration
// ---------------------------------------------------------------------------

/// Parameterized layers of a network, in construction order. BN entries
/// expand to gamma/beta plus running statistics.
#[derive(Clone, Debug)]
pub enum LayerParams {
    Conv { name: String, cout: usize, cin: usize, k: usize, bias: bool },
    BatchNorm { name: String, c: usize },
}

fn block_params(out: &mut Vec<LayerParams>, name: &str, cin: usize, cout: usize, stride: usize) {
    out.push(LayerParams::Conv { name: format!("{name}.conv1.weight"), cout, cin, k: 3, bias: false });
    out.push(LayerParams::BatchNorm { name: format!("{name}.bn1"), c: cout });
    out.push(LayerParams::Conv { name: format!("{name}.conv2.weight"), cout, cin: cout, k: 3, bias: false });
    out.push(LayerParams::BatchNorm { name: format!("{name}.bn2"), c: cout });
    if stride != 1 || cin != cout {
        out.push(LayerParams::Conv { name: format!("{name}.down.conv.weight"), cout, cin, k: 1, bias: false });
        out.push(LayerParams::BatchNorm { name: format!("{name}.down.bn"), c: cout });
    }
}

pub fn pyramid_layer_params(spec: &PyramidSpec) -> Vec<LayerParams> {
    let mut out = Vec::new();
    out.push(LayerParams::Conv {
        name: "stem.conv.weight".to_string(),
        cout: spec.stem_channels,
        cin: 3,
        k: 3,
        bias: false,
    });
    out.push(LayerParams::BatchNorm { name: "stem.bn".to_string(), c: spec.stem_channels });
    let mut cin = spec.stem_channels;
    for (si, (&nblocks, &cout)) in spec.blocks.iter().zip(&spec.channels).enumerate() {
        for b in 0..nblocks {
            let stride = if b == 0 { 2 } else { 1 };
            let bcin = if b == 0 { cin } else { cout };
            block_params(&mut out, &format!("s{}.b{}", si + 1, b), bcin, cout, stride);
        }
        cin = cout;
    }
    out
}

pub fn decoder_layer_params(spec: &DecoderSpec) -> Vec<LayerParams> {
    let mut out = Vec::new();
    let mut cin = spec.input_channels;
    for (i, level) in [Level::Sixteenth, Level::Eighth, Level::Quarter].iter().enumerate() {
        let w = spec.widths[i];
        let name = format!("d{}", level.divisor());
        out.push(LayerParams::Conv { name: format!("{name}.conv.weight"), cout: w, cin, k: 3, bias: false });
        out.push(LayerParams::BatchNorm { name: format!("{name}.bn"), c: w });
        block_params(&mut out, &format!("{name}.res"), w, w, 1);
        out.push(LayerParams::Conv {
            name: format!("{name}.head.weight"),
            cout: spec.head_channels[i],
            cin: w,
            k: 1,
            bias: true,
        });
        cin = w;
    }
    out
}

pub fn layer_params_of(spec: &NetSpec) -> Vec<LayerParams> {
    match spec {
        NetSpec::Pyramid(p) => pyramid_layer_params(p),
        NetSpec::Decoder(d) => decoder_layer_params(d),
    }
}

/// Expected (name, shape, trainable) triples for a spec, including BN state.
pub fn expected_parameters(spec: &NetSpec) -> Vec<(String, Shape, bool)> {
    let mut out = Vec::new();
    for layer in layer_params_of(spec) {
        match layer {
            LayerParams::Conv { name, cout, cin, k, bias } => {
                let base = name.trim_end_matches(".weight").to_string();
                out.push((name, Shape::new(cout, cin, k, k), true));
                if bias {
                    out.push((format!("{base}.bias"), Shape::new(1, cout, 1, 1), true));
                }
            }
            LayerParams::BatchNorm { name, c } => {
                let s = Shape::new(1, c, 1, 1);
                out.push((format!("{name}.gamma"), s, true));
                out.push((format!("{name}.beta"), s, true));
                out.push((format!("{name}.running_mean"), s, false));
                out.push((format!("{name}.running_var"), s, false));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// network
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Network<E> {
    pub role: Role,
    pub spec: NetSpec,
    pub params: ParamSet<E>,
    pub frozen: bool,
    /// Set once BN running statistics hold real values (after a train-mode
    /// pass, a freeze, or a bundle load); eval mode requires it.
    pub bn_ready: bool,
    pub pretext_accuracy: Option<f64>,
}

/// Deterministic seeded construction: conv weights He-normal, BN scale 1 /
/// shift 0, running stats at (0, 1). The same spec and seed always produce
/// bit-identical parameters regardless of role.
pub fn build_network<E: Elem>(role: Role, spec: NetSpec, seed: u64) -> Result<Network<E>> {
    spec.validate()?;
    let mut rng = rng_from(seed, "net-init");
    let mut params = ParamSet::new();
    for layer in layer_params_of(&spec) {
        match layer {
            LayerParams::Conv { name, cout, cin, k, bias } => {
                let base = name.trim_end_matches(".weight").to_string();
                let w = he_normal(Shape::new(cout, cin, k, k), cin * k * k, &mut rng);
                params.insert(name, Parameter::new(w, true));
                if bias {
                    params.insert(
                        format!("{base}.bias"),
                        Parameter::new(Tensor::zeros(Shape::new(1, cout, 1, 1)), true),
                    );
                }
            }
            LayerParams::BatchNorm { name, c } => {
                let s = Shape::new(1, c, 1, 1);
                params.insert(format!("{name}.gamma"), Parameter::new(Tensor::filled(s, E::one()), true));
                params.insert(format!("{name}.beta"), Parameter::new(Tensor::zeros(s), true));
                params.insert(format!("{name}.running_mean"), Parameter::new(Tensor::zeros(s), false));
                params.insert(format!("{name}.running_var"), Parameter::new(Tensor::filled(s, E::one()), false));
            }
        }
    }
    Ok(Network {
        role,
        spec,
        params,
        frozen: false,
        bn_ready: false,
        pretext_accuracy: None,
    })
}

/// Pending running-stat update from one train-mode BN evaluation.
#[derive(Clone, Debug)]
pub struct BnUpdate<E> {
    pub bn_name: String,
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

/// Output of a forward walk on a tape.
pub struct ForwardOutput<E> {
    pub taps: Pyramid<NodeId>,
    /// Parameter-name -> tape leaf, for pulling gradients after backward.
    pub bound: BTreeMap<String, NodeId>,
    pub bn_updates: Vec<BnUpdate<E>>,
}

struct Walk<'a, E: Elem> {
    tape: &'a mut Tape<E>,
    net: &'a Network<E>,
    mode: Mode,
    bound: BTreeMap<String, NodeId>,
    updates: Vec<BnUpdate<E>>,
}

impl<'a, E: Elem> Walk<'a, E> {
    fn new(tape: &'a mut Tape<E>, net: &'a Network<E>, mode: Mode) -> Result<Walk<'a, E>> {
        if mode == Mode::Train && net.frozen {
            return Err(Error::state(format!(
                "{} is frozen; train-mode forward is not allowed",
                net.role.tag()
            )));
        }
        if mode == Mode::Eval && !net.bn_ready {
            return Err(Error::state(format!(
                "{} has uninitialized batch-norm running stats; train or freeze it first",
                net.role.tag()
            )));
        }
        Ok(Walk { tape, net, mode, bound: BTreeMap::new(), updates: Vec::new() })
    }

    fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let p = self.net.params.get(name);
        let requires = !self.net.frozen && p.trainable;
        let id = self.tape.leaf(p.value.clone(), requires);
        self.bound.insert(name.to_string(), id);
        id
    }

    fn conv(&mut self, base: &str, x: NodeId, stride: usize, pad: usize, bias: bool) -> Result<NodeId> {
        let w = self.param(&format!("{base}.weight"));
        let b = if bias { Some(self.param(&format!("{base}.bias"))) } else { None };
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, base: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.param(&format!("{base}.gamma"));
        let beta = self.param(&format!("{base}.beta"));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta)?;
                self.updates.push(BnUpdate { bn_name: base.to_string(), mean: stats.mean, var: stats.var });
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.net.params.get(&format!("{base}.running_mean")).value.clone();
                let rv = self.net.params.get(&format!("{base}.running_var")).value.clone();
                self.tape.batch_norm_eval(x, gamma, beta, &rm, &rv)
            }
        }
    }

    fn conv_bn_relu(&mut self, conv: &str, bn: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let c = self.conv(conv, x, stride, pad, false)?;
        let b = self.bn(bn, c)?;
        Ok(self.tape.relu(b))
    }

    /// Residual block: two conv+BN stages plus an identity or projection skip.
    fn block(&mut self, name: &str, x: NodeId, cin: usize, cout: usize, stride: usize) -> Result<NodeId> {
        let r1 = self.conv_bn_relu(&format!("{name}.conv1"), &format!("{name}.bn1"), x, stride, 1)?;
        let c2 = self.conv(&format!("{name}.conv2"), r1, 1, 1, false)?;
        let b2 = self.bn(&format!("{name}.bn2"), c2)?;
        let skip = if stride != 1 || cin != cout {
            let d = self.conv(&format!("{name}.down.conv"), x, stride, 0, false)?;
            self.bn(&format!("{name}.down.bn"), d)?
        } else {
            x
        };
        let sum = self.tape.add(b2, skip)?;
        Ok(self.tape.relu(sum))
    }

    fn finish(self, taps: Pyramid<NodeId>) -> ForwardOutput<E> {
        ForwardOutput { taps, bound: self.bound, bn_updates: self.updates }
    }
}

impl<E: Elem> Network<E> {
    /// Run a pyramid backbone on a tape, tapping 1/4, 1/8, 1/16 and — when
    /// `upto` is 1/32 — the bottleneck. Stages past `upto` are skipped.
    pub fn forward_pyramid_tape(
        &self,
        tape: &mut Tape<E>,
        x: NodeId,
        mode: Mode,
        upto: Level,
    ) -> Result<ForwardOutput<E>> {
        let spec = self.spec.as_pyramid()?.clone();
        let xs = tape.value(x).shape();
        if xs.c != 3 {
            return Err(Error::shape(format!("pyramid input must have 3 channels, got {}", xs.c)));
        }
        if xs.h % 32 != 0 || xs.w % 32 != 0 || xs.h == 0 || xs.w == 0 {
            return Err(Error::shape(format!(
                "input dims {}x{} must be divisible by 32",
                xs.h, xs.w
            )));
        }
        let mut walk = Walk::new(tape, self, mode)?;
        let mut cur = walk.conv_bn_relu("stem.conv", "stem.bn", x, 2, 1)?;
        let mut cin = spec.stem_channels;
        let mut taps: Vec<NodeId> = Vec::new();
        let n_stages = if upto >= Level::ThirtySecond { 4 } else { 3 };
        for si in 0..n_stages {
            let cout = spec.channels[si];
            for b in 0..spec.blocks[si] {
                let stride = if b == 0 { 2 } else { 1 };
                let bcin = if b == 0 { cin } else { cout };
                cur = walk.block(&format!("s{}.b{}", si + 1, b), cur, bcin, cout, stride)?;
            }
            cin = cout;
            taps.push(cur);
        }
        let pyramid = Pyramid {
            quarter: taps[0],
            eighth: taps[1],
            sixteenth: taps[2],
            bottleneck: taps.get(3).copied(),
        };
        Ok(walk.finish(pyramid))
    }

    /// Run the decoder on a tape. The bottleneck node must already be
    /// detached (a constant) so no gradient can reach teacher-A.
    pub fn forward_decoder_tape(
        &self,
        tape: &mut Tape<E>,
        bottleneck: NodeId,
        mode: Mode,
    ) -> Result<ForwardOutput<E>> {
        let spec = self.spec.as_decoder()?.clone();
        let bs = tape.value(bottleneck).shape();
        if bs.c != spec.input_channels {
            return Err(Error::shape(format!(
                "decoder expects {} input channels, got {}",
                spec.input_channels, bs.c
            )));
        }
        let mut walk = Walk::new(tape, self, mode)?;
        let mut cur = bottleneck;
        let mut taps: Vec<NodeId> = Vec::new();
        for (i, level) in [Level::Sixteenth, Level::Eighth, Level::Quarter].iter().enumerate() {
            let name = format!("d{}", level.divisor());
            let cs = walk.tape.value(cur).shape();
            cur = walk.tape.upsample_bilinear(cur, cs.h * 2, cs.w * 2)?;
            cur = walk.conv_bn_relu(&format!("{name}.conv"), &format!("{name}.bn"), cur, 1, 1)?;
            let w = spec.widths[i];
            cur = walk.block(&format!("{name}.res"), cur, w, w, 1)?;
            taps.push(walk.conv(&format!("{name}.head"), cur, 1, 0, true)?);
        }
        let pyramid = Pyramid {
            quarter: taps[2],
            eighth: taps[1],
            sixteenth: taps[0],
            bottleneck: None,
        };
        Ok(walk.finish(pyramid))
    }

    /// Eval-mode feature extraction without gradient recording.
    pub fn features_eval(&self, batch: &Tensor<E>, upto: Level) -> Result<Pyramid<Tensor<E>>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(batch.clone());
        let out = self.forward_pyramid_tape(&mut tape, x, Mode::Eval, upto)?;
        Ok(out.taps.map(|&id| tape.value(id).clone()))
    }

    /// Eval-mode decoder pass without gradient recording.
    pub fn decode_eval(&self, bottleneck: &Tensor<E>) -> Result<Pyramid<Tensor<E>>> {
        let mut tape = Tape::no_grad();
        let b = tape.constant(bottleneck.clone());
        let out = self.forward_decoder_tape(&mut tape, b, Mode::Eval)?;
        Ok(out.taps.map(|&id| tape.value(id).clone()))
    }

    /// Fold train-mode batch statistics into the running stats.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<E>]) {
        let m = E::from_f64(BN_MOMENTUM);
        let one_minus = E::one() - m;
        for u in updates {
            let rm = self.params.get_mut(&format!("{}.running_mean", u.bn_name));
            for (r, &b) in rm.value.data_mut().iter_mut().zip(&u.mean) {
                *r = one_minus * *r + m * b;
            }
            let rv = self.params.get_mut(&format!("{}.running_var", u.bn_name));
            for (r, &b) in rv.value.data_mut().iter_mut().zip(&u.var) {
                *r = one_minus * *r + m * b;
            }
        }
        if !updates.is_empty() {
            self.bn_ready = true;
        }
    }

    /// Pull gradients off a tape into the parameter accumulators.
    pub fn pull_grads(&mut self, tape: &Tape<E>, bound: &BTreeMap<String, NodeId>) {
        for (name, &id) in bound {
            if let Some(g) = tape.grad(id) {
                self.params.get_mut(name).accumulate_grad(g);
            }
        }
    }

    /// Freeze: all parameters become non-trainable, BN runs in eval mode from
    /// here on (current running stats, whatever they are, become valid).
    pub fn freeze(&mut self) {
        self.params.set_all_trainable(false);
        self.frozen = true;
        self.bn_ready = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_a_net(seed: u64) -> Network<f32> {
        build_network(Role::TeacherA, NetSpec::Pyramid(PyramidSpec::desk_a()), seed).unwrap()
    }

    #[test]
    fn same_spec_and_seed_build_identical_networks() {
        let a = desk_a_net(7);
        let mut b = build_network::<f32>(Role::StudentA, NetSpec::Pyramid(PyramidSpec::desk_a()), 7).unwrap();
        assert_eq!(
            a.params.names().collect::<Vec<_>>(),
            b.params.names().collect::<Vec<_>>()
        );
        assert!(b.params.matches_snapshot(&a.params.snapshot()));
        // and a different seed differs
        b = build_network(Role::StudentA, NetSpec::Pyramid(PyramidSpec::desk_a()), 8).unwrap();
        assert!(!b.params.matches_snapshot(&a.params.snapshot()));
    }

    #[test]
    fn desk_a_parameter_count_matches_closed_form() {
        // Independent closed-form enumeration:
        // stem conv 16*3*3*3, per-stage first block with projection:
        //   conv1 cout*cin*9 + conv2 cout*cout*9 + down cout*cin
        // BN trainable pairs: 2*c per BN (stem, bn1, bn2, down.bn).
        let net = desk_a_net(1);
        let chans = [16usize, 32, 64, 128];
        let mut expected_trainable = 16 * 3 * 9 + 2 * 16; // stem conv + stem bn
        let mut cin = 16usize;
        for &c in &chans {
            expected_trainable += c * cin * 9 + 2 * c; // conv1 + bn1
            expected_trainable += c * c * 9 + 2 * c; // conv2 + bn2
            expected_trainable += c * cin + 2 * c; // projection + bn
            cin = c;
        }
        assert_eq!(net.params.trainable_element_count(), expected_trainable);
        // BN state adds 2*c per BN layer (4 BNs per desk-a block + stem).
        let bn_channels: usize = 16 + chans.iter().map(|&c| 3 * c).sum::<usize>();
        assert_eq!(net.params.element_count(), expected_trainable + 2 * bn_channels);
    }

    #[test]
    fn teacher_b_spec_differs_from_teacher_a() {
        let a = desk_a_net(1);
        let b = build_network::<f32>(Role::TeacherB, NetSpec::Pyramid(PyramidSpec::desk_b()), 1).unwrap();
        assert_ne!(a.spec, b.spec);
        let names_a: Vec<_> = a.params.names().cloned().collect();
        let names_b: Vec<_> = b.params.names().cloned().collect();
        assert_ne!(names_a, names_b);
        assert!(b.params.element_count() > a.params.element_count());
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let bad = PyramidSpec { stem_channels: 16, blocks: [1, 1, 1, 1], channels: [32, 16, 64, 128] };
        assert!(matches!(
            build_network::<f32>(Role::TeacherA, NetSpec::Pyramid(bad), 1),
            Err(Error::Config(_))
        ));
        let bad2 = PyramidSpec { stem_channels: 0, blocks: [1, 1, 1, 1], channels: [16, 32, 64, 128] };
        assert!(matches!(
            build_network::<f32>(Role::TeacherA, NetSpec::Pyramid(bad2), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pyramid_tap_dims_follow_scale_arithmetic() {
        let mut net = desk_a_net(3);
        net.freeze();
        for size in [64usize, 256] {
            let x = Tensor::<f32>::zeros(Shape::new(1, 3, size, size));
            let p = net.features_eval(&x, Level::ThirtySecond).unwrap();
            for level in DISTILL_LEVELS {
                let t = p.get(level).shape();
                assert_eq!(t.h, size / level.divisor());
                assert_eq!(t.w, size / level.divisor());
                assert_eq!(t.c, net.spec.as_pyramid().unwrap().channels_at(level));
            }
            let b = p.bottleneck.as_ref().unwrap().shape();
            assert_eq!((b.h, b.w), (size / 32, size / 32));
        }
    }

    #[test]
    fn indivisible_input_dims_are_a_shape_error() {
        let mut net = desk_a_net(3);
        net.freeze();
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 48, 64));
        assert!(matches!(
            net.features_eval(&x, Level::Sixteenth),
            Err(Error::Shape(_))
        ));
        let x4 = Tensor::<f32>::zeros(Shape::new(1, 4, 64, 64));
        assert!(matches!(net.features_eval(&x4, Level::Sixteenth), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_eval_forward_is_deterministic() {
        let mut net = desk_a_net(4);
        net.freeze();
        let mut x = Tensor::<f32>::zeros(Shape::new(2, 3, 64, 64));
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f32 / 1000.0;
        }
        let p1 = net.features_eval(&x, Level::ThirtySecond).unwrap();
        let p2 = net.features_eval(&x, Level::ThirtySecond).unwrap();
        for level in DISTILL_LEVELS {
            assert_eq!(p1.get(level).data(), p2.get(level).data());
        }
    }

    #[test]
    fn eval_before_stats_exist_is_a_state_error() {
        let net = desk_a_net(5); // unfrozen, never trained
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64));
        assert!(matches!(
            net.features_eval(&x, Level::Sixteenth),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn train_mode_on_frozen_net_is_a_state_error() {
        let mut net = desk_a_net(6);
        net.freeze();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 64, 64)));
        assert!(matches!(
            net.forward_pyramid_tape(&mut tape, x, Mode::Train, Level::Sixteenth),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn decoder_dims_and_channels_match_teacher_b() {
        let spec_b = PyramidSpec::desk_b();
        let dspec = DecoderSpec::between(&PyramidSpec::desk_a(), &spec_b);
        let mut dec = build_network::<f32>(Role::StudentB, NetSpec::Decoder(dspec.clone()), 9).unwrap();
        dec.freeze(); // freeze only to enable eval mode in this shape test
        let bottleneck = Tensor::<f32>::zeros(Shape::new(1, 128, 2, 2));
        let p = dec.decode_eval(&bottleneck).unwrap();
        assert_eq!(p.sixteenth.shape(), Shape::new(1, spec_b.channels[2], 4, 4));
        assert_eq!(p.eighth.shape(), Shape::new(1, spec_b.channels[1], 8, 8));
        assert_eq!(p.quarter.shape(), Shape::new(1, spec_b.channels[0], 16, 16));
        for level in DISTILL_LEVELS {
            assert_eq!(
                dspec.channels_at(level).unwrap(),
                spec_b.channels_at(level)
            );
        }
    }

    #[test]
    fn decoder_rejects_wrong_bottleneck_channels() {
        let dspec = DecoderSpec::between(&PyramidSpec::desk_a(), &PyramidSpec::desk_b());
        let mut dec = build_network::<f32>(Role::StudentB, NetSpec::Decoder(dspec), 9).unwrap();
        dec.freeze();
        let bad = Tensor::<f32>::zeros(Shape::new(1, 64, 2, 2));
        assert!(matches!(dec.decode_eval(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_block_zero_branch_reduces_to_relu_of_skip() {
        // Zero conv weights + identity skip: block(x) = relu(bn2(0) + x) = relu(x)
        // with BN in eval mode and default stats (gamma*0/sqrt(1+eps)+0 = 0).
        let spec = PyramidSpec { stem_channels: 4, blocks: [2, 1, 1, 1], channels: [4, 4, 8, 8] };
        let mut net = build_network::<f32>(Role::TeacherA, NetSpec::Pyramid(spec), 11).unwrap();
        // Zero out the second block of stage 1 (stride 1, identity skip).
        for name in ["s1.b1.conv1.weight", "s1.b1.conv2.weight"] {
            let p = net.params.get_mut(name);
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        net.freeze();
        let mut tape = Tape::<f32>::no_grad();
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 4, 8, 8));
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (i as f32 / 64.0) - 0.4;
        }
        let xid = tape.constant(x.clone());
        let mut walk = Walk::new(&mut tape, &net, Mode::Eval).unwrap();
        let y = walk.block("s1.b1", xid, 4, 4, 1).unwrap();
        let out = tape.value(y);
        for i in 0..x.numel() {
            assert!((out.data()[i] - x.data()[i].max(0.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_block_matches_hand_composed_sequence() {
        // Same parameters pushed through explicit conv/bn/add/relu kernels.
        use crate::nn::kernels as k;
        let spec = PyramidSpec { stem_channels: 4, blocks: [1, 1, 1, 1], channels: [6, 6, 8, 8] };
        let mut net = build_network::<f32>(Role::TeacherA, NetSpec::Pyramid(spec), 13).unwrap();
        net.freeze();
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 4, 16, 16));
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 100) as f32 / 50.0 - 1.0;
        }
        // Walk path (stride-2 projection block s1.b0).
        let mut tape = Tape::<f32>::no_grad();
        let xid = tape.constant(x.clone());
        let mut walk = Walk::new(&mut tape, &net, Mode::Eval).unwrap();
        let y = walk.block("s1.b0", xid, 4, 6, 2).unwrap();
        let got = tape.value(y).clone();
        assert_eq!(got.shape(), Shape::new(1, 6, 8, 8));
        // Hand-composed path.
        let p = |n: &str| net.params.get(n).value.clone();
        let bn_eval = |name: &str, t: &Tensor<f32>| {
            k::bn_eval_fwd(
                t,
                &p(&format!("{name}.gamma")),
                &p(&format!("{name}.beta")),
                &p(&format!("{name}.running_mean")),
                &p(&format!("{name}.running_var")),
            )
            .unwrap()
        };
        let c1 = k::conv2d_fwd(&x, &p("s1.b0.conv1.weight"), None, 2, 1).unwrap();
        let r1 = k::relu_fwd(&bn_eval("s1.b0.bn1", &c1));
        let c2 = k::conv2d_fwd(&r1, &p("s1.b0.conv2.weight"), None, 1, 1).unwrap();
        let b2 = bn_eval("s1.b0.bn2", &c2);
        let d = k::conv2d_fwd(&x, &p("s1.b0.down.conv.weight"), None, 2, 0).unwrap();
        let bd = bn_eval("s1.b0.down.bn", &d);
        let expect = k::relu_fwd(&k::add_fwd(&b2, &bd).unwrap());
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
