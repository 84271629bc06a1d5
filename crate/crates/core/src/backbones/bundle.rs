//! Model persistence.
//!
//! A bundle is a single archive file: a JSON metadata header (format
//! version, network specs, frozen/BN flags, pretext accuracies, training
//! config echo, and a tensor index), followed by the raw little-endian f32
//! tensor blocks in index order, followed by a SHA-256 checksum of every
//! preceding byte. The same archive container also carries raw anomaly-map
//! dumps.
//!
//! Layout:
//!
//! ```text
//! magic    8  b"STPMARC1"
//! version  4  u32 LE
//! hdr_len  8  u64 LE
//! header   .. JSON (ArchiveHeader)
//! blocks   .. f32 LE data, one block per header.tensors entry, in order
//! sha256  32  checksum of everything above
//! ```

use crate::backbones::{expected_parameters, NetSpec, Network, Pair, Role};
use crate::distill::AttentionGates;
use crate::error::{Error, Result};
use crate::nn::params::{ParamSet, Parameter};
use crate::nn::tensor::{Shape, Tensor4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"STPMARC1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: [usize; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchiveHeader {
    /// What the archive holds: "model-bundle" or "map-dump".
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Write named tensors with a JSON meta document into one archive file.
pub fn write_archive(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor4)],
) -> Result<()> {
    let header = ArchiveHeader {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| {
                let s = t.shape();
                TensorEntry { name: name.clone(), dims: [s.n, s.c, s.h, s.w] }
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header encode failed: {e}")))?;

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let emit = |w: &mut BufWriter<File>, hasher: &mut Sha256, bytes: &[u8]| -> Result<()> {
        hasher.update(bytes);
        w.write_all(bytes)?;
        Ok(())
    };
    emit(&mut w, &mut hasher, ARCHIVE_MAGIC)?;
    emit(&mut w, &mut hasher, &ARCHIVE_VERSION.to_le_bytes())?;
    emit(&mut w, &mut hasher, &(header_bytes.len() as u64).to_le_bytes())?;
    emit(&mut w, &mut hasher, &header_bytes)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        buf.reserve(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        emit(&mut w, &mut hasher, &buf)?;
    }
    w.write_all(&hasher.finalize())?;
    w.flush()?;
    Ok(())
}

/// Read an archive back; verifies magic, version, per-tensor completeness
/// (naming the tensor that hit EOF), and the trailing checksum.
pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, BTreeMap<String, Tensor4>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut hasher = Sha256::new();

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for an archive magic".to_string()))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Format("not a tensor archive (bad magic)".to_string()));
    }
    hasher.update(magic);

    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)
        .map_err(|_| Error::Format("truncated archive version".to_string()))?;
    let version = u32::from_le_bytes(v4);
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!(
            "archive version {version} unsupported (expected {ARCHIVE_VERSION})"
        )));
    }
    hasher.update(v4);

    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)
        .map_err(|_| Error::Format("truncated header length".to_string()))?;
    hasher.update(l8);
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Format("truncated archive header".to_string()))?;
    hasher.update(&header_bytes);
    let header: ArchiveHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("header decode failed: {e}")))?;

    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.dims.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::Format(format!("archive truncated while reading tensor '{}'", entry.name))
        })?;
        hasher.update(&bytes);
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let shape = Shape::new(entry.dims[0], entry.dims[1], entry.dims[2], entry.dims[3]);
        tensors.insert(entry.name.clone(), Tensor4::from_vec(shape, data)?);
    }

    let mut stored = [0u8; 32];
    r.read_exact(&mut stored)
        .map_err(|_| Error::Format("archive missing trailing checksum".to_string()))?;
    if stored != *hasher.finalize() {
        return Err(Error::Format("archive checksum mismatch".to_string()));
    }
    Ok((header, tensors))
}

// ---------------------------------------------------------------------------
// model bundles
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub role: Role,
    pub spec: NetSpec,
    pub frozen: bool,
    pub bn_ready: bool,
    pub pretext_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateMeta {
    pub pair: Pair,
    pub channels: [usize; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleMeta {
    pub image_size: usize,
    pub networks: Vec<NetworkMeta>,
    pub gates: Vec<GateMeta>,
    /// Echo of the training configuration that produced the bundle.
    pub train_config: Option<serde_json::Value>,
}

/// The persisted model set. `teacher_a` is always present; a baseline bundle
/// adds student-A (+gates); a dual bundle adds teacher-B, the decoder, and
/// the second gate set; a teachers-only bundle carries just the teachers.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub image_size: usize,
    pub teacher_a: Network<f32>,
    pub student_a: Option<Network<f32>>,
    pub teacher_b: Option<Network<f32>>,
    pub student_b: Option<Network<f32>>,
    pub gates_a: Option<AttentionGates<f32>>,
    pub gates_b: Option<AttentionGates<f32>>,
    pub train_config: Option<serde_json::Value>,
}

impl ModelBundle {
    /// True when the bundle can run dual-pair inference.
    pub fn is_dual(&self) -> bool {
        self.student_a.is_some() && self.teacher_b.is_some() && self.student_b.is_some()
    }

    pub fn require_baseline(&self) -> Result<()> {
        if self.student_a.is_none() {
            return Err(Error::state("bundle has no student-A; cannot run inference"));
        }
        Ok(())
    }

    pub fn require_dual(&self) -> Result<()> {
        self.require_baseline()?;
        if !self.is_dual() {
            return Err(Error::state(
                "bundle is baseline-only (missing teacher-B or student-B); dual mode needs a full bundle",
            ));
        }
        Ok(())
    }

    fn networks(&self) -> Vec<&Network<f32>> {
        let mut v = vec![&self.teacher_a];
        v.extend(self.student_a.iter());
        v.extend(self.teacher_b.iter());
        v.extend(self.student_b.iter());
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BundleMeta {
            image_size: self.image_size,
            networks: self
                .networks()
                .iter()
                .map(|n| NetworkMeta {
                    role: n.role,
                    spec: n.spec.clone(),
                    frozen: n.frozen,
                    bn_ready: n.bn_ready,
                    pretext_accuracy: n.pretext_accuracy,
                })
                .collect(),
            gates: self
                .gates_a
                .iter()
                .chain(self.gates_b.iter())
                .map(|g| GateMeta { pair: g.pair, channels: g.channels })
                .collect(),
            train_config: self.train_config.clone(),
        };
        let mut tensors: Vec<(String, &Tensor4)> = Vec::new();
        for net in self.networks() {
            for (name, p) in net.params.iter() {
                tensors.push((format!("{}/{}", net.role.tag(), name), &p.value));
            }
        }
        for gates in self.gates_a.iter().chain(self.gates_b.iter()) {
            let prefix = format!("gates_{}", gates.pair.tag());
            for (name, p) in gates.params.iter() {
                tensors.push((format!("{prefix}/{name}"), &p.value));
            }
        }
        let meta_value = serde_json::to_value(&meta)
            .map_err(|e| Error::Format(format!("bundle meta encode failed: {e}")))?;
        write_archive(path, "model-bundle", meta_value, &tensors)
    }

    pub fn load(path: &Path) -> Result<ModelBundle> {
        let (header, mut tensors) = read_archive(path)?;
        if header.kind != "model-bundle" {
            return Err(Error::Format(format!(
                "archive holds '{}', expected a model bundle",
                header.kind
            )));
        }
        let meta: BundleMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::Format(format!("bundle meta decode failed: {e}")))?;

        let mut take_net = |nm: &NetworkMeta| -> Result<Network<f32>> {
            let mut params = ParamSet::new();
            for (name, shape, trainable) in expected_parameters(&nm.spec) {
                let key = format!("{}/{}", nm.role.tag(), name);
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::Format(format!("bundle missing tensor '{key}'")))?;
                if t.shape() != shape {
                    return Err(Error::Format(format!(
                        "tensor '{key}' has shape {} but the spec requires {shape}",
                        t.shape()
                    )));
                }
                params.insert(name, Parameter::new(t, trainable && !nm.frozen));
            }
            Ok(Network {
                role: nm.role,
                spec: nm.spec.clone(),
                params,
                frozen: nm.frozen,
                bn_ready: nm.bn_ready,
                pretext_accuracy: nm.pretext_accuracy,
            })
        };

        let mut nets: BTreeMap<Role, Network<f32>> = BTreeMap::new();
        for nm in &meta.networks {
            nets.insert(nm.role, take_net(nm)?);
        }
        let teacher_a = nets
            .remove(&Role::TeacherA)
            .ok_or_else(|| Error::Format("bundle has no teacher-A network".to_string()))?;

        let mut load_gates = |gm: &GateMeta| -> Result<AttentionGates<f32>> {
            let mut gates = AttentionGates::<f32>::build(gm.pair, gm.channels, 0);
            let prefix = format!("gates_{}", gm.pair.tag());
            let names: Vec<String> = gates.params.names().cloned().collect();
            for name in names {
                let key = format!("{prefix}/{name}");
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::Format(format!("bundle missing tensor '{key}'")))?;
                let p = gates.params.get_mut(&name);
                if t.shape() != p.value.shape() {
                    return Err(Error::Format(format!("tensor '{key}' shape mismatch")));
                }
                p.value = t;
            }
            Ok(gates)
        };
        let mut gates_a = None;
        let mut gates_b = None;
        for gm in &meta.gates {
            match gm.pair {
                Pair::A => gates_a = Some(load_gates(gm)?),
                Pair::B => gates_b = Some(load_gates(gm)?),
            }
        }

        Ok(ModelBundle {
            image_size: meta.image_size,
            teacher_a,
            student_a: nets.remove(&Role::StudentA),
            teacher_b: nets.remove(&Role::TeacherB),
            student_b: nets.remove(&Role::StudentB),
            gates_a,
            gates_b,
            train_config: meta.train_config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::pretext::freeze_untrained;
    use crate::backbones::{build_network, DecoderSpec, Level, PyramidSpec};
    use crate::nn::init::{rng_from, uniform};

    fn small_bundle(seed: u64) -> ModelBundle {
        let spec_a = PyramidSpec { stem_channels: 4, blocks: [1, 1, 1, 1], channels: [4, 8, 12, 16] };
        let spec_b = PyramidSpec { stem_channels: 6, blocks: [1, 1, 1, 1], channels: [6, 12, 18, 24] };
        let mut ta = build_network(Role::TeacherA, NetSpec::Pyramid(spec_a.clone()), seed).unwrap();
        freeze_untrained(&mut ta);
        let mut tb = build_network(Role::TeacherB, NetSpec::Pyramid(spec_b.clone()), seed + 1).unwrap();
        freeze_untrained(&mut tb);
        let mut sa = build_network(Role::StudentA, NetSpec::Pyramid(spec_a.clone()), seed + 2).unwrap();
        sa.bn_ready = true; // pretend it trained
        let mut sb = build_network(
            Role::StudentB,
            NetSpec::Decoder(DecoderSpec::between(&spec_a, &spec_b)),
            seed + 3,
        )
        .unwrap();
        sb.bn_ready = true;
        ModelBundle {
            image_size: 64,
            teacher_a: ta,
            student_a: Some(sa),
            teacher_b: Some(tb),
            student_b: Some(sb),
            gates_a: Some(AttentionGates::build(Pair::A, [4, 8, 12], seed + 4)),
            gates_b: Some(AttentionGates::build(Pair::B, [6, 12, 18], seed + 5)),
            train_config: Some(serde_json::json!({"epochs": 1})),
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.stpm");
        let bundle = small_bundle(50);
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert!(loaded.is_dual());
        assert_eq!(loaded.image_size, 64);
        assert!(loaded
            .teacher_a
            .params
            .matches_snapshot(&bundle.teacher_a.params.snapshot()));
        assert!(loaded
            .student_b
            .as_ref()
            .unwrap()
            .params
            .matches_snapshot(&bundle.student_b.as_ref().unwrap().params.snapshot()));
        // forward outputs bit-identical on a fixed input
        let mut x = Tensor4::zeros(Shape::new(1, 3, 64, 64));
        let mut rng = rng_from(1, "probe");
        for v in x.data_mut() {
            *v = uniform(&mut rng, 0.0, 1.0) as f32;
        }
        let p1 = bundle.teacher_a.features_eval(&x, Level::Sixteenth).unwrap();
        let p2 = loaded.teacher_a.features_eval(&x, Level::Sixteenth).unwrap();
        assert_eq!(p1.quarter.data(), p2.quarter.data());
        assert_eq!(p1.sixteenth.data(), p2.sixteenth.data());
    }

    #[test]
    fn truncated_file_names_the_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.stpm");
        small_bundle(51).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Cut the file in the middle of the tensor blocks.
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = ModelBundle::load(&path).unwrap_err();
        match err {
            Error::Format(msg) => {
                assert!(msg.contains("truncated while reading tensor"), "{msg}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_payload_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.stpm");
        small_bundle(52).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = ModelBundle::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format(msg) if msg.contains("checksum")));
    }

    #[test]
    fn baseline_only_bundle_loads_and_reports_partial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("baseline.stpm");
        let mut bundle = small_bundle(53);
        bundle.teacher_b = None;
        bundle.student_b = None;
        bundle.gates_b = None;
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert!(!loaded.is_dual());
        loaded.require_baseline().unwrap();
        assert!(matches!(loaded.require_dual(), Err(Error::State(_))));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.stpm");
        std::fs::write(&path, b"definitely not an archive").unwrap();
        assert!(matches!(ModelBundle::load(&path), Err(Error::Format(_))));
    }
}
