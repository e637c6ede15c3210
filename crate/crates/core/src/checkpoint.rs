//! On-disk model checkpoints: a JSON manifest describing every tensor plus a
//! contiguous little-endian `f32` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectorArch, DetectorModel, Embedder};
use crate::e3::{build_ekfn, EkfnArch, ExpertEnsemble, FusionNetwork};
use crate::error::{E3Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMeta {
    Detector {
        arch: DetectorArch,
    },
    Embedder {
        arch: DetectorArch,
    },
    Ensemble {
        arch: DetectorArch,
        num_experts: usize,
        ekfn: EkfnArch,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelMeta,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Anything that can be checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Detector(DetectorModel),
    Embedder(Embedder),
    /// Every expert embedder plus the fusion network of one E3 state.
    Ensemble {
        ensemble: ExpertEnsemble,
        ekfn: FusionNetwork,
    },
}

impl Checkpoint {
    pub fn meta(&self) -> ModelMeta {
        match self {
            Checkpoint::Detector(m) => ModelMeta::Detector { arch: m.arch() },
            Checkpoint::Embedder(e) => ModelMeta::Embedder { arch: e.arch },
            Checkpoint::Ensemble { ensemble, ekfn } => ModelMeta::Ensemble {
                arch: ensemble.baseline().arch,
                num_experts: ensemble.len(),
                ekfn: ekfn.arch,
            },
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Checkpoint::Detector(m) => m.named_params(),
            Checkpoint::Embedder(e) => e.named_params(),
            Checkpoint::Ensemble { ensemble, ekfn } => {
                let mut out = Vec::new();
                for (i, e) in ensemble.experts().iter().enumerate() {
                    out.extend(e.named_params().into_iter().map(|(n, t)| (format!("expert{i}.{n}"), t)));
                }
                out.extend(ekfn.named_params().into_iter().map(|(n, t)| (format!("ekfn.{n}"), t)));
                out
            }
        }
    }

    pub fn into_detector(self) -> Result<DetectorModel> {
        match self {
            Checkpoint::Detector(m) => Ok(m),
            other => Err(E3Error::Format(format!("expected a detector checkpoint, found {}", other.kind()))),
        }
    }

    pub fn into_ensemble(self) -> Result<(ExpertEnsemble, FusionNetwork)> {
        match self {
            Checkpoint::Ensemble { ensemble, ekfn } => Ok((ensemble, ekfn)),
            other => Err(E3Error::Format(format!("expected an ensemble checkpoint, found {}", other.kind()))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Detector(_) => "detector",
            Checkpoint::Embedder(_) => "embedder",
            Checkpoint::Ensemble { .. } => "ensemble",
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes `ckpt` into memory: `(manifest, payload)`.
pub fn encode(ckpt: &Checkpoint) -> (CheckpointManifest, Vec<u8>) {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.named_tensors() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: ckpt.meta(),
        payload_bytes: payload.len() as u64,
        payload_sha256: sha256_hex(&payload),
        tensors,
    };
    (manifest, payload)
}

/// Writes `ckpt` as `dir/manifest.json` + `dir/payload.bin`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let (manifest, payload) = encode(ckpt);
    fs::create_dir_all(dir)?;
    fs::write(dir.join(PAYLOAD_FILE), &payload)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| E3Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| E3Error::Format(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(E3Error::Format(format!(
            "checkpoint format {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    decode(&manifest, &payload)
}

fn check_layout(manifest: &CheckpointManifest, payload: &[u8]) -> Result<()> {
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(E3Error::Format(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let mut cursor = 0u64;
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        if t.offset != cursor || t.length != 4 * numel as u64 {
            return Err(E3Error::Format(format!(
                "tensor `{}` at offset {} with length {} does not follow the contiguous layout",
                t.name, t.offset, t.length
            )));
        }
        cursor += t.length;
    }
    if cursor != manifest.payload_bytes {
        return Err(E3Error::Format(format!(
            "tensor lengths sum to {cursor} bytes, payload has {}",
            manifest.payload_bytes
        )));
    }
    if sha256_hex(payload) != manifest.payload_sha256 {
        return Err(E3Error::Format("payload checksum mismatch".into()));
    }
    Ok(())
}

fn skeleton(meta: &ModelMeta) -> Result<Checkpoint> {
    Ok(match *meta {
        ModelMeta::Detector { arch } => Checkpoint::Detector(DetectorModel::with_arch(arch, 0)?),
        ModelMeta::Embedder { arch } => Checkpoint::Embedder(Embedder::new(arch, 0)?),
        ModelMeta::Ensemble { arch, num_experts, ekfn } => {
            if num_experts == 0 {
                return Err(E3Error::Format("ensemble checkpoint with zero experts".into()));
            }
            let mut ensemble = ExpertEnsemble::new(Embedder::new(arch, 0)?);
            for _ in 1..num_experts {
                ensemble.push(Embedder::new(arch, 0)?)?;
            }
            let ekfn = build_ekfn(num_experts, arch.embed_dim, ekfn, 0)?;
            Checkpoint::Ensemble { ensemble, ekfn }
        }
    })
}

fn params_mut(ckpt: &mut Checkpoint) -> Vec<&mut Tensor> {
    match ckpt {
        Checkpoint::Detector(m) => m.params_mut(),
        Checkpoint::Embedder(e) => e.params_mut(),
        Checkpoint::Ensemble { ensemble, ekfn } => {
            let mut out = ensemble.params_mut();
            out.extend(ekfn.params_mut());
            out
        }
    }
}

/// Rebuilds a model from an in-memory manifest and payload.
pub fn decode(manifest: &CheckpointManifest, payload: &[u8]) -> Result<Checkpoint> {
    check_layout(manifest, payload)?;
    let mut ckpt = skeleton(&manifest.model)?;
    let expected: Vec<(String, Vec<usize>)> = ckpt.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != manifest.tensors.len() {
        return Err(E3Error::Format(format!(
            "manifest lists {} tensors, a {} of this architecture has {}",
            manifest.tensors.len(),
            ckpt.kind(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(E3Error::Format(format!(
                "expected tensor `{name}` {shape:?}, manifest has `{}` {:?}",
                entry.name, entry.shape
            )));
        }
    }
    for (param, entry) in params_mut(&mut ckpt).into_iter().zip(&manifest.tensors) {
        let bytes = &payload[entry.offset as usize..(entry.offset + entry.length) as usize];
        for (dst, src) in param.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
        }
    }
    Ok(ckpt)
}
