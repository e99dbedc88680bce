//! Checkpoint directories: `manifest.json` plus `tensors.bin`, the
//! concatenation of every tensor as little-endian f32 in row-major order.
//! Parameters come first, then the first and second AdamW moments, each in
//! canonical block order.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use lagrow::checkpoint::ProvenanceEntry;
use lagrow::nn::{ModelConfig, ParamBlocks};
use lagrow::optim::{AdamWConfig, OptState};
use lagrow::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, IoContext, Result};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";
const FORMAT: &str = "lagrow-checkpoint/1";
const SECTIONS: [&str; 3] = ["param", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub t: u64,
    pub hparams: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub step: u64,
    pub data_seed: u64,
    pub optimizer: OptimizerMeta,
    /// Growth operators in application order.
    pub provenance: Vec<ProvenanceEntry>,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    /// Digest of the in-memory training state, checked after loading.
    pub state_digest: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sections(ckpt: &Checkpoint) -> [&ParamBlocks<f32>; 3] {
    [&ckpt.params, &ckpt.opt.m, &ckpt.opt.v]
}

/// The tensor table a checkpoint of this shape must have.
fn expected_table(config: &ModelConfig) -> Vec<TensorEntry> {
    let zeros = ParamBlocks::<f32>::zeros(config);
    let mut offset = 0;
    let mut table = Vec::new();
    for section in SECTIONS {
        for (name, t) in zeros.named_tensors() {
            let bytes = 4 * t.numel() as u64;
            table.push(TensorEntry { name: format!("{section}.{name}"), shape: t.shape().to_vec(), offset, bytes });
            offset += bytes;
        }
    }
    table
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).at(&tmp)?;
    f.write_all(bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Write `ckpt` into `dir`, creating it if needed. The blob is written
/// before the manifest, each through a temporary file and a rename, so a
/// crash never leaves a manifest describing a blob it does not match.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<Manifest> {
    ckpt.validate()?;
    fs::create_dir_all(dir).at(dir)?;
    let mut blob = Vec::with_capacity(12 * ckpt.params.num_params());
    for blocks in sections(ckpt) {
        for t in blocks.tensors() {
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: ckpt.config().clone(),
        step: ckpt.step,
        data_seed: ckpt.data_seed,
        optimizer: OptimizerMeta { t: ckpt.opt.t, hparams: ckpt.opt.hparams.clone() },
        provenance: ckpt.provenance.clone(),
        tensors: expected_table(ckpt.config()),
        blob_bytes: blob.len() as u64,
        blob_sha256: hex(&Sha256::digest(&blob)),
        state_digest: ckpt.digest(),
    };
    write_atomic(&dir.join(BLOB), &blob)?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).at(&path)?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| CliError::corrupt(&path, format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(CliError::corrupt(&path, format!("format {:?}, expected {FORMAT:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Load and verify a checkpoint directory. Any disagreement between the
/// manifest and the blob is a corruption error and nothing is returned.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(BLOB);
    let blob = fs::read(&path).at(&path)?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(CliError::corrupt(
            &path,
            format!("blob has {} bytes, manifest declares {}", blob.len(), manifest.blob_bytes),
        ));
    }
    let sha = hex(&Sha256::digest(&blob));
    if sha != manifest.blob_sha256 {
        return Err(CliError::corrupt(&path, format!("blob sha256 {sha} does not match manifest {}", manifest.blob_sha256)));
    }
    manifest.config.validate().map_err(|e| CliError::corrupt(dir, e.to_string()))?;
    let expected = expected_table(&manifest.config);
    if manifest.tensors != expected {
        let at = manifest.tensors.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(expected.len().min(manifest.tensors.len()));
        return Err(CliError::corrupt(
            dir,
            format!("tensor table does not tile the blob for this model config (first difference at entry {at})"),
        ));
    }
    if expected.last().map_or(0, |e| e.offset + e.bytes) != manifest.blob_bytes {
        return Err(CliError::corrupt(dir, "tensor table does not cover the blob exactly"));
    }

    let mut blocks = [(); 3].map(|_| ParamBlocks::<f32>::zeros(&manifest.config));
    let mut cursor = blob.chunks_exact(4);
    for b in blocks.iter_mut() {
        for t in b.tensors_mut() {
            for (x, c) in t.data_mut().iter_mut().zip(cursor.by_ref()) {
                *x = f32::from_le_bytes(c.try_into().expect("chunk of 4"));
            }
        }
    }
    let [params, m, v] = blocks;
    let ckpt = Checkpoint {
        params,
        opt: OptState { m, v, t: manifest.optimizer.t, hparams: manifest.optimizer.hparams.clone() },
        step: manifest.step,
        data_seed: manifest.data_seed,
        provenance: manifest.provenance.clone(),
    };
    ckpt.validate().map_err(|e| CliError::corrupt(dir, e.to_string()))?;
    if ckpt.digest() != manifest.state_digest {
        return Err(CliError::corrupt(dir, "restored state digest differs from the manifest"));
    }
    Ok(ckpt)
}
