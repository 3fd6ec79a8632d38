//! Binary checkpoints: `SMOECKPT`, a little-endian `u32` version and `u64`
//! header length, a JSON header, then raw `f32` blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::harness::{RunState, Trainer};
use super::optim::OptimizerState;
use crate::corpus::CorpusSplit;
use crate::error::{ensure, Error, Result};
use crate::model::Model;
use crate::routers::BlobEntry;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMOECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    manifest_id: String,
    config: TrainConfig,
    corpus_hash: String,
    router_checksum: Option<String>,
    optimizer_step: u64,
    state: RunState,
    /// Parameters, then first and second moments, each in registration order.
    blobs: Vec<BlobEntry>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl Trainer {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut data = Vec::new();
        let mut blobs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &[f32]| {
            let bytes = f32_bytes(values);
            blobs.push(BlobEntry {
                name,
                shape,
                offset: data.len() as u64,
                len: bytes.len() as u64,
                sha256: sha_hex(&bytes),
            });
            data.extend(bytes);
        };
        for (_, name, t) in self.store.iter() {
            push(name.to_owned(), t.shape().to_vec(), t.data());
        }
        for (kind, moments) in [("m", &self.optim.m), ("v", &self.optim.v)] {
            for ((_, name, t), values) in self.store.iter().zip(moments) {
                push(format!("{kind}:{name}"), t.shape().to_vec(), values);
            }
        }
        let header = Header {
            manifest_id: self.manifest.id.clone(),
            config: self.cfg.clone(),
            corpus_hash: self.manifest.corpus.content_hash.clone(),
            router_checksum: self.model.router.as_ref().and_then(|r| r.frozen_checksum().map(str::to_owned)),
            optimizer_step: self.optim.step,
            state: self.state.clone(),
            blobs,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(data);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Resumes a run. `corpus` must be the split the run was started on.
    pub fn load_checkpoint(path: &Path, corpus: &CorpusSplit) -> Result<Trainer> {
        let ckpt = Checkpoint::read(path)?;
        ensure!(
            ckpt.header.corpus_hash == corpus.content_hash,
            Integrity,
            "checkpoint was trained on corpus {}, given {}",
            ckpt.header.corpus_hash,
            corpus.content_hash
        );
        let id = ckpt.header.manifest_id;
        let trainer = Trainer::assemble(ckpt.header.config, ckpt.model, ckpt.store, ckpt.optim, ckpt.header.state, corpus)?;
        ensure!(
            trainer.manifest.id == id,
            Integrity,
            "checkpoint belongs to run {id}, this build and corpus give {}",
            trainer.manifest.id
        );
        Ok(trainer)
    }
}

/// A decoded checkpoint.
pub struct Checkpoint {
    header: Header,
    pub model: Model,
    pub store: ParamStore<f32>,
    optim: OptimizerState<f32>,
}

impl Checkpoint {
    pub fn config(&self) -> &TrainConfig {
        &self.header.config
    }

    /// Manifest id of the run that wrote the checkpoint.
    pub fn manifest_id(&self) -> &str {
        &self.header.manifest_id
    }

    /// Completed training steps.
    pub fn step(&self) -> usize {
        self.header.state.step
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ensure!(
            bytes.len() >= 20 && &bytes[..8] == CHECKPOINT_MAGIC,
            Integrity,
            "{} is not a checkpoint",
            path.display()
        );
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        ensure!(
            version == CHECKPOINT_VERSION,
            Integrity,
            "checkpoint version {version} is not {CHECKPOINT_VERSION}"
        );
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| integrity("checkpoint header is truncated"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| integrity(format!("checkpoint header: {e}")))?;
        let data = &bytes[header_end..];

        let mut store = ParamStore::new();
        let mut model = Model::new(&header.config, &mut store)?;
        let n = store.len();
        ensure!(
            header.blobs.len() == 3 * n,
            Integrity,
            "checkpoint holds {} blobs, model needs {}",
            header.blobs.len(),
            3 * n
        );
        let mut values = Vec::with_capacity(header.blobs.len());
        for blob in &header.blobs {
            let start = blob.offset as usize;
            let end = start
                .checked_add(blob.len as usize)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| integrity(format!("blob {} is truncated", blob.name)))?;
            let raw = &data[start..end];
            ensure!(sha_hex(raw) == blob.sha256, Integrity, "blob {} fails its checksum", blob.name);
            values.push(f32_values(raw));
        }
        let ids: Vec<_> = store.ids().collect();
        for (i, &id) in ids.iter().enumerate() {
            let name = store.name(id).to_owned();
            for (k, prefix) in ["", "m:", "v:"].iter().enumerate() {
                let blob = &header.blobs[k * n + i];
                ensure!(
                    blob.name == format!("{prefix}{name}") && blob.shape == store.get(id).shape(),
                    Integrity,
                    "blob {} {:?} does not match parameter {name} {:?}",
                    blob.name,
                    blob.shape,
                    store.get(id).shape()
                );
            }
            let t = Tensor::new(header.blobs[i].shape.clone(), values[i].clone())?;
            let requires_grad = store.get(id).requires_grad();
            *store.get_mut(id) = t.with_requires_grad(requires_grad);
        }
        let optim = OptimizerState {
            step: header.optimizer_step,
            m: values[n..2 * n].to_vec(),
            v: values[2 * n..].to_vec(),
        };
        if let Some(expected) = &header.router_checksum {
            let actual = model
                .freeze_router(&mut store)
                .ok_or_else(|| integrity("checkpoint records a frozen router the model lacks"))?;
            ensure!(
                &actual == expected,
                Integrity,
                "frozen router checksum {actual} != recorded {expected}"
            );
        }
        Ok(Checkpoint {
            header,
            model,
            store,
            optim,
        })
    }
}
