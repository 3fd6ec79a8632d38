//! Word-embedding router distilled from the learned routing, then frozen.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::INIT_STD;
use crate::error::{ensure, Error, Result};
use crate::tensor::kernels::dot;
use crate::tensor::{Element, ParamId, ParamStore, Reduction, Tape, Tensor, Var};

pub const ROUTER_EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledRouter {
    /// Feature table `D`, `[V, d̂]`.
    pub table: ParamId,
    /// Distilled centroids `Ê`, `[N, d̂]`.
    pub centroids: ParamId,
    pub vocab_size: usize,
    pub num_experts: usize,
    pub feature_dim: usize,
    frozen_checksum: Option<String>,
}

/// Softmax cross-entropy of the student scores against the teacher's hard
/// labels.
pub fn distillation_loss<T: Element>(
    tape: &mut Tape<T>,
    scores: Var,
    teacher: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    tape.cross_entropy(scores, teacher, reduction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
    pub sha256: String,
}

/// JSON side of an exported frozen router; values live in a sibling `.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterManifest {
    pub version: u32,
    pub vocab_size: usize,
    pub num_experts: usize,
    pub feature_dim: usize,
    /// Manifest id of the run that froze the router.
    pub run_id: String,
    pub checksum: String,
    pub blobs: Vec<BlobEntry>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DistilledRouter {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        num_experts: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(vocab_size > 0, Config, "router vocab_size must be positive");
        ensure!(num_experts > 0, Config, "router num_experts must be positive");
        ensure!(feature_dim > 0, Config, "router feature_dim must be positive");
        let table = store.add("router.table", Tensor::randn(vec![vocab_size, feature_dim], INIT_STD, rng));
        let centroids = store.add("router.centroids", Tensor::randn(vec![num_experts, feature_dim], INIT_STD, rng));
        Ok(DistilledRouter {
            table,
            centroids,
            vocab_size,
            num_experts,
            feature_dim,
            frozen_checksum: None,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_checksum.is_some()
    }

    pub fn frozen_checksum(&self) -> Option<&str> {
        self.frozen_checksum.as_deref()
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.table, self.centroids]
    }

    /// `ĥ_t = D(X_t)`.
    pub fn features<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[usize]) -> Result<Var> {
        let d = tape.param(store, self.table);
        tape.embedding(d, tokens)
    }

    /// `ŝ = ĥ·Êᵀ`.
    pub fn scores<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let e = tape.param(store, self.centroids);
        tape.matmul_nt(features, e)
    }

    pub fn checksum<T: Element>(&self, store: &ParamStore<T>) -> String {
        store.checksum_of(&self.param_ids())
    }

    /// Clears trainability and records the parameter checksum. Freezing twice
    /// keeps the first checksum.
    pub fn freeze<T: Element>(&mut self, store: &mut ParamStore<T>) -> String {
        if let Some(c) = &self.frozen_checksum {
            return c.clone();
        }
        for id in self.param_ids() {
            store.get_mut(id).set_requires_grad(false);
        }
        let c = self.checksum(store);
        self.frozen_checksum = Some(c.clone());
        c
    }

    /// Fails unless the parameters still match the checksum taken at freeze.
    pub fn verify<T: Element>(&self, store: &ParamStore<T>) -> Result<()> {
        let expected = self
            .frozen_checksum
            .as_deref()
            .ok_or_else(|| Error::Contract("router is not frozen".into()))?;
        let actual = self.checksum(store);
        ensure!(
            actual == expected,
            Integrity,
            "frozen router parameters changed: checksum {actual} != {expected}"
        );
        ensure!(
            self.param_ids().iter().all(|&id| !store.get(id).requires_grad()),
            Integrity,
            "frozen router parameters were made trainable again"
        );
        Ok(())
    }

    /// Argmax expert of every vocabulary id; the same arithmetic as the tape's
    /// score path, so ties and rounding match.
    pub fn route_table<T: Element>(&self, store: &ParamStore<T>) -> Vec<usize> {
        let d = store.get(self.table).data();
        let e = store.get(self.centroids).data();
        let k = self.feature_dim;
        (0..self.vocab_size)
            .map(|v| {
                let row = &d[v * k..(v + 1) * k];
                let mut best = 0;
                let mut best_s = dot(row, &e[..k]);
                for i in 1..self.num_experts {
                    let s = dot(row, &e[i * k..(i + 1) * k]);
                    if s > best_s {
                        best_s = s;
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Per-token expert from the router's argmax; depends on the id alone.
    pub fn assign<T: Element>(&self, store: &ParamStore<T>, tokens: &[usize]) -> Result<Vec<usize>> {
        let table = self.route_table(store);
        tokens
            .iter()
            .map(|&id| {
                table
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("id {id} out of range for vocabulary of {}", self.vocab_size)))
            })
            .collect()
    }

    /// Writes `<stem>.json` and `<stem>.bin` with single-precision values.
    pub fn export<T: Element>(&self, store: &ParamStore<T>, stem: &Path, run_id: &str) -> Result<RouterManifest> {
        let checksum = self
            .frozen_checksum
            .clone()
            .ok_or_else(|| Error::Contract("only a frozen router can be exported".into()))?;
        let mut bin = Vec::new();
        let mut blobs = Vec::new();
        for (name, id) in [("D", self.table), ("E_hat", self.centroids)] {
            let t: Tensor<f32> = store.get(id).cast();
            let bytes = t.to_le_bytes();
            blobs.push(BlobEntry {
                name: name.into(),
                shape: t.shape().to_vec(),
                offset: bin.len() as u64,
                len: bytes.len() as u64,
                sha256: sha_hex(&bytes),
            });
            bin.extend(bytes);
        }
        let manifest = RouterManifest {
            version: ROUTER_EXPORT_VERSION,
            vocab_size: self.vocab_size,
            num_experts: self.num_experts,
            feature_dim: self.feature_dim,
            run_id: run_id.to_owned(),
            checksum,
            blobs,
        };
        let (json_path, bin_path) = export_paths(stem);
        fs::write(&bin_path, &bin).map_err(|e| Error::io(&bin_path, e))?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        Ok(manifest)
    }

    /// Loads an exported router into `store`, frozen.
    pub fn import(store: &mut ParamStore<f32>, stem: &Path) -> Result<(Self, RouterManifest)> {
        let (json_path, bin_path) = export_paths(stem);
        let json = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: RouterManifest =
            serde_json::from_str(&json).map_err(|e| Error::Integrity(format!("router manifest: {e}")))?;
        ensure!(
            manifest.version == ROUTER_EXPORT_VERSION,
            Integrity,
            "router export version {} is not {}",
            manifest.version,
            ROUTER_EXPORT_VERSION
        );
        let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut tensors = Vec::new();
        for (blob, expect) in manifest.blobs.iter().zip([
            vec![manifest.vocab_size, manifest.feature_dim],
            vec![manifest.num_experts, manifest.feature_dim],
        ]) {
            ensure!(blob.shape == expect, Integrity, "blob {} has shape {:?}, expected {:?}", blob.name, blob.shape, expect);
            let end = blob.offset.checked_add(blob.len).filter(|&e| e as usize <= bin.len());
            let end = end.ok_or_else(|| Error::Integrity(format!("blob {} exceeds the data file", blob.name)))?;
            let bytes = &bin[blob.offset as usize..end as usize];
            ensure!(sha_hex(bytes) == blob.sha256, Integrity, "blob {} checksum mismatch", blob.name);
            let vals = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(blob.shape.clone(), vals).map_err(|e| Error::Integrity(e.to_string()))?);
        }
        ensure!(tensors.len() == 2, Integrity, "router export needs two blobs, found {}", tensors.len());
        let centroids = store.add("router.centroids", tensors.pop().expect("two blobs"));
        let table = store.add("router.table", tensors.pop().expect("two blobs"));
        let mut router = DistilledRouter {
            table,
            centroids,
            vocab_size: manifest.vocab_size,
            num_experts: manifest.num_experts,
            feature_dim: manifest.feature_dim,
            frozen_checksum: None,
        };
        router.freeze(store);
        Ok((router, manifest))
    }
}

fn export_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn router(seed: u64) -> (DistilledRouter, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let r = DistilledRouter::new(&mut store, 10, 3, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (r, store)
    }

    #[test]
    fn one_hot_features_are_rows() {
        let (r, mut store) = router(0);
        *store.get_mut(r.table) = Tensor::from_fn(vec![10, 4], |i| if i % 4 == (i / 4) % 4 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let f = r.features(&mut tape, &store, &[0, 5, 0]).unwrap();
        let v = tape.value(f);
        assert_eq!(&v[..4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&v[..4], &v[8..12]);
        assert!(r.features(&mut tape, &store, &[10]).unwrap_err().to_string().starts_with("index"));
    }

    #[test]
    fn lookup_gradient_touches_present_rows_only() {
        let (r, mut store) = router(1);
        let mut tape = Tape::new();
        let f = r.features(&mut tape, &store, &[2, 7, 2]).unwrap();
        let s = r.scores(&mut tape, &store, f).unwrap();
        let l = distillation_loss(&mut tape, s, &[0, 1, 2], Reduction::Sum).unwrap();
        tape.backward(l, &mut store).unwrap();
        let g = store.get(r.table).grad().unwrap();
        for v in 0..10 {
            let touched = g[v * 4..v * 4 + 4].iter().any(|&x| x != 0.0);
            assert_eq!(touched, v == 2 || v == 7, "row {v}");
        }
    }

    #[test]
    fn score_examples() {
        let (r, mut store) = router(2);
        *store.get_mut(r.centroids) = Tensor::from_fn(vec![3, 4], |i| if i % 4 == i / 4 { 1.0 } else { 0.0 });
        *store.get_mut(r.table) = Tensor::from_fn(vec![10, 4], |i| if i == 0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let f = r.features(&mut tape, &store, &[0, 1]).unwrap();
        let s = r.scores(&mut tape, &store, f).unwrap();
        assert_eq!(tape.value(s), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn distillation_examples() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(vec![1, 32], vec![0.0; 32]).unwrap();
        let l = distillation_loss(&mut tape, s, &[7], Reduction::Sum).unwrap();
        assert!((tape.scalar(l) - 32f64.ln()).abs() < 1e-12);

        let s = tape.constant(vec![2, 2], vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        let l = distillation_loss(&mut tape, s, &[0, 1], Reduction::Sum).unwrap();
        assert!(tape.scalar(l) < 1e-30);

        let rows = [[0.2, -0.4, 1.1], [-0.3, 0.9, 0.05]];
        let s = tape.constant(vec![2, 3], rows.concat()).unwrap();
        let ce = |r: &[f64; 3], t: usize| r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[t];
        let expect = ce(&rows[0], 2) + ce(&rows[1], 0);
        let l = distillation_loss(&mut tape, s, &[2, 0], Reduction::Sum).unwrap();
        assert!((tape.scalar(l) - expect).abs() < 1e-12);
        let m = distillation_loss(&mut tape, s, &[2, 0], Reduction::Mean).unwrap();
        assert!((tape.scalar(m) - expect / 2.0).abs() < 1e-12);
    }

    #[test]
    fn freeze_clears_grads_and_is_idempotent() {
        let (mut r, mut store) = router(3);
        let before = r.assign(&store, &[1, 2, 3]).unwrap();
        let c1 = r.freeze(&mut store);
        assert_eq!(r.freeze(&mut store), c1);
        assert!(r.is_frozen());
        let mut tape = Tape::new();
        let f = r.features(&mut tape, &store, &[1, 2, 3]).unwrap();
        let s = r.scores(&mut tape, &store, f).unwrap();
        let l = distillation_loss(&mut tape, s, &[0, 1, 2], Reduction::Sum);
        // nothing trainable reaches the loss
        let root = l.unwrap();
        tape.backward(root, &mut store).unwrap();
        assert!(store.get(r.table).grad().is_none());
        assert!(store.get(r.centroids).grad().is_none());
        assert_eq!(r.assign(&store, &[1, 2, 3]).unwrap(), before);
        r.verify(&store).unwrap();
    }

    #[test]
    fn verify_detects_mutation() {
        let (mut r, mut store) = router(4);
        assert!(r.verify(&store).is_err());
        r.freeze(&mut store);
        store.get_mut(r.table).data_mut()[0] += 1e-6;
        assert!(r.verify(&store).unwrap_err().to_string().starts_with("integrity"));
    }

    #[test]
    fn route_table_matches_tape_argmax() {
        let (r, store) = router(5);
        let tokens: Vec<usize> = (0..10).collect();
        let mut tape = Tape::new();
        let f = r.features(&mut tape, &store, &tokens).unwrap();
        let s = r.scores(&mut tape, &store, f).unwrap();
        let greedy = crate::moe::greedy_assign(tape.value(s), 3).unwrap();
        assert_eq!(r.route_table(&store), greedy);
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("router");
        let mut store = ParamStore::<f32>::new();
        let mut r = DistilledRouter::new(&mut store, 10, 3, 4, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(r.export(&store, &stem, "run").is_err());
        r.freeze(&mut store);
        let m = r.export(&store, &stem, "run").unwrap();
        assert_eq!(m.blobs.len(), 2);
        let mut other = ParamStore::new();
        let (back, m2) = DistilledRouter::import(&mut other, &stem).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.route_table(&other), r.route_table(&store));
        assert_eq!(other.get(back.table).data(), store.get(r.table).data());

        let bin = stem.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        fs::write(&bin, bytes).unwrap();
        let err = DistilledRouter::import(&mut ParamStore::new(), &stem).unwrap_err();
        assert!(err.to_string().starts_with("integrity"));
    }
}
