use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Fixed token-id → expert table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTable {
    table: Vec<usize>,
    num_experts: usize,
    seed: u64,
}

/// Seeded permutation of the ids, dealt round-robin to the experts.
pub fn build_hash_table(vocab_size: usize, num_experts: usize, seed: u64) -> Result<HashTable> {
    ensure!(num_experts >= 1, Contract, "hash table needs at least one expert");
    let mut ids: Vec<usize> = (0..vocab_size).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut table = vec![0; vocab_size];
    for (pos, &id) in ids.iter().enumerate() {
        table[id] = pos % num_experts;
    }
    Ok(HashTable {
        table,
        num_experts,
        seed,
    })
}

impl HashTable {
    /// `id mod N` table.
    pub fn modulo(vocab_size: usize, num_experts: usize) -> Result<HashTable> {
        ensure!(num_experts >= 1, Contract, "hash table needs at least one expert");
        Ok(HashTable {
            table: (0..vocab_size).map(|i| i % num_experts).collect(),
            num_experts,
            seed: 0,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn table(&self) -> &[usize] {
        &self.table
    }

    pub fn assign(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&id| {
                self.table.get(id).copied().ok_or_else(|| {
                    crate::Error::Index(format!("id {id} out of range for hash table of {}", self.table.len()))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::loads;

    #[test]
    fn modulo_table_lookup() {
        let t = HashTable::modulo(256, 4).unwrap();
        assert_eq!(t.assign(&[5]).unwrap(), vec![1]);
        assert_eq!(t.assign(&[5, 9, 5]).unwrap(), vec![1, 1, 1]);
        assert!(t.assign(&[256]).unwrap_err().to_string().starts_with("index"));
    }

    #[test]
    fn construction_is_balanced() {
        let t = build_hash_table(8, 4, 3).unwrap();
        assert_eq!(loads(t.table(), 4), vec![2, 2, 2, 2]);
        for (v, n) in [(256, 8), (256, 7), (10, 3), (3, 5)] {
            let l = loads(build_hash_table(v, n, 1).unwrap().table(), n);
            assert!(l.iter().max().unwrap() - l.iter().min().unwrap() <= 1);
        }
        assert!(build_hash_table(8, 0, 0).is_err());
    }

    #[test]
    fn seeding() {
        assert_eq!(build_hash_table(256, 8, 42).unwrap(), build_hash_table(256, 8, 42).unwrap());
        assert_ne!(
            build_hash_table(256, 8, 42).unwrap().table(),
            build_hash_table(256, 8, 43).unwrap().table()
        );
    }
}
