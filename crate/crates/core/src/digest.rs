//! SHA-256 digests of numeric state, used to prove that frozen parameters
//! and retrieval results did not move.

use sha2::{Digest, Sha256};

use crate::retrieval::RetrievalResult;

#[derive(Default)]
pub struct StateHasher(Sha256);

impl StateHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        self.0.update((values.len() as u64).to_le_bytes());
        for v in values {
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn u64s(&mut self, values: impl IntoIterator<Item = u64>) -> &mut Self {
        for v in values {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn results(&mut self, results: &[RetrievalResult]) -> &mut Self {
        for r in results {
            self.u64s([r.query_id, r.k() as u64]);
            self.u64s(r.reference_ids.iter().copied());
            self.f64s(&r.similarities);
        }
        self
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

pub fn hash_f64s(values: &[f64]) -> String {
    StateHasher::new().f64s(values).hex()
}
