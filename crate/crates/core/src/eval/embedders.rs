use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::data::{tf_vector, TfIdf};
use crate::error::Result;
use crate::model::Parameters;
use crate::state_store::update_recent_only;

/// Maps a behavior sequence to a fixed-length vector.
pub trait Embedder: Sync {
    fn name(&self) -> String;
    fn embed(&self, seq: &[u32]) -> Result<Vec<f64>>;
}

/// Embeds every sequence, spreading the work over `workers` threads. The
/// output order (and every value) is independent of the worker count.
pub fn embed_all(embedder: &dyn Embedder, seqs: &[&[u32]], workers: usize) -> Result<Vec<Vec<f64>>> {
    let workers = workers.max(1).min(seqs.len().max(1));
    if workers == 1 {
        return seqs.iter().map(|s| embedder.embed(s)).collect();
    }
    let per = seqs.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seqs
            .chunks(per)
            .map(|chunk| scope.spawn(move || chunk.iter().map(|s| embedder.embed(s)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("embedding worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(seqs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Normalized behavior counts.
pub struct TfEmbedder {
    pub vocab_size: usize,
}

impl Embedder for TfEmbedder {
    fn name(&self) -> String {
        "tf".into()
    }

    fn embed(&self, seq: &[u32]) -> Result<Vec<f64>> {
        tf_vector(seq, self.vocab_size)
    }
}

pub struct TfIdfEmbedder {
    pub model: TfIdf,
}

impl Embedder for TfIdfEmbedder {
    fn name(&self) -> String {
        "tfidf".into()
    }

    fn embed(&self, seq: &[u32]) -> Result<Vec<f64>> {
        self.model.transform(seq)
    }
}

/// Mean of the model's hidden states over the sequence.
pub struct ModelEmbedder<'a> {
    pub params: &'a Parameters<f32>,
    pub label: String,
}

impl<'a> ModelEmbedder<'a> {
    pub fn new(params: &'a Parameters<f32>) -> Self {
        Self {
            params,
            label: "use".into(),
        }
    }
}

impl Embedder for ModelEmbedder<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn embed(&self, seq: &[u32]) -> Result<Vec<f64>> {
        update_recent_only(seq, self.params)
    }
}

/// Gaussian vectors drawn from a generator keyed by the sequence content,
/// so equal sequences get equal vectors and distinct ones are independent.
pub struct RandomEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder for RandomEmbedder {
    fn name(&self) -> String {
        "random".into()
    }

    fn embed(&self, seq: &[u32]) -> Result<Vec<f64>> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for id in seq {
            h.update(id.to_le_bytes());
        }
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
        Ok((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_embedder_is_content_keyed() {
        let e = RandomEmbedder { dim: 4, seed: 1 };
        assert_eq!(e.embed(&[2, 3]).unwrap(), e.embed(&[2, 3]).unwrap());
        assert_ne!(e.embed(&[2, 3]).unwrap(), e.embed(&[3, 2]).unwrap());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let e = RandomEmbedder { dim: 3, seed: 2 };
        let seqs: Vec<Vec<u32>> = (0..7).map(|i| vec![i, i + 1]).collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        assert_eq!(embed_all(&e, &refs, 1).unwrap(), embed_all(&e, &refs, 3).unwrap());
    }
}
