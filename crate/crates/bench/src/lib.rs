//! Fixture generators shared by the benches.

use std::collections::BTreeMap;

use hybrag_core::corpus::Modality;
use hybrag_core::embedding::{Embedder, HashEmbedder};
use hybrag_core::vector_index::{Collection, ScoredChunk, VectorRecord};
use hybrag_core::Chunk;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const VOCAB_SIZE: usize = 2000;

fn word(i: usize) -> String {
    format!("w{i}")
}

/// `n` text chunks of roughly `len` tokens drawn from a skewed vocabulary.
pub fn text_chunks(n: usize, len: usize, seed: u64) -> Vec<Chunk> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let words: Vec<String> = (0..len)
                .map(|_| {
                    // Squaring the uniform draw skews toward low ids, a cheap stand-in for Zipf.
                    let u: f64 = rng.gen();
                    word((u * u * VOCAB_SIZE as f64) as usize)
                })
                .collect();
            let text = words.join(" ");
            Chunk {
                chunk_id: format!("doc{i}:0000"),
                doc_id: format!("doc{i}"),
                page_span: (1, 1),
                modality: Modality::Text,
                token_count: len,
                text,
                media_path: None,
                parent_span: (0, len),
                metadata: BTreeMap::new(),
            }
        })
        .collect()
}

pub fn query(terms: usize, seed: u64) -> String {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..terms).map(|_| word(rng.gen_range(0..VOCAB_SIZE / 4))).collect::<Vec<_>>().join(" ")
}

pub fn embedded_collection(chunks: &[Chunk], embedder: &HashEmbedder) -> Collection {
    let mut coll = Collection::new("bench", embedder.dim());
    let records = chunks
        .iter()
        .map(|c| VectorRecord {
            chunk_id: c.chunk_id.clone(),
            vector: embedder.embed(&c.text).expect("hash embedding is infallible"),
            payload: BTreeMap::new(),
        })
        .collect();
    coll.insert(records).expect("fresh collection");
    coll
}

/// A ranked list of `n` hits over ids `c0..c{2n}`.
pub fn scored_list(n: usize, seed: u64) -> Vec<ScoredChunk> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..2 * n).collect();
    (0..n)
        .map(|_| ScoredChunk {
            chunk_id: format!("c{}", ids.swap_remove(rng.gen_range(0..ids.len()))),
            score: rng.gen(),
        })
        .collect()
}
