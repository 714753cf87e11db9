//! Brute-force Okapi BM25 used as a test oracle.
//!
//! Written from the textbook definition, without sharing code with the
//! index: every chunk is scored by scanning the whole corpus.

#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct OracleChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleHit {
    pub doc_id: String,
    pub chunk_index: usize,
    pub score: f64,
}

/// Lowercase, split on every non-alphanumeric character.
pub fn terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn top_k(corpus: &[OracleChunk], query: &str, k: usize) -> Vec<OracleHit> {
    let docs: Vec<Vec<String>> = corpus.iter().map(|c| terms(&c.text)).collect();
    let n = docs.len() as f64;
    if docs.is_empty() {
        return Vec::new();
    }
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;

    let mut query_terms: Vec<String> = Vec::new();
    for t in terms(query) {
        if !query_terms.contains(&t) {
            query_terms.push(t);
        }
    }

    let mut hits = Vec::new();
    for (chunk, words) in corpus.iter().zip(&docs) {
        let dl = words.len() as f64;
        let mut score = 0.0;
        for q in &query_terms {
            let tf = words.iter().filter(|w| *w == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = docs.iter().filter(|d| d.contains(q)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * (tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * dl / avgdl)));
        }
        if score > 0.0 {
            hits.push(OracleHit {
                doc_id: chunk.doc_id.clone(),
                chunk_index: chunk.chunk_index,
                score,
            });
        }
    }
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.doc_id.cmp(&b.doc_id))
            .then_with(|| a.chunk_index.cmp(&b.chunk_index))
    });
    hits.truncate(k);
    hits
}

const VOCAB: &[&str] = &[
    "cell", "membrane", "nucleus", "energy", "light", "photosynthesis", "glucose", "oxygen", "carbon", "dioxide",
    "water", "root", "leaf", "stem", "chlorophyll", "enzyme", "protein", "acid", "base", "salt", "atom", "molecule",
    "electron", "proton", "neutron", "charge", "force", "mass", "velocity", "acceleration", "gravity", "friction",
    "wave", "frequency", "sound", "heat", "temperature", "pressure", "volume", "density", "river", "erosion",
    "climate", "weather", "rain", "soil", "rock", "volcano", "earthquake", "plate", "fraction", "equation",
    "triangle", "angle", "area", "perimeter", "graph", "function", "variable", "ratio", "history", "empire",
    "trade", "market", "farmer", "village", "city", "government", "law", "vote", "citizen", "language", "poem",
    "story", "author", "the", "a", "of", "and", "in", "is", "to", "by", "with", "from", "that", "this", "it",
    "when", "because", "then", "each", "many", "some", "small", "large",
];

/// Deterministic corpus of `docs` documents, each roughly `chars` long,
/// drawn from a skewed vocabulary so that terms have varied frequencies.
pub fn synthetic_corpus(seed: u64, docs: usize, chars: usize) -> Vec<(String, String)> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..docs)
        .map(|d| {
            let mut text = String::new();
            while text.len() < chars {
                let words = rng.gen_range(6..16);
                for w in 0..words {
                    // Squaring the uniform draw favors the front of the list.
                    let u: f64 = rng.gen();
                    let word = VOCAB[((u * u) * VOCAB.len() as f64) as usize];
                    if w > 0 {
                        text.push(' ');
                    }
                    text.push_str(word);
                }
                text.push_str(if rng.gen_ratio(1, 6) { ".\n\n" } else { ". " });
            }
            (format!("doc-{d:03}.md"), text)
        })
        .collect()
}

pub fn random_query(rng: &mut StdRng) -> String {
    let n = rng.gen_range(1..5);
    (0..n).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

/// Scores equal within `rel` relative tolerance.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
