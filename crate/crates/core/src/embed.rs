//! Per-attribute text embeddings and their concatenation into trial
//! feature vectors.
//!
//! Embeddings come from a pluggable provider: either a remote HTTP encoder
//! service or the built-in seeded hashing encoder. Downstream code depends
//! only on the provider's dimension `h`; a trial feature vector is the
//! concatenation of the eleven per-attribute vectors in canonical order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::registry::{TrialRecord, ATTRIBUTE_COUNT};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("encoder endpoint {endpoint} unavailable: {cause}")]
    RemoteUnavailable { endpoint: String, cause: String },
    #[error("encoder returned dimension {actual}, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("attribute index {index} out of range 0..{}", ATTRIBUTE_COUNT)]
    IndexOutOfRange { index: usize },
    #[error("matrix file is corrupt: {0}")]
    CorruptFile(String),
    #[error("matrix file format version {found} is unsupported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Remote embedding service settings. The service accepts
/// `{"model_id": ..., "texts": [...]}` and answers
/// `{"vectors": [[...], ...]}` with one vector per text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEncoder {
    pub endpoint: String,
    pub model_id: String,
    pub dim: usize,
    pub batch_size: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_parallel: usize,
    pub timeout_ms: u64,
}

impl RemoteEncoder {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, dim: usize) -> Self {
        RemoteEncoder {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            dim,
            batch_size: 32,
            max_retries: 3,
            backoff_ms: 100,
            max_parallel: 4,
            timeout_ms: 30_000,
        }
    }
}

/// Offline hashing encoder: seeded signed feature hashing of word
/// unigrams and bigrams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingEncoder {
    pub dim: usize,
    pub seed: u64,
}

/// An embedding backend. Every provider returns vectors of exactly its
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderProvider {
    Remote(RemoteEncoder),
    Hashing(HashingEncoder),
}

/// Default embedding dimension, matching common encoder output sizes.
pub const DEFAULT_DIM: usize = 768;

impl EncoderProvider {
    pub fn hashing(dim: usize, seed: u64) -> Self {
        EncoderProvider::Hashing(HashingEncoder { dim, seed })
    }

    pub fn dim(&self) -> usize {
        match self {
            EncoderProvider::Remote(r) => r.dim,
            EncoderProvider::Hashing(h) => h.dim,
        }
    }

    /// Stable identifier used as the cache-key prefix.
    pub fn id(&self) -> String {
        match self {
            EncoderProvider::Remote(r) => {
                format!("remote:{}:{}:{}", r.endpoint, r.model_id, r.dim)
            }
            EncoderProvider::Hashing(h) => format!("hashing:{}:{}", h.dim, h.seed),
        }
    }

    /// Embed a batch of texts, one vector per text. Empty texts become
    /// zero vectors without touching the backend.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        match self {
            EncoderProvider::Hashing(h) => Ok(texts
                .iter()
                .map(|t| hashing_embed(t, h.dim, h.seed))
                .collect()),
            EncoderProvider::Remote(r) => embed_remote(r, texts),
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;
const SIGN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn seeded_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for &byte in bytes {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Signed feature hashing of lowercase word unigrams and bigrams into
/// `dim` buckets, L2-normalized. The bucket comes from one seeded hash,
/// the sign from the low bit of a second. Empty text yields the zero
/// vector.
pub fn hashing_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "embedding dimension must be at least 1");
    let mut values = vec![0.0f64; dim];
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return values;
    }
    let mut add_term = |term: &str| {
        let bucket = (seeded_hash(seed, term.as_bytes()) % dim as u64) as usize;
        let sign = if seeded_hash(seed ^ SIGN_SALT, term.as_bytes()) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        values[bucket] += sign;
    };
    for token in &tokens {
        add_term(token);
    }
    for pair in tokens.windows(2) {
        add_term(&format!("{} {}", pair[0], pair[1]));
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for value in &mut values {
            *value /= norm;
        }
    }
    values
}

fn embed_remote(encoder: &RemoteEncoder, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
    #[derive(Serialize)]
    struct Request<'a> {
        model_id: &'a str,
        texts: &'a [String],
    }
    #[derive(Deserialize)]
    struct Response {
        vectors: Vec<Vec<f64>>,
    }

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(encoder.timeout_ms)))
        .build()
        .into();

    let send_batch = |batch: &[String]| -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut attempt = 0u32;
        loop {
            let outcome = agent
                .post(&encoder.endpoint)
                .send_json(Request {
                    model_id: &encoder.model_id,
                    texts: batch,
                })
                .map_err(|e| e.to_string())
                .and_then(|mut response| {
                    response
                        .body_mut()
                        .read_json::<Response>()
                        .map_err(|e| e.to_string())
                });
            match outcome {
                Ok(response) => {
                    if response.vectors.len() != batch.len() {
                        return Err(EmbedError::RemoteUnavailable {
                            endpoint: encoder.endpoint.clone(),
                            cause: format!(
                                "{} vectors for {} texts",
                                response.vectors.len(),
                                batch.len()
                            ),
                        });
                    }
                    for vector in &response.vectors {
                        if vector.len() != encoder.dim {
                            return Err(EmbedError::DimensionMismatch {
                                expected: encoder.dim,
                                actual: vector.len(),
                            });
                        }
                    }
                    return Ok(response.vectors);
                }
                Err(cause) => {
                    attempt += 1;
                    if attempt > encoder.max_retries {
                        return Err(EmbedError::RemoteUnavailable {
                            endpoint: encoder.endpoint.clone(),
                            cause,
                        });
                    }
                    let backoff = encoder.backoff_ms.saturating_mul(1 << (attempt - 1).min(8));
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
    };

    // Empty texts are resolved locally; the rest go out in batches with
    // bounded parallelism.
    let mut output: Vec<Option<Vec<f64>>> = texts
        .iter()
        .map(|t| t.trim().is_empty().then(|| vec![0.0; encoder.dim]))
        .collect();
    let pending: Vec<usize> = (0..texts.len()).filter(|&i| output[i].is_none()).collect();
    let batches: Vec<&[usize]> = pending.chunks(encoder.batch_size.max(1)).collect();
    let results: Mutex<Vec<(usize, Vec<Vec<f64>>)>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<EmbedError>> = Mutex::new(None);
    let cursor = AtomicUsize::new(0);
    let workers = encoder.max_parallel.max(1).min(batches.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let batch_index = cursor.fetch_add(1, Ordering::Relaxed);
                if batch_index >= batches.len() || failure.lock().unwrap().is_some() {
                    return;
                }
                let indices = batches[batch_index];
                let batch: Vec<String> = indices.iter().map(|&i| texts[i].clone()).collect();
                match send_batch(&batch) {
                    Ok(vectors) => results.lock().unwrap().push((batch_index, vectors)),
                    Err(e) => *failure.lock().unwrap() = Some(e),
                }
            });
        }
    });
    if let Some(error) = failure.into_inner().unwrap() {
        return Err(error);
    }
    for (batch_index, vectors) in results.into_inner().unwrap() {
        for (&text_index, vector) in batches[batch_index].iter().zip(vectors) {
            output[text_index] = Some(vector);
        }
    }
    Ok(output
        .into_iter()
        .map(|v| v.expect("batch filled"))
        .collect())
}

/// Embed a single attribute text. Deterministic per (provider, text);
/// empty text yields the zero vector.
pub fn embed_attribute(text: &str, provider: &EncoderProvider) -> Result<Vec<f64>, EmbedError> {
    if text.trim().is_empty() {
        return Ok(vec![0.0; provider.dim()]);
    }
    Ok(provider
        .embed_texts(std::slice::from_ref(&text.to_string()))?
        .remove(0))
}

type CacheKey = (String, [u8; 32]);

/// Content-addressed embedding cache keyed by (provider id, text digest).
/// Safe for concurrent readers; writers take the lock exclusively and the
/// last writer wins (values for one key are identical by construction).
#[derive(Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<CacheKey, Vec<f64>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn digest(text: &str) -> [u8; 32] {
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn get(&self, provider_id: &str, text: &str) -> Option<Vec<f64>> {
        self.entries
            .read()
            .unwrap()
            .get(&(provider_id.to_string(), Self::digest(text)))
            .cloned()
    }

    pub fn insert(&self, provider_id: &str, text: &str, vector: Vec<f64>) {
        self.entries
            .write()
            .unwrap()
            .insert((provider_id.to_string(), Self::digest(text)), vector);
    }
}

/// Concatenated per-attribute embedding of one trial, dimension
/// `11 * h`, blocks in canonical attribute order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source_nct_id: String,
}

impl FeatureVector {
    /// Per-attribute block width.
    pub fn block_dim(&self) -> usize {
        self.values.len() / ATTRIBUTE_COUNT
    }

    /// Borrow the block for one attribute index.
    pub fn block(&self, index: usize) -> &[f64] {
        let h = self.block_dim();
        &self.values[index * h..(index + 1) * h]
    }
}

/// Embed the eleven attributes of one record and concatenate them.
pub fn embed_description(
    record: &TrialRecord,
    provider: &EncoderProvider,
    cache: Option<&EmbeddingCache>,
) -> Result<FeatureVector, EmbedError> {
    let provider_id = provider.id();
    let mut values = Vec::with_capacity(ATTRIBUTE_COUNT * provider.dim());
    for text in record.attributes.texts() {
        if let Some(cached) = cache.and_then(|c| c.get(&provider_id, &text)) {
            values.extend_from_slice(&cached);
            continue;
        }
        let vector = embed_attribute(&text, provider)?;
        if let Some(cache) = cache {
            cache.insert(&provider_id, &text, vector.clone());
        }
        values.extend_from_slice(&vector);
    }
    Ok(FeatureVector {
        values,
        source_nct_id: record.nct_id.clone(),
    })
}

/// Embed many records, deduplicating repeated attribute texts and batching
/// remote requests.
pub fn embed_corpus(
    records: &[TrialRecord],
    provider: &EncoderProvider,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<FeatureVector>, EmbedError> {
    let provider_id = provider.id();
    let mut unique: Vec<String> = Vec::new();
    let mut pending: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut resolved: HashMap<String, Vec<f64>> = HashMap::new();
    for record in records {
        for text in record.attributes.texts() {
            if resolved.contains_key(&text) || pending.contains(&text) {
                continue;
            }
            if text.trim().is_empty() {
                resolved.insert(text, vec![0.0; provider.dim()]);
            } else if let Some(cached) = cache.and_then(|c| c.get(&provider_id, &text)) {
                resolved.insert(text, cached);
            } else {
                pending.insert(text.clone());
                unique.push(text);
            }
        }
    }
    let vectors = provider.embed_texts(&unique)?;
    for (text, vector) in unique.into_iter().zip(vectors) {
        if let Some(cache) = cache {
            cache.insert(&provider_id, &text, vector.clone());
        }
        resolved.insert(text, vector);
    }
    Ok(records
        .iter()
        .map(|record| {
            let mut values = Vec::with_capacity(ATTRIBUTE_COUNT * provider.dim());
            for text in record.attributes.texts() {
                values.extend_from_slice(&resolved[&text]);
            }
            FeatureVector {
                values,
                source_nct_id: record.nct_id.clone(),
            }
        })
        .collect())
}

/// Remove one attribute's contiguous block from a concatenated vector,
/// preserving the order of the rest.
pub fn drop_block(values: &[f64], block_size: usize, index: usize) -> Result<Vec<f64>, EmbedError> {
    if index >= ATTRIBUTE_COUNT {
        return Err(EmbedError::IndexOutOfRange { index });
    }
    let start = index * block_size;
    let end = start + block_size;
    let mut out = Vec::with_capacity(values.len() - block_size);
    out.extend_from_slice(&values[..start]);
    out.extend_from_slice(&values[end..]);
    Ok(out)
}

/// [`drop_block`] specialized to a feature vector's own block width.
pub fn drop_attribute(vector: &FeatureVector, index: usize) -> Result<Vec<f64>, EmbedError> {
    drop_block(&vector.values, vector.block_dim(), index)
}

const MATRIX_MAGIC: &[u8; 4] = b"CTPE";
const MATRIX_VERSION: u32 = 1;

/// Persist feature vectors as a binary matrix: magic, version, row count,
/// dimension, a metadata string, then per row an id and `dim` f64 values.
/// All integers and floats are little-endian (layout in
/// `docs/FORMATS.md`).
pub fn save_matrix(path: &Path, vectors: &[FeatureVector], meta: &str) -> Result<(), EmbedError> {
    let dim = vectors.first().map_or(0, |v| v.values.len());
    for vector in vectors {
        if vector.values.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                actual: vector.values.len(),
            });
        }
    }
    let mut writer = std::io::BufWriter::new(std::fs::File::create(path)?);
    writer.write_all(MATRIX_MAGIC)?;
    writer.write_all(&MATRIX_VERSION.to_le_bytes())?;
    writer.write_all(&(vectors.len() as u32).to_le_bytes())?;
    writer.write_all(&(dim as u32).to_le_bytes())?;
    writer.write_all(&(meta.len() as u32).to_le_bytes())?;
    writer.write_all(meta.as_bytes())?;
    for vector in vectors {
        let id = vector.source_nct_id.as_bytes();
        writer.write_all(&(id.len() as u16).to_le_bytes())?;
        writer.write_all(id)?;
        for value in &vector.values {
            writer.write_all(&value.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Load a matrix written by [`save_matrix`]. Returns the vectors and the
/// stored metadata string.
pub fn load_matrix(path: &Path) -> Result<(Vec<FeatureVector>, String), EmbedError> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let corrupt = |what: &str| EmbedError::CorruptFile(what.to_string());

    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut reader)?;
    if version != MATRIX_VERSION {
        return Err(EmbedError::FormatVersionMismatch {
            found: version,
            expected: MATRIX_VERSION,
        });
    }
    let rows = read_u32(&mut reader)? as usize;
    let dim = read_u32(&mut reader)? as usize;
    let meta_len = read_u32(&mut reader)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut reader, &mut meta_bytes)?;
    let meta = String::from_utf8(meta_bytes).map_err(|_| corrupt("metadata is not UTF-8"))?;

    let mut vectors = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut len_bytes = [0u8; 2];
        read_exact(&mut reader, &mut len_bytes)?;
        let id_len = u16::from_le_bytes(len_bytes) as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact(&mut reader, &mut id_bytes)?;
        let source_nct_id =
            String::from_utf8(id_bytes).map_err(|_| corrupt("row id is not UTF-8"))?;
        let mut values = Vec::with_capacity(dim);
        let mut value_bytes = [0u8; 8];
        for _ in 0..dim {
            read_exact(&mut reader, &mut value_bytes)?;
            values.push(f64::from_le_bytes(value_bytes));
        }
        vectors.push(FeatureVector {
            values,
            source_nct_id,
        });
    }
    Ok((vectors, meta))
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), EmbedError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            EmbedError::CorruptFile("unexpected end of file".to_string())
        } else {
            EmbedError::Io(e)
        }
    })
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32, EmbedError> {
    let mut bytes = [0u8; 4];
    read_exact(reader, &mut bytes)?;
    Ok(u32::from_le_bytes(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::AttributeSet;
    use proptest::prelude::*;

    fn record_with(attributes: AttributeSet) -> TrialRecord {
        TrialRecord {
            nct_id: "NCT0001".to_string(),
            drug_indication_id: None,
            phase: crate::registry::Phase::PhaseII,
            status: crate::registry::RecruitmentStatus::Completed,
            last_modified: Some("2020-01-01".parse().unwrap()),
            termination_reason: None,
            attributes,
        }
    }

    fn distinct_attributes() -> AttributeSet {
        AttributeSet {
            name: "alpha study".to_string(),
            brief: "beta overview".to_string(),
            drug_used: "gamma drug".to_string(),
            drug_class: crate::registry::DrugClass::Vaccine,
            indication: "delta condition".to_string(),
            target: "epsilon receptor".to_string(),
            therapy: "zeta therapy".to_string(),
            lead_sponsor: "eta sponsor".to_string(),
            criteria: "theta criteria".to_string(),
            primary_outcome: "iota outcome".to_string(),
            secondary_outcome: "kappa outcome".to_string(),
        }
    }

    #[test]
    fn empty_text_embeds_to_zero_vector() {
        let provider = EncoderProvider::hashing(8, 1);
        assert_eq!(embed_attribute("", &provider).unwrap(), vec![0.0; 8]);
        // The shortcut also protects an unreachable remote endpoint.
        let remote =
            EncoderProvider::Remote(RemoteEncoder::new("http://127.0.0.1:1/embed", "m", 8));
        assert_eq!(embed_attribute("  ", &remote).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn hashing_is_deterministic_per_text_and_seed() {
        let a = hashing_embed("aspirin trial", 8, 1);
        let b = hashing_embed("aspirin trial", 8, 1);
        assert_eq!(a, b);
        assert_ne!(a, hashing_embed("aspirin trial", 8, 2));
        assert_ne!(a, hashing_embed("ibuprofen trial", 8, 1));
    }

    #[test]
    fn hashing_output_has_unit_norm() {
        for text in ["aspirin trial", "a", "one two three four five"] {
            let v = hashing_embed(text, 8, 1);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm} for {text:?}");
        }
    }

    #[test]
    fn word_order_changes_bigrams_and_the_vector() {
        let forward = hashing_embed("alpha beta gamma", 16, 0);
        let backward = hashing_embed("gamma beta alpha", 16, 0);
        assert_ne!(forward, backward);
        assert_eq!(hashing_embed("", 16, 0), vec![0.0; 16]);
    }

    #[test]
    fn description_embedding_has_eleven_blocks() {
        let record = record_with(distinct_attributes());
        let provider = EncoderProvider::hashing(768, 7);
        let v = embed_description(&record, &provider, None).unwrap();
        assert_eq!(v.values.len(), 8448);

        let provider = EncoderProvider::hashing(4, 7);
        let empty = record_with(AttributeSet {
            drug_class: crate::registry::DrugClass::Unknown,
            ..AttributeSet::default()
        });
        // Unknown drug class still carries text; blank it via an empty
        // record check on the other ten blocks instead.
        let v = embed_description(&empty, &provider, None).unwrap();
        assert_eq!(v.values.len(), 44);
        for (i, block) in (0..ATTRIBUTE_COUNT).map(|i| (i, v.block(i))) {
            if i == 3 {
                continue; // drug class renders as "Unknown"
            }
            assert_eq!(block, &[0.0; 4][..], "block {i}");
        }
    }

    #[test]
    fn swapping_two_attributes_changes_only_their_blocks() {
        let record = record_with(distinct_attributes());
        let mut swapped_attributes = distinct_attributes();
        std::mem::swap(
            &mut swapped_attributes.brief,
            &mut swapped_attributes.criteria,
        );
        let swapped = record_with(swapped_attributes);
        let provider = EncoderProvider::hashing(8, 3);
        let a = embed_description(&record, &provider, None).unwrap();
        let b = embed_description(&swapped, &provider, None).unwrap();
        for index in 0..ATTRIBUTE_COUNT {
            if index == 1 || index == 8 {
                assert_ne!(a.block(index), b.block(index), "block {index}");
            } else {
                assert_eq!(a.block(index), b.block(index), "block {index}");
            }
        }
    }

    #[test]
    fn drop_attribute_removes_one_contiguous_block() {
        let vector = FeatureVector {
            values: (0..22).map(f64::from).collect(),
            source_nct_id: "NCT1".to_string(),
        };
        assert_eq!(vector.block_dim(), 2);
        let dropped = drop_attribute(&vector, 0).unwrap();
        assert_eq!(dropped.len(), 20);
        assert_eq!(dropped[0], 2.0);
        let dropped = drop_attribute(&vector, 8).unwrap();
        assert_eq!(dropped.len(), 20);
        // Blocks before index 8 intact, blocks after shifted down.
        assert_eq!(&dropped[..16], &vector.values[..16]);
        assert_eq!(&dropped[16..], &vector.values[18..]);
        assert!(matches!(
            drop_attribute(&vector, 11),
            Err(EmbedError::IndexOutOfRange { index: 11 })
        ));
    }

    #[test]
    fn cache_is_transparent_and_hits_are_bitwise_identical() {
        let record = record_with(distinct_attributes());
        let provider = EncoderProvider::hashing(16, 5);
        let cache = EmbeddingCache::new();
        let without = embed_description(&record, &provider, None).unwrap();
        let first = embed_description(&record, &provider, Some(&cache)).unwrap();
        let second = embed_description(&record, &provider, Some(&cache)).unwrap();
        assert_eq!(without, first);
        assert_eq!(first, second);
        assert_eq!(cache.len(), ATTRIBUTE_COUNT);

        let batched = embed_corpus(std::slice::from_ref(&record), &provider, Some(&cache)).unwrap();
        assert_eq!(batched[0], without);
    }

    #[test]
    fn matrix_round_trip_and_error_cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.ctpe");
        let vectors: Vec<FeatureVector> = (0..5)
            .map(|i| FeatureVector {
                values: (0..22).map(|j| f64::from(i * 100 + j) / 7.0).collect(),
                source_nct_id: format!("NCT{i:04}"),
            })
            .collect();
        save_matrix(&path, &vectors, r#"{"seed":7}"#).unwrap();
        let (loaded, meta) = load_matrix(&path).unwrap();
        assert_eq!(loaded, vectors);
        assert_eq!(meta, r#"{"seed":7}"#);

        let bytes = std::fs::read(&path).unwrap();
        let truncated_path = dir.path().join("truncated.ctpe");
        std::fs::write(&truncated_path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_matrix(&truncated_path),
            Err(EmbedError::CorruptFile(_))
        ));

        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&99u32.to_le_bytes());
        let future_path = dir.path().join("future.ctpe");
        std::fs::write(&future_path, &future).unwrap();
        assert!(matches!(
            load_matrix(&future_path),
            Err(EmbedError::FormatVersionMismatch { found: 99, .. })
        ));
    }

    proptest! {
        #[test]
        fn hashing_norm_is_zero_or_one(text in "\\PC{0,60}", dim in 1usize..64) {
            let v = hashing_embed(&text, dim, 11);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm.abs() < 1e-9 || (norm - 1.0).abs() < 1e-9);
        }

        #[test]
        fn blocks_match_per_attribute_embeddings(dim in 1usize..16, seed in any::<u64>()) {
            let record = record_with(distinct_attributes());
            let provider = EncoderProvider::hashing(dim, seed);
            let full = embed_description(&record, &provider, None).unwrap();
            prop_assert_eq!(full.values.len(), dim * ATTRIBUTE_COUNT);
            for (index, text) in record.attributes.texts().iter().enumerate() {
                let single = embed_attribute(text, &provider).unwrap();
                prop_assert_eq!(full.block(index), &single[..]);
            }
        }
    }
}
