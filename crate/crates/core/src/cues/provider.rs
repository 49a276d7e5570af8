use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Map;
use sha2::{Digest, Sha256};

use super::{CueEmbedding, CueKind};
use crate::error::{Error, Result};
use crate::provider::{parse_vector, temp_wav, ProcessClient};
use crate::signal::{toy_f0, Waveform};

/// Source of raw cue vectors.
pub trait CueProvider {
    fn context_dim(&self) -> usize;
    fn speaker_dim(&self) -> usize;
    fn context_vector(&mut self, text: &str) -> Result<Vec<f32>>;
    fn speaker_vector(&mut self, enrollment: &Waveform) -> Result<Vec<f32>>;
}

/// Context cue for `text`; an empty string yields an absent cue.
pub fn embed_context(text: &str, provider: &mut dyn CueProvider) -> Result<CueEmbedding> {
    let dim = provider.context_dim();
    if text.is_empty() {
        return Ok(CueEmbedding::absent(CueKind::Context, dim));
    }
    let v = provider.context_vector(text)?;
    check_dim(&v, dim, CueKind::Context)?;
    CueEmbedding::new(CueKind::Context, v)
}

pub fn embed_speaker(enrollment: &Waveform, provider: &mut dyn CueProvider) -> Result<CueEmbedding> {
    let v = provider.speaker_vector(enrollment)?;
    check_dim(&v, provider.speaker_dim(), CueKind::Speaker)?;
    CueEmbedding::new(CueKind::Speaker, v)
}

fn check_dim(v: &[f32], dim: usize, kind: CueKind) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Provider {
            message: format!("{kind} provider returned {} values, declared {dim}", v.len()),
        });
    }
    Ok(())
}

pub fn context_key(text: &str) -> String {
    format!("context:{text}")
}

/// Content hash of the samples and rate.
pub fn speaker_key(w: &Waveform) -> String {
    let mut h = Sha256::new();
    h.update(w.sample_rate().to_le_bytes());
    for s in w.samples() {
        h.update(s.to_le_bytes());
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("speaker:{hex}")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit-norm Gaussian vector seeded by a hash of `key`.
pub fn hashed_unit_vector(key: &str, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()));
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Fundamental frequency by normalized autocorrelation over 60–500 Hz, taking
/// the shortest lag within 10% of the best peak and refining it parabolically.
pub fn estimate_f0(w: &Waveform) -> Option<f64> {
    let x = w.samples();
    let sr = w.sample_rate() as f64;
    let lo = (sr / 500.0).floor().max(1.0) as usize;
    let hi = (sr / 60.0).ceil() as usize;
    if x.len() <= hi + 2 {
        return None;
    }
    let r: Vec<f64> = (0..=hi + 1)
        .map(|lag| {
            if lag < lo.saturating_sub(1) {
                return 0.0;
            }
            let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
            for t in 0..x.len() - lag {
                let (a, b) = (x[t] as f64, x[t + lag] as f64);
                xy += a * b;
                xx += a * a;
                yy += b * b;
            }
            if xx == 0.0 || yy == 0.0 {
                0.0
            } else {
                xy / (xx * yy).sqrt()
            }
        })
        .collect();
    let best = (lo..=hi).map(|l| r[l]).fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return None;
    }
    let lag = (lo..=hi).find(|&l| r[l] >= 0.9 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1])?;
    let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
    Some(sr / (lag as f64 + shift.clamp(-0.5, 0.5)))
}

/// Index of the toy speaker whose fundamental is nearest to `f0`.
pub fn f0_bucket(f0: f64) -> i64 {
    ((f0 - toy_f0(0)) / (toy_f0(1) - toy_f0(0))).round() as i64
}

/// Deterministic stand-in for real embedders: context vectors are hashed from
/// the text, speaker vectors from the toy-speaker f0 bucket.
#[derive(Clone, Debug)]
pub struct MockCueProvider {
    pub context_dim: usize,
    pub speaker_dim: usize,
}

impl MockCueProvider {
    pub fn new(context_dim: usize, speaker_dim: usize) -> Self {
        MockCueProvider {
            context_dim,
            speaker_dim,
        }
    }
}

impl CueProvider for MockCueProvider {
    fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn speaker_dim(&self) -> usize {
        self.speaker_dim
    }

    fn context_vector(&mut self, text: &str) -> Result<Vec<f32>> {
        Ok(hashed_unit_vector(text, self.context_dim))
    }

    fn speaker_vector(&mut self, enrollment: &Waveform) -> Result<Vec<f32>> {
        let f0 = estimate_f0(enrollment).ok_or_else(|| Error::Provider {
            message: "no pitch found in enrollment".into(),
        })?;
        Ok(hashed_unit_vector(
            &format!("speaker-f0-bucket:{}", f0_bucket(f0)),
            self.speaker_dim,
        ))
    }
}

const CACHE_MAGIC: &[u8; 4] = b"CSEC";
const CACHE_VERSION: u32 = 1;

/// Fixed-dimension key→vector table stored as `CSEC` files.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::invalid(format!(
                "vector of length {} in a {}-dim cache",
                v.len(),
                self.dim
            )));
        }
        self.entries.insert(key.into(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&[f32]> {
        self.entries
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding { key: key.to_string() })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (k, v) in &self.entries {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse {
            location: "embedding cache".into(),
            message: m.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated file"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let version = u32_at(take(4)?);
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = u32_at(take(4)?) as usize;
        let b = take(8)?;
        let count = u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
        let mut cache = EmbeddingCache::new(dim);
        for _ in 0..count {
            let klen = u32_at(take(4)?) as usize;
            let key = std::str::from_utf8(take(klen)?)
                .map_err(|_| bad("key is not UTF-8"))?
                .to_string();
            let v: Vec<f32> = take(dim * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cache.entries.insert(key, v);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(cache)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                location: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

/// Exact-key lookups in precomputed caches, one per cue kind.
#[derive(Clone, Debug)]
pub struct CacheCueProvider {
    pub context: EmbeddingCache,
    pub speaker: EmbeddingCache,
}

impl CueProvider for CacheCueProvider {
    fn context_dim(&self) -> usize {
        self.context.dim()
    }

    fn speaker_dim(&self) -> usize {
        self.speaker.dim()
    }

    fn context_vector(&mut self, text: &str) -> Result<Vec<f32>> {
        self.context.get(&context_key(text)).map(<[f32]>::to_vec)
    }

    fn speaker_vector(&mut self, enrollment: &Waveform) -> Result<Vec<f32>> {
        self.speaker.get(&speaker_key(enrollment)).map(<[f32]>::to_vec)
    }
}

/// Embeddings from a child process; speaker payloads are WAV file paths.
pub struct ExternalCueProvider {
    client: ProcessClient,
    context_dim: usize,
    speaker_dim: usize,
}

impl ExternalCueProvider {
    pub fn spawn(program: &str, args: &[String], context_dim: usize, speaker_dim: usize) -> Result<Self> {
        Ok(ExternalCueProvider {
            client: ProcessClient::spawn(program, args)?,
            context_dim,
            speaker_dim,
        })
    }
}

impl CueProvider for ExternalCueProvider {
    fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn speaker_dim(&self) -> usize {
        self.speaker_dim
    }

    fn context_vector(&mut self, text: &str) -> Result<Vec<f32>> {
        let r = self.client.request("context", text, Map::new())?;
        parse_vector(&r, self.context_dim)
    }

    fn speaker_vector(&mut self, enrollment: &Waveform) -> Result<Vec<f32>> {
        let file = temp_wav(enrollment)?;
        let r = self
            .client
            .request("speaker", &file.path().to_string_lossy(), Map::new())?;
        parse_vector(&r, self.speaker_dim)
    }
}
