//! Cascaded baseline: separate every stream, transcribe each one, score each
//! transcript as a continuation of the context and keep the best.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::metrics::{closest_source, normalize_words};
use crate::model::{Cues, Model};
use crate::provider::{temp_wav, ProcessClient};
use crate::signal::Waveform;

pub trait Separator {
    fn separate(&mut self, mixture: &Waveform, n: usize) -> Result<Vec<Waveform>>;
}

pub trait Transcriber {
    fn transcribe(&mut self, stream: &Waveform) -> Result<String>;
}

pub trait UtteranceScorer {
    /// Log-probability of `transcript` following `context`.
    fn score(&mut self, context: &str, transcript: &str) -> Result<f64>;
}

/// A trained multi-stream model used without any cue.
pub struct ModelSeparator<'a> {
    model: &'a Model,
}

impl<'a> ModelSeparator<'a> {
    pub fn new(model: &'a Model) -> Result<Self> {
        if model.config.variant.is_extractor() {
            return Err(Error::invalid(format!(
                "{} variant produces a single stream and cannot drive the cascade",
                model.config.variant
            )));
        }
        Ok(ModelSeparator { model })
    }
}

impl Separator for ModelSeparator<'_> {
    fn separate(&mut self, mixture: &Waveform, n: usize) -> Result<Vec<Waveform>> {
        if n != self.model.config.num_streams {
            return Err(Error::invalid(format!(
                "model separates {} streams, asked for {n}",
                self.model.config.num_streams
            )));
        }
        Ok(self.model.forward(mixture, Cues::none())?.streams)
    }
}

/// Returns the true sources.
pub struct OracleSeparator {
    pub sources: Vec<Waveform>,
}

impl Separator for OracleSeparator {
    fn separate(&mut self, mixture: &Waveform, n: usize) -> Result<Vec<Waveform>> {
        if n != self.sources.len() {
            return Err(Error::invalid(format!("{} oracle sources, asked for {n}", self.sources.len())));
        }
        if let Some(s) = self.sources.iter().find(|s| s.len() != mixture.len()) {
            return Err(Error::invalid(format!(
                "oracle source length {} differs from mixture length {}",
                s.len(),
                mixture.len()
            )));
        }
        Ok(self.sources.clone())
    }
}

/// Ground-truth transcripts of one sample's sources; a stream gets the
/// transcript of the source it is closest to. Optional word dropout
/// simulates recognition errors.
pub struct OracleTranscriber {
    sources: Vec<Waveform>,
    transcripts: Vec<String>,
    word_dropout: f64,
    rng: ChaCha8Rng,
}

impl OracleTranscriber {
    pub fn new(sources: Vec<Waveform>, transcripts: Vec<String>) -> Result<Self> {
        if sources.is_empty() || sources.len() != transcripts.len() {
            return Err(Error::invalid(format!(
                "{} sources for {} transcripts",
                sources.len(),
                transcripts.len()
            )));
        }
        Ok(OracleTranscriber {
            sources,
            transcripts,
            word_dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// Deletes each word independently with probability `p`.
    pub fn with_word_dropout(mut self, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("word dropout {p} must lie in [0, 1]")));
        }
        self.word_dropout = p;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self)
    }
}

impl Transcriber for OracleTranscriber {
    fn transcribe(&mut self, stream: &Waveform) -> Result<String> {
        if stream.energy() == 0.0 {
            return Ok(String::new());
        }
        let i = closest_source(stream, &self.sources)?;
        let text = &self.transcripts[i];
        if self.word_dropout == 0.0 {
            return Ok(text.clone());
        }
        let p = self.word_dropout;
        let kept: Vec<&str> = text.split_whitespace().filter(|_| !self.rng.gen_bool(p)).collect();
        Ok(kept.join(" "))
    }
}

/// Provider process answering `{"kind": "asr", "payload": <wav path>}` with
/// `{"text": ...}`.
pub struct ExternalTranscriber {
    client: ProcessClient,
}

impl ExternalTranscriber {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        Ok(ExternalTranscriber {
            client: ProcessClient::spawn(program, args)?,
        })
    }
}

impl Transcriber for ExternalTranscriber {
    fn transcribe(&mut self, stream: &Waveform) -> Result<String> {
        let file = temp_wav(stream)?;
        let r = self
            .client
            .request("asr", &file.path().to_string_lossy(), Map::new())?;
        r.get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Provider {
                message: "asr response has no text".into(),
            })
    }
}

/// Deterministic stand-in for a language model:
/// `ln(#transcript words found in the context + floor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapScorer {
    pub floor: f64,
}

impl Default for OverlapScorer {
    fn default() -> Self {
        OverlapScorer { floor: 0.1 }
    }
}

impl UtteranceScorer for OverlapScorer {
    fn score(&mut self, context: &str, transcript: &str) -> Result<f64> {
        if !(self.floor > 0.0) {
            return Err(Error::invalid("overlap scorer floor must be positive"));
        }
        let vocab: HashSet<String> = normalize_words(context).into_iter().collect();
        let overlap = normalize_words(transcript)
            .iter()
            .filter(|w| vocab.contains(*w))
            .count();
        Ok((overlap as f64 + self.floor).ln())
    }
}

/// Provider process answering `{"kind": "lm", "payload": <transcript>,
/// "context": <text>}` with `{"logprob": ...}`.
pub struct ExternalScorer {
    client: ProcessClient,
}

impl ExternalScorer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        Ok(ExternalScorer {
            client: ProcessClient::spawn(program, args)?,
        })
    }
}

impl UtteranceScorer for ExternalScorer {
    fn score(&mut self, context: &str, transcript: &str) -> Result<f64> {
        let mut extra = Map::new();
        extra.insert("context".into(), json!(context));
        let r = self.client.request("lm", transcript, extra)?;
        r.get("logprob")
            .and_then(Value::as_f64)
            .filter(|v| !v.is_nan())
            .ok_or_else(|| Error::Provider {
                message: "lm response has no numeric logprob".into(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeResult {
    pub selected_index: usize,
    pub selected_stream: Waveform,
    pub scores: Vec<f64>,
    pub transcripts: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CascadeOptions {
    /// Divide each score by the transcript's word count (at least 1).
    pub per_token: bool,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn run_cascade(
    mixture: &Waveform,
    context: &str,
    separator: &mut dyn Separator,
    asr: &mut dyn Transcriber,
    lm: &mut dyn UtteranceScorer,
    n: usize,
    opts: CascadeOptions,
) -> Result<CascadeResult> {
    let streams = separator.separate(mixture, n)?;
    if streams.len() != n {
        return Err(Error::InvalidState(format!(
            "separator returned {} streams, expected {n}",
            streams.len()
        )));
    }
    let transcripts = streams
        .iter()
        .map(|s| asr.transcribe(s))
        .collect::<Result<Vec<_>>>()?;
    let scores = transcripts
        .iter()
        .map(|t| {
            let s = lm.score(context, t)?;
            Ok(if opts.per_token {
                s / normalize_words(t).len().max(1) as f64
            } else {
                s
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let selected_index = argmax(&scores).ok_or_else(|| Error::invalid("no streams to select from"))?;
    Ok(CascadeResult {
        selected_index,
        selected_stream: streams[selected_index].clone(),
        scores,
        transcripts,
    })
}
