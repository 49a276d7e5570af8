//! Model and cascade evaluation over a fixed set, and report aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{
    run_cascade, CascadeOptions, ModelSeparator, OracleSeparator, OracleTranscriber, Separator, Transcriber,
    UtteranceScorer,
};
use crate::corpus::CorpusSample;
use crate::cues::{CueEmbedding, CueProvider};
use crate::error::{Error, Result};
use crate::metrics::EvalRecord;
use crate::model::{Cues, Model, Variant};
use crate::trainer::CueCache;

/// Which cues a hybrid model sees at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CueMode {
    #[default]
    Both,
    ContextOnly,
    SpeakerOnly,
}

impl std::str::FromStr for CueMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(CueMode::Both),
            "context-only" | "context" => Ok(CueMode::ContextOnly),
            "speaker-only" | "speaker" => Ok(CueMode::SpeakerOnly),
            other => Err(Error::Validation(format!("unknown cue mode {other:?}"))),
        }
    }
}

fn select_cues(
    variant: Variant,
    mode: CueMode,
    c: Option<CueEmbedding>,
    s: Option<CueEmbedding>,
) -> Result<(Option<CueEmbedding>, Option<CueEmbedding>)> {
    match (mode, variant) {
        (CueMode::Both, _) => Ok((c, s)),
        (CueMode::ContextOnly, Variant::Hybrid) => Ok((c, s.map(|s| s.masked()))),
        (CueMode::SpeakerOnly, Variant::Hybrid) => Ok((c.map(|c| c.masked()), s)),
        (m, v) => Err(Error::Validation(format!("cue mode {m:?} needs the hybrid variant, model is {v}"))),
    }
}

fn evaluate_one(model: &Model, s: &CorpusSample, cues: Cues<'_>) -> Result<EvalRecord> {
    let out = model.forward(&s.sample.mixture, cues)?;
    let pick = match model.config.variant {
        Variant::ContSep => out.predicted_target().expect("target head"),
        v if v.is_extractor() => 0,
        v => {
            return Err(Error::Unsupported(format!(
                "{v} variant has no target selection; evaluate it through the cascade"
            )))
        }
    };
    EvalRecord::compute(
        s.id.clone(),
        &s.sample.mixture,
        &out.streams[pick],
        &s.sample.sources,
        s.sample.target_index,
        s.n_context_turns,
    )
}

/// Extracts the target of every sample and scores it. Cue embeddings are
/// computed up front; forward passes are split over `workers` threads and
/// the records come back in input order.
pub fn evaluate_model(
    model: &Model,
    set: &[CorpusSample],
    provider: &mut dyn CueProvider,
    mode: CueMode,
    workers: usize,
) -> Result<Vec<EvalRecord>> {
    let variant = model.config.variant;
    let mut cache = CueCache::new(provider);
    let cues = set
        .iter()
        .map(|s| {
            let (c, sp) = cache.cues_for(variant, &s.sample)?;
            select_cues(variant, mode, c, sp)
        })
        .collect::<Result<Vec<_>>>()?;
    let workers = workers.clamp(1, set.len().max(1));
    let run = |w: usize| -> Result<Vec<(usize, EvalRecord)>> {
        (w..set.len())
            .step_by(workers)
            .map(|i| {
                let (c, sp) = &cues[i];
                Ok((i, evaluate_one(model, &set[i], Cues::both(c.as_ref(), sp.as_ref()))?))
            })
            .collect()
    };
    let parts: Vec<Result<Vec<(usize, EvalRecord)>>> = if workers == 1 {
        vec![run(0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers).map(|w| scope.spawn(move || run(w))).collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        })
    };
    let mut indexed = Vec::with_capacity(set.len());
    for p in parts {
        indexed.extend(p?);
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, r)| r).collect())
}

/// How the cascade obtains its candidate streams.
pub enum CascadeSeparation<'a> {
    Oracle,
    Model(&'a Model),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CascadeEvalConfig {
    /// Word deletion probability of the oracle transcriber.
    pub word_dropout: f64,
    pub seed: u64,
    pub options: CascadeOptions,
}

/// Runs the cascade on every sample. Without an external transcriber the
/// oracle one is used, built from each sample's transcripts.
pub fn evaluate_cascade(
    set: &[CorpusSample],
    separation: CascadeSeparation<'_>,
    mut asr: Option<&mut dyn Transcriber>,
    lm: &mut dyn UtteranceScorer,
    cfg: CascadeEvalConfig,
) -> Result<Vec<EvalRecord>> {
    let mut model_sep = match separation {
        CascadeSeparation::Model(m) => Some(ModelSeparator::new(m)?),
        CascadeSeparation::Oracle => None,
    };
    let mut records = Vec::with_capacity(set.len());
    for (k, s) in set.iter().enumerate() {
        let n = s.sample.n_streams();
        let mut oracle_sep = OracleSeparator {
            sources: s.sample.sources.clone(),
        };
        let sep: &mut dyn Separator = match model_sep.as_mut() {
            Some(m) => m,
            None => &mut oracle_sep,
        };
        let mut oracle_asr = OracleTranscriber::new(s.sample.sources.clone(), s.transcripts.clone())?
            .with_word_dropout(cfg.word_dropout, cfg.seed ^ k as u64)?;
        let asr: &mut dyn Transcriber = match asr.as_mut() {
            Some(a) => &mut **a,
            None => &mut oracle_asr,
        };
        let res = run_cascade(&s.sample.mixture, &s.sample.context_text, sep, asr, lm, n, cfg.options)?;
        records.push(EvalRecord::compute(
            s.id.clone(),
            &s.sample.mixture,
            &res.selected_stream,
            &s.sample.sources,
            s.sample.target_index,
            s.n_context_turns,
        )?);
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean_si_snr_i: f64,
    pub mean_sdr_i: f64,
    pub acc: f64,
    pub n_samples: usize,
}

impl MetricSummary {
    fn of(records: &[&EvalRecord]) -> Self {
        let n = records.len() as f64;
        MetricSummary {
            mean_si_snr_i: records.iter().map(|r| r.si_snr_i).sum::<f64>() / n,
            mean_sdr_i: records.iter().map(|r| r.sdr_i).sum::<f64>() / n,
            acc: records.iter().filter(|r| r.selected_correct).count() as f64 / n,
            n_samples: records.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricSummary,
    /// One row per distinct number of context turns.
    pub by_context_turns: BTreeMap<usize, MetricSummary>,
}

pub fn build_eval_report(records: &[EvalRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::invalid("no evaluation records"));
    }
    let mut groups: BTreeMap<usize, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.n_context_turns).or_default().push(r);
    }
    Ok(EvalReport {
        overall: MetricSummary::of(&records.iter().collect::<Vec<_>>()),
        by_context_turns: groups.iter().map(|(&k, v)| (k, MetricSummary::of(v))).collect(),
    })
}

/// Hex SHA-256 over the effective configuration text and the seed.
pub fn config_digest(config: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config.as_bytes());
    h.update(seed.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
