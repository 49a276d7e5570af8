//! Evaluation metrics. Reported SI-SNR/SDR values are capped at ±60 dB.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{si_snr_loss, SI_SNR_EPS};
use crate::signal::Waveform;

pub const METRIC_CAP_DB: f64 = 60.0;

fn cap(v: f64) -> f64 {
    v.clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

/// Uncapped SI-SNR in dB.
pub fn si_snr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    Ok(-si_snr_loss(reference, estimate)?)
}

pub fn si_snr_capped(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr(estimate, reference).map(cap)
}

pub fn si_snr_improvement(mixture: &Waveform, extracted: &Waveform, target: &Waveform) -> Result<f64> {
    Ok(si_snr_capped(extracted, target)? - si_snr_capped(mixture, target)?)
}

/// Plain SDR `10·log10(‖y‖² / ‖y − ŷ‖²)`, not the filtered BSSEval variant.
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy = reference.energy();
    if ref_energy == 0.0 {
        return Err(Error::DegenerateSignal("all-zero reference".into()));
    }
    let err: f64 = estimate
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(&e, &r)| {
            let d = r as f64 - e as f64;
            d * d
        })
        .sum();
    Ok(cap(10.0 * ((ref_energy + SI_SNR_EPS) / (err + SI_SNR_EPS)).log10()))
}

pub fn sdr_improvement(mixture: &Waveform, extracted: &Waveform, target: &Waveform) -> Result<f64> {
    Ok(sdr(extracted, target)? - sdr(mixture, target)?)
}

/// Index of the source closest (by SI-SNR) to `extracted`; ties go to the
/// lowest index.
pub fn closest_source(extracted: &Waveform, sources: &[Waveform]) -> Result<usize> {
    if sources.is_empty() {
        return Err(Error::invalid("no sources"));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, s) in sources.iter().enumerate() {
        let v = si_snr(extracted, s)?;
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best.1)
}

pub fn selection_accuracy(extracted: &Waveform, sources: &[Waveform], target_index: usize) -> Result<bool> {
    Ok(closest_source(extracted, sources)? == target_index)
}

/// Lowercased, punctuation-stripped whitespace tokens.
pub fn normalize_words(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn word_edit_distance(reference: &[String], hypothesis: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Word error rate: edits / max(1, reference length).
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let r = normalize_words(reference);
    let h = normalize_words(hypothesis);
    word_edit_distance(&r, &h) as f64 / r.len().max(1) as f64
}

/// Per-sample evaluation outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub si_snr_i: f64,
    pub sdr_i: f64,
    pub selected_correct: bool,
    pub n_context_turns: usize,
}

impl EvalRecord {
    pub fn compute(
        sample_id: impl Into<String>,
        mixture: &Waveform,
        extracted: &Waveform,
        sources: &[Waveform],
        target_index: usize,
        n_context_turns: usize,
    ) -> Result<Self> {
        let target = sources
            .get(target_index)
            .ok_or_else(|| Error::invalid("target index out of range"))?;
        Ok(EvalRecord {
            sample_id: sample_id.into(),
            si_snr_i: si_snr_improvement(mixture, extracted, target)?,
            sdr_i: sdr_improvement(mixture, extracted, target)?,
            selected_correct: selection_accuracy(extracted, sources, target_index)?,
            n_context_turns,
        })
    }
}
