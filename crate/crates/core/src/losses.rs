//! SI-SNR objective, permutation-invariant assignment and the joint
//! separation + target-selection objective.

use itertools::Itertools;

use crate::autograd::si_snr_loss_value;
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Stabilizer added to both energies of the SI-SNR ratio.
pub const SI_SNR_EPS: f64 = 1e-8;
/// Exhaustive permutation search is limited to this many streams.
pub const MAX_PIT_STREAMS: usize = 4;

/// Negative SI-SNR in dB between raw sample slices.
pub fn si_snr_loss_raw(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "length mismatch: reference {} vs estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let r: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    if r.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateSignal("all-zero reference".into()));
    }
    let e: Vec<f64> = estimate.iter().map(|&v| v as f64).collect();
    Ok(si_snr_loss_value(&e, &r, SI_SNR_EPS))
}

/// Negative SI-SNR (dB) of `estimate` against `reference`.
pub fn si_snr_loss(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    si_snr_loss_raw(reference.samples(), estimate.samples())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitResult {
    pub loss: f64,
    /// `permutation[i]` is the estimate index paired with reference `i`.
    pub permutation: Vec<usize>,
    pub per_pair_losses: Vec<f64>,
}

/// Minimum-sum assignment over a square loss matrix `m[ref][est]`. Ties keep
/// the lexicographically first permutation.
pub fn pit_from_matrix(m: &[Vec<f64>]) -> Result<PitResult> {
    let n = m.len();
    if n == 0 || m.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("PIT loss matrix must be square and non-empty"));
    }
    if n > MAX_PIT_STREAMS {
        return Err(Error::Unsupported(format!(
            "exhaustive PIT over {n} streams (max {MAX_PIT_STREAMS})"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| m[i][j]).sum();
        if best.as_ref().map_or(true, |(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (loss, permutation) = best.expect("at least one permutation");
    let per_pair_losses = permutation.iter().enumerate().map(|(i, &j)| m[i][j]).collect();
    Ok(PitResult {
        loss,
        permutation,
        per_pair_losses,
    })
}

pub fn pit_loss(references: &[Waveform], estimates: &[Waveform]) -> Result<PitResult> {
    if references.len() != estimates.len() {
        return Err(Error::invalid(format!(
            "{} references vs {} estimates",
            references.len(),
            estimates.len()
        )));
    }
    if references.len() > MAX_PIT_STREAMS {
        return Err(Error::Unsupported(format!(
            "exhaustive PIT over {} streams (max {MAX_PIT_STREAMS})",
            references.len()
        )));
    }
    let m = references
        .iter()
        .map(|r| estimates.iter().map(|e| si_snr_loss(r, e)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    pit_from_matrix(&m)
}

/// Index of the stream with the highest SI-SNR against `target`; ties go to
/// the lowest index.
pub fn assign_target_label(streams: &[Waveform], target: &Waveform) -> Result<usize> {
    if streams.is_empty() {
        return Err(Error::invalid("no streams to label"));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (i, s) in streams.iter().enumerate() {
        let l = si_snr_loss(target, s)?;
        if l < best.0 {
            best = (l, i);
        }
    }
    Ok(best.1)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
    logits.iter().map(|&v| v - lse).collect()
}

/// Cross-entropy on the output-derived target label plus the PIT SI-SNR term.
pub fn contsep_loss(
    logits: &[f64],
    streams: &[Waveform],
    references: &[Waveform],
    target: &Waveform,
) -> Result<f64> {
    if logits.len() != streams.len() {
        return Err(Error::invalid(format!(
            "{} logits for {} streams",
            logits.len(),
            streams.len()
        )));
    }
    let t = assign_target_label(streams, target)?;
    let ce = -log_softmax(logits)[t];
    Ok(ce + pit_loss(references, streams)?.loss)
}
