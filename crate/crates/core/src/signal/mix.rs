use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::Waveform;
use crate::error::{Error, Result};

/// A mixture together with the (post-gain) sources that sum to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub target_index: usize,
    pub context_text: String,
    pub enrollment: Option<Waveform>,
}

pub const MIN_STREAMS: usize = 2;
pub const MAX_STREAMS: usize = 4;

impl MixtureSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.sources.len();
        if !(MIN_STREAMS..=MAX_STREAMS).contains(&n) {
            return Err(Error::invalid(format!("expected 2..=4 sources, got {n}")));
        }
        if self.target_index >= n {
            return Err(Error::invalid(format!(
                "target index {} out of range for {n} sources",
                self.target_index
            )));
        }
        if let Some(s) = self.sources.iter().find(|s| s.len() != self.mixture.len()) {
            return Err(Error::invalid(format!(
                "source length {} differs from mixture length {}",
                s.len(),
                self.mixture.len()
            )));
        }
        Ok(())
    }

    pub fn n_streams(&self) -> usize {
        self.sources.len()
    }

    pub fn target(&self) -> &Waveform {
        &self.sources[self.target_index]
    }

    /// Crops (or zero-pads) every stream to `[start, start + len)`.
    pub fn cropped(&self, start: usize, len: usize) -> MixtureSample {
        MixtureSample {
            mixture: self.mixture.segment(start, len),
            sources: self.sources.iter().map(|s| s.segment(start, len)).collect(),
            target_index: self.target_index,
            context_text: self.context_text.clone(),
            enrollment: self.enrollment.clone(),
        }
    }
}

/// Scales `interference` so that `10·log10(P_target / P_interference) = snr_db`
/// and returns `(target + g·interference, g·interference)`.
pub fn mix_at_snr(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    if target.len() != interference.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            target.len(),
            interference.len()
        )));
    }
    if target.sample_rate() != interference.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rate mismatch: {} vs {}",
            target.sample_rate(),
            interference.sample_rate()
        )));
    }
    let (rt, ri) = (target.rms(), interference.rms());
    if rt == 0.0 || ri == 0.0 {
        return Err(Error::DegenerateSignal("zero-energy input to mix_at_snr".into()));
    }
    let gain = (rt / ri) * 10f64.powf(-snr_db / 20.0);
    let scaled: Vec<f32> = interference
        .samples()
        .iter()
        .map(|&v| (v as f64 * gain) as f32)
        .collect();
    let mixture: Vec<f32> = target.samples().iter().zip(&scaled).map(|(&a, &b)| a + b).collect();
    Ok((
        Waveform::new(mixture, target.sample_rate())?,
        Waveform::new(scaled, target.sample_rate())?,
    ))
}

/// SNR in dB between two equal-length streams.
pub fn snr_db(target: &Waveform, interference: &Waveform) -> f64 {
    10.0 * (target.energy() / interference.energy()).log10()
}

/// Builds a training mixture: every source is augmented independently, fit to
/// the target's length, and each interferer is scaled to an independent random
/// SNR relative to the unit-gain target.
pub fn make_mixture_sample<R: Rng + ?Sized>(
    sources: &[Waveform],
    target_index: usize,
    context_text: &str,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<MixtureSample> {
    let n = sources.len();
    if !(MIN_STREAMS..=MAX_STREAMS).contains(&n) {
        return Err(Error::invalid(format!("expected 2..=4 sources, got {n}")));
    }
    if target_index >= n {
        return Err(Error::invalid(format!("target index {target_index} out of range")));
    }
    cfg.validate()?;
    let augmented = sources
        .iter()
        .map(|s| augment(s, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let len = augmented[target_index].len();
    let target = augmented[target_index].clone();
    let mut stored = Vec::with_capacity(n);
    for (i, s) in augmented.iter().enumerate() {
        if i == target_index {
            stored.push(target.clone());
            continue;
        }
        let snr = sample_range(rng, cfg.snr_range_db);
        let (_, scaled) = mix_at_snr(&target, &s.fit_to(len), snr)?;
        stored.push(scaled);
    }
    let mut mix = vec![0.0f32; len];
    for s in &stored {
        for (m, &v) in mix.iter_mut().zip(s.samples()) {
            *m += v;
        }
    }
    Ok(MixtureSample {
        mixture: Waveform::new(mix, target.sample_rate())?,
        sources: stored,
        target_index,
        context_text: context_text.to_string(),
        enrollment: None,
    })
}

pub(crate) fn sample_range<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}
