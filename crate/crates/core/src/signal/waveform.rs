use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.energy() / self.samples.len() as f64).sqrt()
    }

    pub fn scaled(&self, gain: f32) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|&v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Truncates or zero-pads to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Waveform {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    /// Copy of `[start, start + len)`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> Waveform {
        let mut samples: Vec<f32> = self.samples.iter().skip(start).take(len).copied().collect();
        samples.resize(len, 0.0);
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak_normalized(&self, peak: f32) -> Waveform {
        let mx = self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if mx == 0.0 {
            return self.clone();
        }
        self.scaled(peak / mx)
    }
}
