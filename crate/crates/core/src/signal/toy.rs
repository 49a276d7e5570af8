//! Deterministic harmonic "speakers" for desk-scale experiments.

use std::f64::consts::PI;

use rand::Rng;

use super::Waveform;
use crate::error::{Error, Result};

pub const HARMONIC_AMPLITUDES: [f64; 3] = [1.0, 0.55, 0.3];

pub fn toy_f0(speaker_id: u32) -> f64 {
    80.0 + 17.0 * speaker_id as f64
}

/// Three harmonics of the speaker's fundamental under a random syllable-like
/// amplitude envelope, peak-normalized to 0.9.
pub fn synth_toy_source<R: Rng + ?Sized>(
    speaker_id: u32,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let sr = sample_rate as f64;
    let len = (duration_s * sr).round().max(1.0) as usize;
    let f0 = toy_f0(speaker_id);
    let phases: Vec<f64> = HARMONIC_AMPLITUDES.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mut env = vec![0.0f64; len];
    let mut cursor = 0usize;
    while cursor < len {
        if rng.gen_bool(0.25) {
            cursor += (rng.gen_range(0.02..0.08) * sr) as usize;
            continue;
        }
        let syl = ((rng.gen_range(0.08..0.25) * sr) as usize).max(2);
        let amp = rng.gen_range(0.3..1.0);
        for i in 0..syl {
            if cursor + i >= len {
                break;
            }
            let s = (PI * (i as f64 + 0.5) / syl as f64).sin();
            env[cursor + i] = amp * s * s;
        }
        cursor += syl;
    }

    let samples: Vec<f32> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let v: f64 = HARMONIC_AMPLITUDES
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (&a, &p))| a * (2.0 * PI * f0 * (h + 1) as f64 * t + p).sin())
                .sum();
            (v * env[i]) as f32
        })
        .collect();
    let w = Waveform::new(samples, sample_rate)?;
    if w.energy() == 0.0 {
        // every syllable draw was a gap; fall back to a flat envelope
        let flat: Vec<f32> = (0..len)
            .map(|i| (2.0 * PI * f0 * i as f64 / sr + phases[0]).sin() as f32)
            .collect();
        return Ok(Waveform::new(flat, sample_rate)?.peak_normalized(0.9));
    }
    Ok(w.peak_normalized(0.9))
}
