use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mix::{mix_at_snr, sample_range};
use super::resample::{change_speed, resample};
use super::wav::read_wav;
use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub snr_range_db: [f64; 2],
    pub speed_ratios: Vec<f64>,
    pub noise_snr_range_db: [f64; 2],
    pub max_shift_s: f64,
    pub noise_paths: Vec<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            snr_range_db: [-5.0, 5.0],
            speed_ratios: vec![0.9, 1.0, 1.1],
            noise_snr_range_db: [0.0, 10.0],
            max_shift_s: 1.0,
            noise_paths: Vec::new(),
        }
    }
}

impl AugmentConfig {
    /// Mixing only: no speed change, noise, or shift.
    pub fn mixing_only() -> Self {
        AugmentConfig {
            speed_ratios: vec![1.0],
            max_shift_s: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("snr_range_db", self.snr_range_db), ("noise_snr_range_db", self.noise_snr_range_db)] {
            if !(r[0] <= r[1]) {
                return Err(Error::Validation(format!("{name}: lower bound exceeds upper")));
            }
        }
        if self.speed_ratios.is_empty() || self.speed_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Validation("speed ratios must be non-empty and positive".into()));
        }
        if !(self.max_shift_s >= 0.0) {
            return Err(Error::Validation("max_shift_s must be non-negative".into()));
        }
        Ok(())
    }
}

/// Speed perturbation, then additive noise, then a circular time shift.
pub fn augment<R: Rng + ?Sized>(w: &Waveform, cfg: &AugmentConfig, rng: &mut R) -> Result<Waveform> {
    let ratio = *cfg
        .speed_ratios
        .choose(rng)
        .ok_or_else(|| Error::Validation("empty speed ratio set".into()))?;
    let mut out = change_speed(w, ratio)?;

    if !cfg.noise_paths.is_empty() && !out.is_empty() {
        let path = cfg.noise_paths.choose(rng).expect("non-empty");
        let noise = resample(&read_wav(path)?, out.sample_rate())?;
        if noise.is_empty() {
            return Err(Error::DegenerateSignal(format!("empty noise file {}", path.display())));
        }
        let offset = rng.gen_range(0..noise.len());
        let tiled: Vec<f32> = (0..out.len())
            .map(|i| noise.samples()[(offset + i) % noise.len()])
            .collect();
        let tiled = Waveform::new(tiled, out.sample_rate())?;
        let snr = sample_range(rng, cfg.noise_snr_range_db);
        out = mix_at_snr(&out, &tiled, snr)?.0;
    }

    let max_shift = (cfg.max_shift_s * out.sample_rate() as f64).round() as i64;
    if max_shift > 0 && !out.is_empty() {
        let shift = rng.gen_range(-max_shift..=max_shift);
        let len = out.len() as i64;
        let k = shift.rem_euclid(len) as usize;
        let mut s = out.into_samples();
        s.rotate_right(k);
        out = Waveform::new(s, w.sample_rate())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::wav::{write_wav, WavEncoding};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(len: usize) -> Waveform {
        Waveform::new((0..len).map(|i| ((i % 97) as f32 / 97.0) - 0.5).collect(), 8000).unwrap()
    }

    #[test]
    fn noop_config_is_identity() {
        let w = ramp(1000);
        let cfg = AugmentConfig::mixing_only();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&w, &cfg, &mut rng).unwrap(), w);
    }

    #[test]
    fn slow_speed_lengthens() {
        let w = ramp(8000);
        let cfg = AugmentConfig {
            speed_ratios: vec![0.9],
            max_shift_s: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&w, &cfg, &mut rng).unwrap().len(), 8889);
    }

    #[test]
    fn deterministic_under_seed_with_noise() {
        let dir = tempfile::tempdir().unwrap();
        let np = dir.path().join("noise.wav");
        write_wav(&np, &ramp(777).scaled(0.3), WavEncoding::Float32).unwrap();
        let cfg = AugmentConfig {
            noise_paths: vec![np],
            ..Default::default()
        };
        let w = ramp(4000);
        let a = augment(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, w);
    }

    #[test]
    fn shift_is_circular() {
        let w = ramp(500);
        let cfg = AugmentConfig {
            speed_ratios: vec![1.0],
            max_shift_s: 0.01,
            ..Default::default()
        };
        let out = augment(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut a: Vec<f32> = out.samples().to_vec();
        let mut b: Vec<f32> = w.samples().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn unreadable_noise_names_path() {
        let cfg = AugmentConfig {
            noise_paths: vec!["/no/such/noise.wav".into()],
            ..Default::default()
        };
        let err = augment(&ramp(100), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("/no/such/noise.wav"));
    }

    #[test]
    fn validate_rejects_bad_ranges() {
        let cfg = AugmentConfig {
            snr_range_db: [5.0, -5.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            speed_ratios: vec![0.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
