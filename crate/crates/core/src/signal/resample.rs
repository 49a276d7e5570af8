//! Polyphase windowed-sinc resampling (Kaiser window, beta 8.6).

use super::Waveform;
use crate::error::{Error, Result};

const KAISER_BETA: f64 = 8.6;
/// Half of the 64 taps per phase, measured at the lower of the two rates.
const HALF_TAPS: usize = 32;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Rational-ratio resampler producing `up / down` output samples per input.
pub struct PolyphaseResampler {
    up: usize,
    down: usize,
    half_width: usize,
    /// `up` phases, each with `2 * half_width` taps.
    table: Vec<f64>,
}

impl PolyphaseResampler {
    pub fn new(up: usize, down: usize) -> Result<Self> {
        if up == 0 || down == 0 {
            return Err(Error::invalid("resampling factors must be positive"));
        }
        let g = gcd(up as u64, down as u64) as usize;
        let (up, down) = (up / g, down / g);
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half_width = (HALF_TAPS as f64 / cutoff).ceil() as usize;
        let taps = 2 * half_width;
        let i0b = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0; up * taps];
        for phase in 0..up {
            let frac = phase as f64 / up as f64;
            let row = &mut table[phase * taps..(phase + 1) * taps];
            for (t, h) in row.iter_mut().enumerate() {
                // input index offset relative to floor(position)
                let offset = t as f64 - (half_width as f64 - 1.0);
                let x = offset - frac;
                let r = x / half_width as f64;
                let w = if r.abs() <= 1.0 {
                    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0b
                } else {
                    0.0
                };
                *h = cutoff * sinc(cutoff * x) * w;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|h| *h /= s);
        }
        Ok(PolyphaseResampler {
            up,
            down,
            half_width,
            table,
        })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        let (t, l, m) = (input_len as u128, self.up as u128, self.down as u128);
        ((2 * t * l + m) / (2 * m)) as usize
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        let out_len = self.output_len(input.len());
        let taps = 2 * self.half_width;
        let mut out = Vec::with_capacity(out_len);
        for n in 0..out_len {
            let pos = n * self.down;
            let base = (pos / self.up) as isize;
            let phase = pos % self.up;
            let row = &self.table[phase * taps..(phase + 1) * taps];
            let first = base - (self.half_width as isize - 1);
            let mut acc = 0.0f64;
            for (t, &h) in row.iter().enumerate() {
                let j = first + t as isize;
                if j >= 0 && (j as usize) < input.len() {
                    acc += h * input[j as usize] as f64;
                }
            }
            out.push(acc as f32);
        }
        out
    }
}

/// Resamples `w` to `target_rate`; equal rates return the input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if target_rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let r = PolyphaseResampler::new(target_rate as usize, w.sample_rate() as usize)?;
    Waveform::new(r.process(w.samples()), target_rate)
}

/// Speed change by `ratio` (>1 is faster): the signal is resampled so its
/// duration scales by `1 / ratio` while the nominal rate stays the same.
pub fn change_speed(w: &Waveform, ratio: f64) -> Result<Waveform> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::invalid(format!("speed ratio must be positive, got {ratio}")));
    }
    let num = (ratio * 1000.0).round() as usize;
    if num == 1000 {
        return Ok(w.clone());
    }
    let r = PolyphaseResampler::new(1000, num.max(1))?;
    Waveform::new(r.process(w.samples()), w.sample_rate())
}
