//! Waveforms, WAV I/O, resampling, mixing and augmentation.

pub mod augment;
pub mod mix;
pub mod resample;
pub mod toy;
pub mod wav;
mod waveform;

pub use augment::{augment, AugmentConfig};
pub use mix::{make_mixture_sample, mix_at_snr, snr_db, MixtureSample};
pub use resample::{change_speed, resample};
pub use toy::{synth_toy_source, toy_f0};
pub use wav::{read_wav, write_wav, WavEncoding};
pub use waveform::{Waveform, DEFAULT_SAMPLE_RATE};
