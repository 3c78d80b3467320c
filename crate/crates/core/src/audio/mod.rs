//! Waveforms and spectral front ends.

mod spectral;

pub use spectral::{dct_ii, hann_window, log_mel_on_tape, mel_filterbank, MelConfig, MelSpectrogram};

use crate::error::{Error, Result};

/// Sample rate used throughout the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of `hop`-sample frames covering the waveform (last one padded).
    pub fn num_frames(&self, hop: usize) -> usize {
        self.samples.len().div_ceil(hop)
    }

    pub fn non_empty(&self) -> Result<&Self> {
        if self.samples.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        Ok(self)
    }

    /// Copy cropped or zero-padded to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Waveform {
        let mut s = self.samples.clone();
        s.resize(len, 0.0);
        Waveform::new(s, self.sample_rate)
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}
