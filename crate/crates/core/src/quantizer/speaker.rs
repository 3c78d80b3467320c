use crate::audio::{MelConfig, MelSpectrogram, Waveform};
use crate::error::Result;

pub const SPEAKER_DIM: usize = 32;

/// Fixed spectral-statistics speaker vector: log mean band energy over 32
/// mel bands, mean-removed and scaled to unit norm.
pub fn stub_speaker_embedder(wave: &Waveform) -> Result<Vec<f64>> {
    wave.non_empty()?;
    let cfg = MelConfig {
        sample_rate: wave.sample_rate,
        n_fft: 512,
        hop: 256,
        n_mels: SPEAKER_DIM,
        fmin: 0.0,
        fmax: wave.sample_rate as f64 / 2.0,
        log_floor: 1e-10,
    };
    let power = MelSpectrogram::new(cfg)?.mel_power(&wave.samples)?;
    let frames = power.rows() as f64;
    let mut v: Vec<f64> = (0..SPEAKER_DIM)
        .map(|b| {
            let mean = (0..power.rows()).map(|f| power.at(f, b)).sum::<f64>() / frames;
            (mean + cfg.log_floor).ln()
        })
        .collect();
    let mu = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mu);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        // flat spectrum (including digital silence)
        return Ok(vec![1.0 / (SPEAKER_DIM as f64).sqrt(); SPEAKER_DIM]);
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}
