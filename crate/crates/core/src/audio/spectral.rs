use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Added to mel energies before the logarithm.
    pub log_floor: f64,
}

impl MelConfig {
    /// Front end of the quantizer reconstruction loss: 80 bands, 1024-sample
    /// window, hop 64, log floor 1e-5.
    pub fn reconstruction(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            n_fft: 1024,
            hop: 64,
            n_mels: 80,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            log_floor: 1e-5,
        }
    }

    /// Front end for mel-cepstral analysis: 40 bands, 25 ms window, 5 ms hop.
    pub fn cepstral(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            n_fft: (sample_rate as usize * 25).div_ceil(1000).next_power_of_two(),
            hop: sample_rate as usize / 200,
            n_mels: 40,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            log_floor: 1e-8,
        }
    }
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `[n_mels][n_fft/2 + 1]`, unit peak.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II matrix, `[n_out][n_in]`.
pub fn dct_ii(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n_in as f64).sqrt() } else { (2.0 / n_in as f64).sqrt() };
            (0..n_in)
                .map(|n| scale * (PI * k as f64 * (n as f64 + 0.5) / n_in as f64).cos())
                .collect()
        })
        .collect()
}

/// Centered short-time power spectrum followed by a mel filterbank and a
/// floored logarithm. Frames are taken every `hop` samples with the signal
/// zero-padded by `n_fft / 2` on both sides.
#[derive(Clone)]
pub struct MelSpectrogram {
    cfg: MelConfig,
    window: Arc<Vec<f64>>,
    /// Per band: first nonzero bin and the weights from there on.
    bands: Arc<Vec<(usize, Vec<f64>)>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelSpectrogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelSpectrogram").field("cfg", &self.cfg).finish()
    }
}

impl MelSpectrogram {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        if cfg.n_fft < 2 || cfg.hop == 0 || cfg.n_mels == 0 {
            return Err(Error::Config(format!("invalid mel configuration {cfg:?}")));
        }
        if cfg.fmax > cfg.sample_rate as f64 / 2.0 + 1e-9 || cfg.fmin >= cfg.fmax {
            return Err(Error::Config(format!("mel range {}..{} Hz invalid", cfg.fmin, cfg.fmax)));
        }
        if cfg.log_floor <= 0.0 {
            return Err(Error::Config("log floor must be positive".into()));
        }
        let fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax);
        let bands = fb
            .into_iter()
            .map(|row| {
                let start = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = row.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                (start, row[start..end].to_vec())
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: Arc::new(hann_window(cfg.n_fft)),
            bands: Arc::new(bands),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len / self.cfg.hop + 1
    }

    fn bins(&self) -> usize {
        self.cfg.n_fft / 2 + 1
    }

    /// One-sided spectra of every frame, `frames × (n_fft/2 + 1)`.
    fn spectra(&self, x: &[f64]) -> (usize, Vec<Complex64>) {
        let n = self.cfg.n_fft;
        let half = n / 2;
        let frames = self.num_frames(x.len());
        let bins = self.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                let s = (f * self.cfg.hop + i).checked_sub(half);
                let v = s.and_then(|s| x.get(s)).copied().unwrap_or(0.0);
                *b = Complex64::new(v * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        (frames, out)
    }

    fn mel_energies(&self, frames: usize, spectra: &[Complex64]) -> Vec<f64> {
        let bins = self.bins();
        let m = self.cfg.n_mels;
        let mut mel = vec![0.0; frames * m];
        for f in 0..frames {
            let spec = &spectra[f * bins..(f + 1) * bins];
            for (b, (start, w)) in self.bands.iter().enumerate() {
                mel[f * m + b] = w.iter().zip(&spec[*start..]).map(|(wk, c)| wk * c.norm_sqr()).sum();
            }
        }
        mel
    }

    /// Mel energies (no logarithm), `[frames, n_mels]`.
    pub fn mel_power(&self, x: &[f64]) -> Result<Tensor> {
        let (frames, spec) = self.spectra(x);
        Tensor::new([frames, self.cfg.n_mels], self.mel_energies(frames, &spec))
    }

    /// `ln(mel + floor)`, `[frames, n_mels]`.
    pub fn log_mel(&self, x: &[f64]) -> Result<Tensor> {
        let mel = self.mel_power(x)?;
        let floor = self.cfg.log_floor;
        Ok(mel.map(|e| (e + floor).ln()))
    }
}

struct LogMelBackward {
    spec: MelSpectrogram,
    frames: usize,
    len: usize,
    spectra: Vec<Complex64>,
    mel: Vec<f64>,
}

impl CustomOp for LogMelBackward {
    fn name(&self) -> &'static str {
        "log_mel"
    }

    fn backward(&self, grad_out: &[f64], _inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Vec<f64>>> {
        let cfg = &self.spec.cfg;
        let (n, half, bins, m) = (cfg.n_fft, cfg.n_fft / 2, cfg.n_fft / 2 + 1, cfg.n_mels);
        let mut gx = vec![0.0; self.len];
        let mut dp = vec![0.0; bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..self.frames {
            dp.iter_mut().for_each(|v| *v = 0.0);
            for (b, (start, w)) in self.spec.bands.iter().enumerate() {
                let dm = grad_out[f * m + b] / (self.mel[f * m + b] + cfg.log_floor);
                for (k, wk) in w.iter().enumerate() {
                    dp[start + k] += wk * dm;
                }
            }
            // d|X_k|²/dx flows back through an inverse transform of 2·dP_k·X_k
            let spec = &self.spectra[f * bins..(f + 1) * bins];
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < bins { spec[k] * (2.0 * dp[k]) } else { Complex64::new(0.0, 0.0) };
            }
            self.spec.inverse.process(&mut buf);
            for (i, b) in buf.iter().enumerate() {
                if let Some(s) = (f * cfg.hop + i).checked_sub(half).filter(|&s| s < self.len) {
                    gx[s] += self.spec.window[i] * b.re;
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Differentiable log-mel spectrogram of a waveform held on the tape as a
/// `[samples, 1]` or `[samples]` tensor.
pub fn log_mel_on_tape(tape: &mut Tape, x: Var, spec: &MelSpectrogram) -> Var {
    let samples = tape.value(x).data().to_vec();
    let (frames, spectra) = spec.spectra(&samples);
    let mel = spec.mel_energies(frames, &spectra);
    let floor = spec.cfg.log_floor;
    let out = Tensor::from_parts(vec![frames, spec.cfg.n_mels], mel.iter().map(|e| (e + floor).ln()).collect());
    let op = LogMelBackward {
        spec: spec.clone(),
        frames,
        len: samples.len(),
        spectra,
        mel,
    };
    tape.custom(&[x], out, Box::new(op))
}
