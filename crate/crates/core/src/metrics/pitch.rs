use crate::audio::Waveform;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchConfig {
    pub frame_secs: f64,
    pub hop_secs: f64,
    pub fmin: f64,
    pub fmax: f64,
    /// Normalized correlation peak needed to call a frame voiced.
    pub voicing_threshold: f64,
    /// Frames quieter than this RMS are unvoiced.
    pub silence_rms: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            frame_secs: 0.025,
            hop_secs: 0.010,
            fmin: 60.0,
            fmax: 500.0,
            voicing_threshold: 0.5,
            silence_rms: 1e-4,
        }
    }
}

/// Per-frame fundamental frequency in Hz from the normalized cross-correlation
/// peak, refined by parabolic interpolation. Unvoiced frames report `None`.
pub fn pitch_contour(wave: &Waveform, cfg: &PitchConfig) -> Result<Vec<Option<f64>>> {
    wave.non_empty()?;
    let sr = wave.sample_rate as f64;
    let frame = (cfg.frame_secs * sr).round() as usize;
    let hop = (cfg.hop_secs * sr).round().max(1.0) as usize;
    let min_lag = (sr / cfg.fmax).floor().max(1.0) as usize;
    let max_lag = ((sr / cfg.fmin).ceil() as usize).min(frame - 1);
    let x = &wave.samples;
    let frames = if x.len() <= frame { 1 } else { 1 + (x.len() - frame) / hop };
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![0.0; frame];
    for f in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = x.get(f * hop + i).copied().unwrap_or(0.0);
        }
        let mean = buf.iter().sum::<f64>() / frame as f64;
        buf.iter_mut().for_each(|v| *v -= mean);
        let r0: f64 = buf.iter().map(|v| v * v).sum();
        if (r0 / frame as f64).sqrt() < cfg.silence_rms || min_lag + 1 >= max_lag {
            out.push(None);
            continue;
        }
        // normalized cross-correlation of the frame with its lagged self
        let r = |lag: usize| {
            let (head, tail) = (&buf[..frame - lag], &buf[lag..]);
            let e = head.iter().map(|v| v * v).sum::<f64>() * tail.iter().map(|v| v * v).sum::<f64>();
            if e > 0.0 { head.iter().zip(tail).map(|(a, b)| a * b).sum::<f64>() / e.sqrt() } else { 0.0 }
        };
        let acf: Vec<f64> = (min_lag - 1..=max_lag + 1).map(r).collect();
        // first local maximum within 90% of the best, which avoids picking a
        // multiple of the period
        let inner = 1..acf.len() - 1;
        let best = inner.clone().map(|i| acf[i]).fold(f64::NEG_INFINITY, f64::max);
        let peak = inner
            .clone()
            .find(|&i| acf[i] >= acf[i - 1] && acf[i] >= acf[i + 1] && acf[i] >= 0.9 * best)
            .unwrap_or_else(|| inner.clone().max_by(|&a, &b| acf[a].total_cmp(&acf[b])).expect("lag range"));
        if acf[peak] < cfg.voicing_threshold {
            out.push(None);
            continue;
        }
        let (a, b, c) = (acf[peak - 1], acf[peak], acf[peak + 1]);
        let denom = a - 2.0 * b + c;
        let offset = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let lag = (min_lag - 1 + peak) as f64 + offset;
        out.push(Some(sr / lag));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    #[test]
    fn pure_tone() {
        let w = Waveform::new((0..8000).map(|i| 0.5 * (2.0 * PI * 220.0 * i as f64 / 16000.0).sin()).collect(), 16000);
        let c = pitch_contour(&w, &PitchConfig::default()).unwrap();
        assert_eq!(c.len(), 1 + (8000 - 400) / 160);
        for f in &c {
            let f = f.expect("voiced");
            assert!((f - 220.0).abs() < 2.0, "{f}");
        }
    }

    #[test]
    fn chirp_contour_increases() {
        // 100 Hz to 200 Hz linearly over one second
        let sr = 16000.0;
        let w = Waveform::new(
            (0..16000)
                .map(|i| {
                    let t = i as f64 / sr;
                    0.5 * (2.0 * PI * (100.0 * t + 50.0 * t * t)).sin()
                })
                .collect(),
            16000,
        );
        let c: Vec<f64> = pitch_contour(&w, &PitchConfig::default()).unwrap().into_iter().map(|f| f.expect("voiced")).collect();
        assert!(c.windows(2).all(|p| p[1] > p[0]), "{c:?}");
        assert!((c[0] - 101.25).abs() < 3.0 && (c[c.len() - 1] - 198.75).abs() < 3.0, "{} {}", c[0], c[c.len() - 1]);
    }

    #[test]
    fn silence_and_noise_are_unvoiced() {
        let cfg = PitchConfig::default();
        let silent = Waveform::new(vec![0.0; 4000], 16000);
        assert!(pitch_contour(&silent, &cfg).unwrap().iter().all(Option::is_none));
        let mut s = 12345u64;
        let noise: Vec<f64> = (0..4000)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let voiced = pitch_contour(&Waveform::new(noise, 16000), &cfg).unwrap().iter().filter(|f| f.is_some()).count();
        assert_eq!(voiced, 0);
    }

    #[test]
    fn short_input_gives_one_frame() {
        let w = Waveform::new(vec![0.1; 10], 16000);
        assert_eq!(pitch_contour(&w, &PitchConfig::default()).unwrap().len(), 1);
        assert!(pitch_contour(&Waveform::new(vec![], 16000), &PitchConfig::default()).is_err());
    }
}
