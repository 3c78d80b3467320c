//! Synthetic speech-like corpus: each phoneme is a short waveform motif whose
//! pitch depends on the speaker, separated by silence and laid over a
//! constant noise floor.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::kv_section;
use crate::parallel;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub utterances: usize,
    /// Phoneme inventory size.
    pub phonemes: usize,
    pub speakers: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Duration range of one phoneme, in frames of `hop` samples.
    pub min_phoneme_frames: usize,
    pub max_phoneme_frames: usize,
    /// Silence before and after the utterance, in frames.
    pub silence_frames: usize,
    pub hop: usize,
    /// Standard deviation of the background noise floor.
    pub sigma_bg: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            utterances: 50,
            phonemes: 16,
            speakers: 4,
            min_phonemes: 3,
            max_phonemes: 6,
            min_phoneme_frames: 4,
            max_phoneme_frames: 8,
            silence_frames: 3,
            hop: 64,
            sigma_bg: 1e-4,
            sample_rate: SAMPLE_RATE,
            seed: 0,
        }
    }
}

kv_section!(CorpusSpec {
    utterances, phonemes, speakers, min_phonemes, max_phonemes, min_phoneme_frames,
    max_phoneme_frames, silence_frames, hop, sigma_bg, sample_rate, seed,
});

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.utterances == 0 || self.speakers == 0 || self.hop == 0 {
            return bad("utterances, speakers and hop must be positive");
        }
        if self.phonemes == 0 || self.phonemes > 26 {
            return bad("phoneme inventory must hold 1 to 26 symbols");
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return bad("need 1 <= min_phonemes <= max_phonemes");
        }
        if self.min_phoneme_frames == 0 || self.min_phoneme_frames > self.max_phoneme_frames {
            return bad("need 1 <= min_phoneme_frames <= max_phoneme_frames");
        }
        if !(self.sigma_bg >= 0.0 && self.sigma_bg.is_finite()) {
            return bad("sigma_bg must be a finite non-negative number");
        }
        Ok(())
    }

    /// Fundamental frequency of a speaker: 100 Hz for speaker 0, a fifth of
    /// an octave higher for each next speaker.
    pub fn speaker_base_hz(&self, speaker: usize) -> f64 {
        100.0 * 2f64.powf(speaker as f64 / 5.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotifKind {
    Sine,
    Chirp,
    NoiseBurst,
}

/// Motif shape and pitch multiplier of a phoneme.
pub fn motif(phoneme: usize) -> (MotifKind, f64) {
    let kind = match phoneme % 3 {
        0 => MotifKind::Sine,
        1 => MotifKind::Chirp,
        _ => MotifKind::NoiseBurst,
    };
    (kind, 2f64.powf((phoneme / 3) as f64 / 4.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    pub wave: Waveform,
}

/// Phonemes written as letters, `0 → 'a'`.
pub fn phoneme_string(ids: &[usize]) -> String {
    ids.iter().map(|&p| (b'a' + p as u8) as char).collect()
}

pub fn parse_phoneme_string(s: &str, inventory: usize) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| match c {
            'a'..='z' if ((c as u8 - b'a') as usize) < inventory => Ok((c as u8 - b'a') as usize),
            _ => Err(Error::Input(format!("{c:?} is not one of the first {inventory} phoneme letters"))),
        })
        .collect()
}

fn render_motif(out: &mut [f64], kind: MotifKind, f0: f64, sr: f64, rng: &mut ChaCha8Rng) {
    let n = out.len();
    let fade = (0.005 * sr) as usize;
    let mut lp = 0.0;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let v = match kind {
            MotifKind::Sine => 0.4 * (2.0 * PI * f0 * t).sin() + 0.15 * (4.0 * PI * f0 * t).sin(),
            MotifKind::Chirp => {
                // f0 rising to 1.5 f0 across the motif
                let dur = n as f64 / sr;
                let phase = 2.0 * PI * (f0 * t + 0.25 * f0 * t * t / dur);
                0.4 * phase.sin()
            }
            MotifKind::NoiseBurst => {
                let a = (-2.0 * PI * f0 * 4.0 / sr).exp();
                lp = a * lp + (1.0 - a) * noise.sample(rng);
                (0.7 * lp).clamp(-0.9, 0.9)
            }
        };
        let edge = i.min(n - 1 - i);
        let gain = if edge < fade { 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos() } else { 1.0 };
        *o = v * gain;
    }
}

fn utterance(spec: &CorpusSpec, index: usize) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let speaker = index % spec.speakers;
    let count = rng.random_range(spec.min_phonemes..=spec.max_phonemes);
    let phonemes: Vec<usize> = (0..count).map(|_| rng.random_range(0..spec.phonemes)).collect();
    let durations: Vec<usize> = (0..count)
        .map(|_| rng.random_range(spec.min_phoneme_frames..=spec.max_phoneme_frames) * spec.hop)
        .collect();
    let pad = spec.silence_frames * spec.hop;
    let len = 2 * pad + durations.iter().sum::<usize>();
    let mut samples = vec![0.0; len];
    let sr = spec.sample_rate as f64;
    let base = spec.speaker_base_hz(speaker);
    let mut at = pad;
    for (&p, &d) in phonemes.iter().zip(&durations) {
        let (kind, ratio) = motif(p);
        render_motif(&mut samples[at..at + d], kind, base * ratio, sr, &mut rng);
        at += d;
    }
    if spec.sigma_bg > 0.0 {
        let floor = Normal::new(0.0, spec.sigma_bg).expect("valid sigma");
        samples.iter_mut().for_each(|s| *s += floor.sample(&mut rng));
    }
    Utterance {
        id: format!("utt{index:04}"),
        phonemes,
        speaker,
        wave: Waveform::new(samples, spec.sample_rate),
    }
}

/// Every utterance draws from its own RNG stream, so the corpus does not
/// depend on how generation is scheduled across threads.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    Ok(parallel::map_range(spec.utterances, |i| utterance(spec, i)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub speaker: usize,
    pub phonemes: String,
}

impl From<&Utterance> for ManifestEntry {
    fn from(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            speaker: u.speaker,
            phonemes: phoneme_string(&u.phonemes),
        }
    }
}

/// Tab-separated `id, speaker, phonemes` rows under a header line.
pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from("id\tspeaker\tphonemes\n");
    for e in entries {
        let _ = writeln!(out, "{}\t{}\t{}", e.id, e.speaker, e.phonemes);
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id\tspeaker\tphonemes") {
        return Err(Error::Format("manifest must start with the id/speaker/phonemes header".into()));
    }
    let mut seen = std::collections::HashSet::new();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Format(format!("manifest line {}: {l:?}", n + 2));
            if cols.len() != 3 || cols[0].is_empty() {
                return Err(bad());
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(Error::Format(format!("duplicate manifest id {}", cols[0])));
            }
            Ok(ManifestEntry {
                id: cols[0].to_string(),
                speaker: cols[1].parse().map_err(|_| bad())?,
                phonemes: cols[2].to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{pitch_contour, PitchConfig};

    #[test]
    fn deterministic_and_well_formed() {
        let spec = CorpusSpec { utterances: 12, seed: 7, ..Default::default() };
        let a = generate_corpus(&spec).unwrap();
        assert_eq!(a, generate_corpus(&spec).unwrap());
        let other = generate_corpus(&CorpusSpec { seed: 8, ..spec.clone() }).unwrap();
        assert_ne!(a[0].wave, other[0].wave);
        for u in &a {
            assert_eq!(u.wave.len() % spec.hop, 0);
            assert!((spec.min_phonemes..=spec.max_phonemes).contains(&u.phonemes.len()));
            assert!(u.wave.samples.iter().all(|v| v.abs() < 1.0));
        }
        // a prefix of a larger corpus is the smaller corpus
        let more = generate_corpus(&CorpusSpec { utterances: 20, ..spec }).unwrap();
        assert_eq!(&more[..12], &a[..]);
    }

    #[test]
    fn manifest_rows_and_speakers() {
        let spec = CorpusSpec { utterances: 50, speakers: 4, ..Default::default() };
        let entries: Vec<ManifestEntry> = generate_corpus(&spec).unwrap().iter().map(Into::into).collect();
        let text = write_manifest(&entries);
        let back = parse_manifest(&text).unwrap();
        assert_eq!(back, entries);
        assert_eq!(back.len(), 50);
        let speakers: std::collections::BTreeSet<usize> = back.iter().map(|e| e.speaker).collect();
        assert_eq!(speakers.len(), 4);
        assert!(parse_manifest("id\tspeaker\tphonemes\na\t0\tab\na\t1\tc\n").is_err());
        assert!(parse_manifest("nope\n").is_err());
    }

    #[test]
    fn phoneme_letters() {
        assert_eq!(phoneme_string(&[0, 2, 15]), "acp");
        assert_eq!(parse_phoneme_string("acp", 16).unwrap(), vec![0, 2, 15]);
        assert!(parse_phoneme_string("q", 16).is_err());
    }

    #[test]
    fn sine_motif_pitch_is_recovered() {
        // a single long sine phoneme for each speaker
        let spec = CorpusSpec {
            utterances: 2,
            speakers: 2,
            phonemes: 1,
            min_phonemes: 1,
            max_phonemes: 1,
            min_phoneme_frames: 40,
            max_phoneme_frames: 40,
            ..Default::default()
        };
        for u in generate_corpus(&spec).unwrap() {
            let f0 = spec.speaker_base_hz(u.speaker) * motif(0).1;
            let contour = pitch_contour(&u.wave, &PitchConfig::default()).unwrap();
            let voiced: Vec<f64> = contour.into_iter().flatten().collect();
            assert!(voiced.len() >= 10);
            let mut sorted = voiced.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            assert!((median - f0).abs() < 0.03 * f0, "{median} vs {f0}");
        }
    }
}
