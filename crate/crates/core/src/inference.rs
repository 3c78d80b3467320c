//! Autoregressive synthesis: silence prompt, per-group nucleus sampling, the
//! monotonic cross-attention window and alignment-based stopping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::codec::{expand_frame, silence_prompt, Token, DEFAULT_PROMPT_SIGMA};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::{CodeGrid, Quantizer};
use crate::synthesizer::{softmax, DecoderState, PhonemeSequence, Synthesizer};

/// Slack when comparing cumulative mass against `p`, so that a prefix whose
/// exact sum equals `p` is accepted despite rounding.
const MASS_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub top_p: f64,
    /// `N_w`: the number of encoder positions in the attention window.
    pub window: usize,
    pub prompt_sigma: f64,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            top_p: 0.8,
            window: 4,
            prompt_sigma: DEFAULT_PROMPT_SIGMA,
            max_frames: 1000,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.window == 0 || self.max_frames == 0 {
            return Err(Error::Config("window and max_frames must be positive".into()));
        }
        if !(self.prompt_sigma >= 0.0 && self.prompt_sigma.is_finite()) {
            return Err(Error::Config(format!("invalid prompt sigma {}", self.prompt_sigma)));
        }
        Ok(())
    }
}

/// Token ids of the top-`p` nucleus, most probable first; equal
/// probabilities are ordered by token id.
pub fn nucleus_candidates(dist: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (n, &i) in order.iter().enumerate() {
        mass += dist[i];
        if mass >= p - MASS_SLACK {
            keep = n + 1;
            break;
        }
    }
    order.truncate(keep);
    order
}

/// Samples from the renormalized nucleus. Returns the token and the
/// candidate set it was drawn from.
pub fn nucleus_sample_traced<R: Rng>(dist: &[f64], p: f64, rng: &mut R) -> (usize, Vec<usize>) {
    let cand = nucleus_candidates(dist, p);
    let total: f64 = cand.iter().map(|&i| dist[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in &cand {
        u -= dist[i];
        if u < 0.0 {
            return (i, cand);
        }
    }
    let last = *cand.iter().rev().find(|&&i| dist[i] > 0.0).unwrap_or(&cand[0]);
    (last, cand)
}

pub fn nucleus_sample<R: Rng>(dist: &[f64], p: f64, rng: &mut R) -> usize {
    nucleus_sample_traced(dist, p, rng).0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignmentState {
    /// Window start `b_k`.
    pub start: usize,
    /// `N_w`.
    pub window: usize,
    /// Decoder step `k`.
    pub step: usize,
    pub enc_len: usize,
}

impl AlignmentState {
    pub fn new(window: usize, enc_len: usize) -> Self {
        Self {
            start: 0,
            window,
            step: 0,
            enc_len,
        }
    }

    /// Encoder positions `[b_k, min(b_k + N_w, enc_len))`.
    pub fn range(&self) -> (usize, usize) {
        (self.start, (self.start + self.window).min(self.enc_len))
    }
}

/// Moves the window one position forward when the softmax weight of its
/// first position over the (clipped) window falls strictly below `1/N_w`.
/// `window_logits` are the logits at positions `range()`.
pub fn advance_alignment(window_logits: &[f64], st: AlignmentState) -> Result<AlignmentState> {
    let (s, e) = st.range();
    if window_logits.len() != e - s {
        return Err(Error::Input(format!("{} logits for a window of {}", window_logits.len(), e - s)));
    }
    if window_logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite attention logit".into()));
    }
    let first = softmax(window_logits)[0];
    let advance = first < 1.0 / st.window as f64 && st.start + 1 < st.enc_len;
    Ok(AlignmentState {
        start: st.start + usize::from(advance),
        step: st.step + 1,
        ..st
    })
}

/// Single-head attention restricted to the alignment window. Returns the
/// context vector and the logits at every encoder position (`-inf` outside
/// the window, so those positions get exactly zero weight).
pub fn masked_cross_attention(query: &[f64], keys: &Tensor, values: &Tensor, st: &AlignmentState) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = keys.dims2()?;
    if query.len() != d || values.rows() != n || st.enc_len != n {
        return Err(Error::shape("masked_cross_attention", keys.shape(), &[query.len()]));
    }
    let (s, e) = st.range();
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = (0..n)
        .map(|j| {
            if j >= s && j < e {
                keys.row(j).iter().zip(query).map(|(a, b)| a * b).sum::<f64>() * scale
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let w = softmax(&logits);
    let mut ctx = vec![0.0; values.cols()];
    for j in s..e {
        for (c, v) in ctx.iter_mut().zip(values.row(j)) {
            *c += w[j] * v;
        }
    }
    Ok((ctx, logits))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// The window moved past the final phoneme.
    Alignment,
    EndToken,
    MaxFrames,
}

/// One sampled token with the size of its nucleus and its rank in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleTrace {
    pub token: usize,
    pub rank: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    /// `b_k` at every generated frame.
    pub alignment: Vec<usize>,
    /// Entropy (nats) of every group distribution, per frame.
    pub entropies: Vec<Vec<f64>>,
    /// Cross-attention weights over encoder positions, per frame.
    pub attention: Vec<Vec<f64>>,
    pub samples: Vec<SampleTrace>,
    pub prompt: CodeGrid,
    pub enc_len: usize,
    pub stop: StopReason,
}

impl Diagnostics {
    pub fn truncated(&self) -> bool {
        self.stop == StopReason::MaxFrames
    }

    /// Number of frames spent at each encoder position.
    pub fn dwell(&self) -> Vec<usize> {
        let mut d = vec![0; self.enc_len];
        for &b in &self.alignment {
            d[b] += 1;
        }
        d
    }
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub wave: Waveform,
    pub codes: CodeGrid,
    pub diagnostics: Diagnostics,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Generates codes for `phonemes` and decodes them to audio.
pub fn synthesize(
    q: &Quantizer,
    m: &Synthesizer,
    phonemes: &PhonemeSequence,
    speaker: &[f64],
    cfg: &SynthesisConfig,
) -> Result<Synthesis> {
    cfg.validate()?;
    let tc = m.config();
    let qc = q.config();
    if tc.groups != qc.groups || tc.codebook_size != qc.codebook_size {
        return Err(Error::Config("synthesizer and quantizer disagree on N or K".into()));
    }
    let (n, k) = (tc.groups, tc.codebook_size);
    let prompt = silence_prompt(q, cfg.prompt_sigma, cfg.seed)?;
    let enc = m.encode_phonemes(phonemes)?;
    let spk = m.speaker_vector(speaker)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = DecoderState::default();
    let mut align = AlignmentState::new(cfg.window, enc.len());
    let start_id = Token::Start.id(k);
    let end_id = Token::End.id(k);

    // consume START and the prompt frames
    let mut step = m.decoder_step(&m.start_frame(), &spk, &enc, &mut state, Some(align.range()))?;
    let mut prev: Vec<usize> = Vec::new();
    for t in 0..prompt.frames() {
        let frame = prompt.frame(t);
        let tokens: Vec<usize> = (0..n)
            .map(|i| if t > 0 && prev[i] == frame[i] { Token::Rep.id(k) } else { frame[i] })
            .collect();
        step = m.decoder_step(&tokens, &spk, &enc, &mut state, Some(align.range()))?;
        prev = frame.to_vec();
    }

    let mut frames: Vec<Vec<usize>> = Vec::new();
    let mut diag = Diagnostics {
        alignment: Vec::new(),
        entropies: Vec::new(),
        attention: Vec::new(),
        samples: Vec::new(),
        prompt: prompt.clone(),
        enc_len: enc.len(),
        stop: StopReason::MaxFrames,
    };
    while frames.len() < cfg.max_frames {
        let (s, e) = align.range();
        let next = advance_alignment(&step.cross_logits[s..e], align)?;
        if !frames.is_empty() && next.start == enc.len() - 1 {
            diag.stop = StopReason::Alignment;
            break;
        }

        let mut tokens = Vec::with_capacity(n);
        let mut ent = Vec::with_capacity(n);
        for _ in 0..n {
            let mut dist = m.group_distribution(&step.output, &tokens)?;
            ent.push(entropy(&dist));
            dist[start_id] = 0.0;
            if frames.is_empty() {
                // at least one frame is always produced
                dist[end_id] = 0.0;
            }
            let z: f64 = dist.iter().sum();
            dist.iter_mut().for_each(|x| *x /= z);
            let (tok, cand) = nucleus_sample_traced(&dist, cfg.top_p, &mut rng);
            let rank = cand.iter().position(|&c| c == tok).unwrap_or(cand.len());
            diag.samples.push(SampleTrace {
                token: tok,
                rank,
                candidates: cand.len(),
            });
            tokens.push(tok);
        }
        if tokens.contains(&end_id) {
            diag.stop = StopReason::EndToken;
            break;
        }
        let codes = expand_frame(&tokens, Some(&prev), k)?;
        diag.alignment.push(align.start);
        diag.entropies.push(ent);
        diag.attention.push(step.cross_weights.clone());
        frames.push(codes.clone());
        prev = codes;

        align = AlignmentState {
            start: next.start.min(enc.len() - 2).max(align.start),
            ..next
        };
        step = m.decoder_step(&tokens, &spk, &enc, &mut state, Some(align.range()))?;
    }

    let codes = CodeGrid::from_frames(&frames, k)?;
    let wave = q.decode(&codes, speaker)?;
    Ok(Synthesis {
        wave,
        codes,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Smallest prefix of the descending order whose mass reaches
    /// `p_milli / 1000`, in exact integer arithmetic over weights `raw`.
    fn oracle(raw: &[u64], p_milli: u64) -> Vec<usize> {
        let total: u64 = raw.iter().sum();
        let mut idx: Vec<usize> = (0..raw.len()).collect();
        idx.sort_by_key(|&i| (std::cmp::Reverse(raw[i]), i));
        let mut acc = 0;
        for m in 1..=idx.len() {
            acc += raw[idx[m - 1]];
            if acc * 1000 >= p_milli * total {
                return idx[..m].to_vec();
            }
        }
        idx
    }

    #[test]
    fn nucleus_examples() {
        let d = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(nucleus_candidates(&d, 0.8), vec![0, 1]);
        assert_eq!(oracle(&[50, 30, 15, 5], 800), vec![0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20000;
        let zeros = (0..n).filter(|_| nucleus_sample(&d, 0.8, &mut rng) == 0).count();
        assert!((zeros as f64 / n as f64 - 0.625).abs() < 0.015);
        assert_eq!(nucleus_candidates(&d, 1.0).len(), 4);
        let one_hot = [0.0, 1.0, 0.0];
        for p in [0.1, 0.5, 1.0] {
            assert_eq!(nucleus_sample(&one_hot, p, &mut rng), 1);
        }
        // ties go to the lower id
        assert_eq!(nucleus_candidates(&[0.25; 4], 0.5), vec![0, 1]);
    }

    #[test]
    fn alignment_examples() {
        let st = AlignmentState::new(4, 10);
        // equal weights sit exactly at 1/4: no advance under the strict test
        assert_eq!(advance_alignment(&[0.0; 4], st).unwrap().start, 0);
        let clipped = AlignmentState { start: 7, ..st };
        assert_eq!(clipped.range(), (7, 10));
        assert_eq!(advance_alignment(&[1.0; 3], clipped).unwrap().start, 7);
        let st4 = AlignmentState::new(4, 4);
        assert_eq!(advance_alignment(&[0.0, 5.0, 0.0, 0.0], st4).unwrap().start, 1);
        let w = softmax(&[0.0, 5.0, 0.0, 0.0])[0];
        assert!((w - 0.0066).abs() < 1e-4);
        let end = AlignmentState { start: 9, ..st };
        assert_eq!(end.range(), (9, 10));
        assert_eq!(advance_alignment(&[3.0], end).unwrap().start, 9);
        assert!(advance_alignment(&[0.0; 3], st).is_err());
    }

    #[test]
    fn masked_attention_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keys = Tensor::randn([6, 4], 1.0, &mut rng);
        let values = Tensor::randn([6, 3], 1.0, &mut rng);
        let q = [0.3, -0.1, 0.7, 0.2];
        let st = AlignmentState {
            start: 2,
            window: 1,
            step: 0,
            enc_len: 6,
        };
        let (ctx, logits) = masked_cross_attention(&q, &keys, &values, &st).unwrap();
        assert_eq!(ctx, values.row(2));
        let w = softmax(&logits);
        assert!(w.iter().enumerate().all(|(j, &x)| (j == 2) == (x > 0.0)));

        let st = AlignmentState {
            start: 1,
            window: 3,
            ..st
        };
        let (_, logits) = masked_cross_attention(&q, &keys, &values, &st).unwrap();
        let w = softmax(&logits);
        assert_eq!((w[0], w[4], w[5]), (0.0, 0.0, 0.0));
        assert!((w[1..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // a window covering everything matches plain attention
        let full = AlignmentState {
            start: 0,
            window: 10,
            ..st
        };
        let (ctx, logits) = masked_cross_attention(&q, &keys, &values, &full).unwrap();
        let w = softmax(&logits);
        for c in 0..3 {
            let e: f64 = (0..6).map(|j| w[j] * values.at(j, c)).sum();
            assert!((ctx[c] - e).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn nucleus_matches_oracle(raw in prop::collection::vec(0u64..1000, 1..12), p_milli in 1u64..=1000, seed in 0u64..1000) {
            let total: u64 = raw.iter().sum();
            prop_assume!(total > 0);
            let dist: Vec<f64> = raw.iter().map(|&r| r as f64 / total as f64).collect();
            let p = p_milli as f64 / 1000.0;
            let cand = nucleus_candidates(&dist, p);
            prop_assert_eq!(&cand, &oracle(&raw, p_milli));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tok, _) = nucleus_sample_traced(&dist, p, &mut rng);
            prop_assert!(cand.contains(&tok));
            prop_assert!(dist[tok] > 0.0);
        }

        #[test]
        fn alignment_moves_by_at_most_one(logits in prop::collection::vec(-5.0f64..5.0, 1..8), start in 0usize..10, w in 1usize..7) {
            let st = AlignmentState { start: start.min(9), window: w, step: 0, enc_len: 10 };
            let (s, e) = st.range();
            let l: Vec<f64> = logits.iter().cycle().take(e - s).copied().collect();
            let next = advance_alignment(&l, st).unwrap();
            prop_assert!(next.start == st.start || next.start == st.start + 1);
            prop_assert!(next.start < 10);
        }
    }
}
