//! Code grids to transformer token streams and back: per-group repetition
//! tokens, start/end framing, and the silence prompt.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::{CodeGrid, Quantizer};

/// Frames in the audio prompt prepended at inference.
pub const PROMPT_FRAMES: usize = 3;
/// Default standard deviation of the prompt noise.
pub const DEFAULT_PROMPT_SIGMA: f64 = 1e-5;

/// A token of a group vocabulary with `K` codes followed by three specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Code(usize),
    Rep,
    Start,
    End,
}

impl Token {
    pub fn id(self, k: usize) -> usize {
        match self {
            Token::Code(c) => c,
            Token::Rep => k,
            Token::Start => k + 1,
            Token::End => k + 2,
        }
    }

    pub fn from_id(id: usize, k: usize) -> Result<Self> {
        match id.checked_sub(k) {
            None => Ok(Token::Code(id)),
            Some(0) => Ok(Token::Rep),
            Some(1) => Ok(Token::Start),
            Some(2) => Ok(Token::End),
            Some(_) => Err(Error::Stream(format!("token id {id} outside vocabulary of {}", k + 3))),
        }
    }
}

/// Vocabulary size of each group: `K` codes plus REP, START, END.
pub fn vocab_size(k: usize) -> usize {
    k + 3
}

/// `positions × groups` token ids, stored position-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    groups: usize,
    codebook_size: usize,
    tokens: Vec<usize>,
}

impl TokenStream {
    /// Builds a stream from equal-length per-group sequences. Only the
    /// vocabulary range is checked here; framing is checked on decode.
    pub fn from_groups(seqs: &[Vec<usize>], codebook_size: usize) -> Result<Self> {
        let len = seqs.first().map_or(0, Vec::len);
        if seqs.is_empty() || len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Stream("groups must be nonempty and of equal length".into()));
        }
        let v = vocab_size(codebook_size);
        let mut tokens = Vec::with_capacity(len * seqs.len());
        for pos in 0..len {
            for s in seqs {
                if s[pos] >= v {
                    return Err(Error::Stream(format!("token id {} outside vocabulary of {v}", s[pos])));
                }
                tokens.push(s[pos]);
            }
        }
        Ok(Self {
            groups: seqs.len(),
            codebook_size,
            tokens,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, pos: usize, group: usize) -> usize {
        self.tokens[pos * self.groups + group]
    }

    pub fn position(&self, pos: usize) -> &[usize] {
        &self.tokens[pos * self.groups..(pos + 1) * self.groups]
    }

    pub fn group(&self, i: usize) -> Vec<usize> {
        (0..self.len()).map(|p| self.get(p, i)).collect()
    }

    pub fn ids(&self) -> &[usize] {
        &self.tokens
    }
}

/// Replaces, per group, every code equal to its predecessor with REP and
/// frames each group as `[START, .., END]`.
pub fn encode_repetition(c: &CodeGrid) -> TokenStream {
    let k = c.codebook_size();
    let seqs: Vec<Vec<usize>> = (0..c.groups())
        .map(|i| {
            let codes = c.group(i);
            let mut s = Vec::with_capacity(codes.len() + 2);
            s.push(Token::Start.id(k));
            for (t, &code) in codes.iter().enumerate() {
                let rep = t > 0 && codes[t - 1] == code;
                s.push(if rep { Token::Rep.id(k) } else { code });
            }
            s.push(Token::End.id(k));
            s
        })
        .collect();
    TokenStream::from_groups(&seqs, k).expect("codes are in range")
}

/// Resolves one frame of content tokens against the previous frame's codes.
pub fn expand_frame(tokens: &[usize], prev: Option<&[usize]>, k: usize) -> Result<Vec<usize>> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &id)| match Token::from_id(id, k)? {
            Token::Code(c) => Ok(c),
            Token::Rep => prev
                .map(|p| p[i])
                .ok_or_else(|| Error::Stream(format!("repetition token without predecessor in group {i}"))),
            t => Err(Error::Stream(format!("{t:?} inside content in group {i}"))),
        })
        .collect()
}

/// Exact inverse of [`encode_repetition`].
pub fn decode_repetition(s: &TokenStream) -> Result<CodeGrid> {
    let k = s.codebook_size();
    let len = s.len();
    if len < 3 {
        return Err(Error::Stream(format!("stream of length {len} has no content")));
    }
    if s.position(0).iter().any(|&id| id != Token::Start.id(k)) {
        return Err(Error::Stream("stream does not begin with START in every group".into()));
    }
    if s.position(len - 1).iter().any(|&id| id != Token::End.id(k)) {
        return Err(Error::Stream("stream does not end with END in every group".into()));
    }
    let mut frames: Vec<Vec<usize>> = Vec::with_capacity(len - 2);
    for pos in 1..len - 1 {
        let f = expand_frame(s.position(pos), frames.last().map(Vec::as_slice), k)?;
        frames.push(f);
    }
    CodeGrid::from_frames(&frames, k)
}

/// Codes of a `PROMPT_FRAMES`-frame Gaussian noise clip of standard deviation
/// `sigma` (zero gives digital silence).
pub fn silence_prompt(q: &Quantizer, sigma: f64, seed: u64) -> Result<CodeGrid> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("prompt sigma must be a finite non-negative number, got {sigma}")));
    }
    let len = PROMPT_FRAMES * q.hop();
    let samples = if sigma == 0.0 {
        vec![0.0; len]
    } else {
        Tensor::randn([len], sigma, &mut ChaCha8Rng::seed_from_u64(seed)).into_vec()
    };
    q.quantize(&Waveform::new(samples, q.config().sample_rate))
}

/// Fraction of content tokens that are REP.
pub fn repetition_rate(s: &TokenStream) -> f64 {
    let rep = Token::Rep.id(s.codebook_size());
    let content = (s.len() - 2) * s.groups();
    let reps = (1..s.len() - 1).flat_map(|p| s.position(p)).filter(|&&id| id == rep).count();
    reps as f64 / content.max(1) as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const S: usize = 11;
    const E: usize = 12;
    const R: usize = 10;

    fn one_group(codes: &[usize]) -> CodeGrid {
        CodeGrid::new(codes.len(), 1, 10, codes.to_vec()).unwrap()
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(encode_repetition(&one_group(&[5, 5, 5, 7])).group(0), vec![S, 5, R, R, 7, E]);
        assert_eq!(encode_repetition(&one_group(&[1, 2, 3])).group(0), vec![S, 1, 2, 3, E]);
        assert_eq!(encode_repetition(&one_group(&[4])).group(0), vec![S, 4, E]);
        let s = TokenStream::from_groups(&[vec![S, 5, R, R, 7, E]], 10).unwrap();
        assert_eq!(decode_repetition(&s).unwrap().codes(), [5, 5, 5, 7]);
    }

    #[test]
    fn malformed_streams() {
        let bad = |seq: Vec<usize>| decode_repetition(&TokenStream::from_groups(&[seq], 10).unwrap());
        assert!(matches!(bad(vec![S, R, 3, E]), Err(Error::Stream(_))));
        assert!(matches!(bad(vec![3, 4, E]), Err(Error::Stream(_))));
        assert!(matches!(bad(vec![S, 3, S, E]), Err(Error::Stream(_))));
        assert!(matches!(bad(vec![S, 3, E, 4]), Err(Error::Stream(_))));
        assert!(matches!(bad(vec![S, E]), Err(Error::Stream(_))));
        assert!(TokenStream::from_groups(&[vec![S, 13, E]], 10).is_err());
    }

    #[test]
    fn groups_are_independent() {
        let c = CodeGrid::new(3, 2, 10, vec![1, 2, 1, 3, 4, 3]).unwrap();
        let s = encode_repetition(&c);
        assert_eq!(s.group(0), vec![S, 1, R, 4, E]);
        assert_eq!(s.group(1), vec![S, 2, 3, R, E]);
    }

    fn grid_strategy() -> impl Strategy<Value = CodeGrid> {
        (prop::sample::select(vec![1usize, 4, 8]), 1usize..40, 1usize..6).prop_flat_map(|(n, t, k)| {
            prop::collection::vec(0..k, t * n).prop_map(move |codes| CodeGrid::new(t, n, k, codes).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip(c in grid_strategy()) {
            let s = encode_repetition(&c);
            prop_assert_eq!(s.len(), c.frames() + 2);
            prop_assert_eq!(decode_repetition(&s).unwrap(), c);
        }
    }
}
