//! Stage two: a phoneme encoder and an autoregressive code decoder with ALiBi
//! self-attention, one single-head cross-attention on the last decoder layer,
//! speaker conditioning and a sub-decoder over codebook groups.

mod attention;
mod train;

pub use attention::{alibi_bias, alibi_entry, alibi_slopes, frame_causal_attention, MultiHeadAttention};
pub use train::{prompted_examples, train_tts, TtsExample, TtsTrainConfig, TtsTrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{encode_repetition, vocab_size, Token, TokenStream};
use crate::error::{Error, Result};
use crate::layers::{Embedding, LayerNorm, Linear};
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};
use crate::quantizer::SPEAKER_DIM;

/// Phoneme ids over an inventory of `inventory` symbols.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PhonemeSequence {
    ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, inventory: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("empty phoneme sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= inventory) {
            return Err(Error::Input(format!("phoneme id {bad} outside inventory of {inventory}")));
        }
        Ok(Self { ids })
    }

    /// Grapheme fallback for plain text: letters map onto the inventory by
    /// alphabet position, everything else is dropped.
    pub fn from_text(text: &str, inventory: usize) -> Result<Self> {
        let ids = text
            .chars()
            .filter(char::is_ascii_alphabetic)
            .map(|c| (c.to_ascii_lowercase() as usize - 'a' as usize) % inventory)
            .collect();
        Self::new(ids, inventory)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub groups: usize,
    pub codebook_size: usize,
    /// Phoneme inventory size (an end-of-sequence symbol is added internally).
    pub phonemes: usize,
    pub speaker_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub sub_layers: usize,
    /// Ablation: replace the sub-decoder by one linear head per group on `O_t`.
    pub linear_heads: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            codebook_size: 160,
            phonemes: 16,
            speaker_dim: SPEAKER_DIM,
            model_dim: 64,
            heads: 4,
            ff_dim: 256,
            enc_layers: 2,
            dec_layers: 2,
            sub_layers: 1,
            linear_heads: false,
        }
    }
}

impl TransformerConfig {
    pub fn vocab(&self) -> usize {
        vocab_size(self.codebook_size)
    }

    /// Index of the phoneme end-of-sequence symbol.
    pub fn eos(&self) -> usize {
        self.phonemes
    }

    /// Decoder layers carrying cross-attention: only the last one.
    pub fn cross_attention_layers(&self) -> Vec<usize> {
        vec![self.dec_layers - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.groups == 0 || self.codebook_size == 0 || self.phonemes == 0 || self.speaker_dim == 0 {
            return bad("groups, codebook_size, phonemes and speaker_dim must be positive");
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.ff_dim == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("ff_dim, enc_layers and dec_layers must be positive");
        }
        if !self.linear_heads && self.sub_layers == 0 {
            return bad("sub_layers must be positive unless linear_heads is set");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl Block {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, cross: bool, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            cross: cross.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                    MultiHeadAttention::new(store, &format!("{name}.cross"), d, 1, rng),
                )
            }),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_dim, rng),
        }
    }

    fn feed_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln_ff.forward(tape, p, x)?;
        let h = self.ff.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
enum Heads {
    Sub {
        embed: Vec<Embedding>,
        blocks: Vec<(LayerNorm, MultiHeadAttention, LayerNorm, FeedForward)>,
        ln_out: LayerNorm,
        out: Vec<Linear>,
    },
    Linear(Vec<Linear>),
}

/// Encoder output plus the cross-attention keys and values derived from it.
#[derive(Clone, Debug)]
pub struct EncodedText {
    pub states: Tensor,
    pub cross_k: Tensor,
    pub cross_v: Tensor,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Self-attention caches of an incremental decode.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    caches: Vec<Option<(Tensor, Tensor)>>,
    steps: usize,
}

impl DecoderState {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Cached key rows of layer `l`.
    pub fn cache_len(&self, l: usize) -> usize {
        self.caches.get(l).and_then(Option::as_ref).map_or(0, |(k, _)| k.rows())
    }
}

/// Result of one incremental decoder step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `O_t`, `[1, model_dim]`.
    pub output: Tensor,
    /// Cross-attention logits over all encoder positions (`-inf` outside the
    /// window when one is given).
    pub cross_logits: Vec<f64>,
    pub cross_weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Synthesizer {
    cfg: TransformerConfig,
    store: ParamStore,
    phoneme_embed: Embedding,
    enc_blocks: Vec<Block>,
    enc_ln: LayerNorm,
    token_embed: Vec<Embedding>,
    spk_in: Linear,
    spk_out: Linear,
    dec_blocks: Vec<Block>,
    dec_ln: LayerNorm,
    heads: Heads,
}

/// Per-position `[start, end)` window over encoder positions, applied to the
/// single-head cross-attention.
pub fn window_mask(enc_len: usize, start: usize, end: usize) -> Tensor {
    let data = (0..enc_len)
        .map(|j| if j >= start && j < end { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Tensor::from_parts(vec![1, enc_len], data)
}

impl Synthesizer {
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.model_dim;
        let vocab = cfg.vocab();

        let phoneme_embed = Embedding::new(&mut store, "enc.phoneme", cfg.phonemes + 1, d, &mut rng);
        let enc_blocks = (0..cfg.enc_layers)
            .map(|l| Block::new(&mut store, &format!("enc.block{l}"), &cfg, false, &mut rng))
            .collect();
        let enc_ln = LayerNorm::new(&mut store, "enc.ln", d);

        let token_embed = (0..cfg.groups)
            .map(|i| Embedding::new(&mut store, &format!("dec.token{i}"), vocab, d, &mut rng))
            .collect();
        let spk_in = Linear::new(&mut store, "dec.spk_in", cfg.speaker_dim, d, true, &mut rng);
        let spk_out = Linear::new(&mut store, "dec.spk_out", d, d, true, &mut rng);
        let cross_at = cfg.cross_attention_layers();
        let dec_blocks = (0..cfg.dec_layers)
            .map(|l| Block::new(&mut store, &format!("dec.block{l}"), &cfg, cross_at.contains(&l), &mut rng))
            .collect();
        let dec_ln = LayerNorm::new(&mut store, "dec.ln", d);

        let head = |store: &mut ParamStore, name: String, rng: &mut ChaCha8Rng| {
            let h = Linear::new(store, &name, d, vocab, true, rng);
            // small output weights start the model near the uniform distribution
            store.get_mut(h.weight).data_mut().iter_mut().for_each(|w| *w *= 0.1);
            h
        };
        let heads = if cfg.linear_heads {
            Heads::Linear((0..cfg.groups).map(|i| head(&mut store, format!("head{i}"), &mut rng)).collect())
        } else {
            let embed = (1..cfg.groups)
                .map(|i| Embedding::new(&mut store, &format!("sub.token{i}"), vocab, d, &mut rng))
                .collect();
            let blocks = (0..cfg.sub_layers)
                .map(|l| {
                    let n = format!("sub.block{l}");
                    (
                        LayerNorm::new(&mut store, &format!("{n}.ln_attn"), d),
                        MultiHeadAttention::new(&mut store, &format!("{n}.attn"), d, cfg.heads, &mut rng),
                        LayerNorm::new(&mut store, &format!("{n}.ln_ff"), d),
                        FeedForward::new(&mut store, &format!("{n}.ff"), d, cfg.ff_dim, &mut rng),
                    )
                })
                .collect();
            let ln_out = LayerNorm::new(&mut store, "sub.ln", d);
            let out = (0..cfg.groups).map(|i| head(&mut store, format!("sub.head{i}"), &mut rng)).collect();
            Heads::Sub {
                embed,
                blocks,
                ln_out,
                out,
            }
        };

        Ok(Self {
            cfg,
            store,
            phoneme_embed,
            enc_blocks,
            enc_ln,
            token_embed,
            spk_in,
            spk_out,
            dec_blocks,
            dec_ln,
            heads,
        })
    }

    pub fn from_parameters(cfg: TransformerConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut s = Self::new(cfg, 0)?;
        if tensors.len() != s.store.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                s.store.len(),
                tensors.len()
            )));
        }
        for (dst, src) in s.store.tensors_mut().iter_mut().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("from_parameters", dst.shape(), src.shape()));
            }
            *dst = src;
        }
        Ok(s)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Phoneme ids with the end-of-sequence symbol appended.
    pub fn encoder_input(&self, h: &PhonemeSequence) -> Result<Vec<usize>> {
        let mut ids = PhonemeSequence::new(h.ids().to_vec(), self.cfg.phonemes)?.ids;
        ids.push(self.cfg.eos());
        Ok(ids)
    }

    /// Bidirectional ALiBi encoder over `ids` (which include the end symbol).
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        let mut x = self.phoneme_embed.forward(tape, p, ids)?;
        let bias = alibi_bias(ids.len(), ids.len(), 0, self.cfg.heads, false)?;
        for b in &self.enc_blocks {
            let h = b.ln_attn.forward(tape, p, x)?;
            let (k, v) = b.attn.project_kv(tape, p, h)?;
            let (a, _) = b.attn.attend(tape, p, h, k, v, Some(&bias))?;
            x = tape.add(x, a)?;
            x = b.feed_forward(tape, p, x)?;
        }
        self.enc_ln.forward(tape, p, x)
    }

    pub fn encode_phonemes(&self, h: &PhonemeSequence) -> Result<EncodedText> {
        let ids = self.encoder_input(h)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let enc = self.encode_on_tape(&mut tape, &p, &ids)?;
        let (_, cross) = self.cross_block();
        let (k, v) = cross.project_kv(&mut tape, &p, enc)?;
        Ok(EncodedText {
            states: tape.value(enc).clone(),
            cross_k: tape.value(k).clone(),
            cross_v: tape.value(v).clone(),
        })
    }

    fn cross_block(&self) -> (&LayerNorm, &MultiHeadAttention) {
        let b = self.dec_blocks.last().expect("validated");
        let (ln, a) = b.cross.as_ref().expect("last decoder block has cross-attention");
        (ln, a)
    }

    /// Processed speaker vector, `[model_dim]`.
    pub fn speaker_on_tape(&self, tape: &mut Tape, p: &Bound, s: &[f64]) -> Result<Var> {
        if s.len() != self.cfg.speaker_dim {
            return Err(Error::shape("speaker", &[s.len()], &[self.cfg.speaker_dim]));
        }
        let sv = tape.constant(Tensor::new([1, s.len()], s.to_vec())?);
        let h = self.spk_in.forward(tape, p, sv)?;
        let h = tape.relu(h);
        let h = self.spk_out.forward(tape, p, h)?;
        tape.reshape(h, &[self.cfg.model_dim])
    }

    /// Decoder inputs: per position, the sum of the group token embeddings
    /// plus the processed speaker vector.
    pub fn decoder_inputs(&self, tape: &mut Tape, p: &Bound, frames: &[&[usize]], spk: Var) -> Result<Var> {
        let mut x: Option<Var> = None;
        for (i, emb) in self.token_embed.iter().enumerate() {
            let ids: Vec<usize> = frames.iter().map(|f| f[i]).collect();
            let e = emb.forward(tape, p, &ids)?;
            x = Some(match x {
                None => e,
                Some(a) => tape.add(a, e)?,
            });
        }
        tape.add_row(x.expect("groups > 0"), spk)
    }

    /// Teacher-forced decoder over all input positions. Returns `O` and the
    /// cross-attention logits `[positions, enc_len]`.
    pub fn decode_on_tape(&self, tape: &mut Tape, p: &Bound, x: Var, enc: Var) -> Result<(Var, Var)> {
        let len = tape.shape(x)[0];
        let bias = alibi_bias(len, len, 0, self.cfg.heads, true)?;
        let mut x = x;
        let mut cross_logits = None;
        for b in &self.dec_blocks {
            let h = b.ln_attn.forward(tape, p, x)?;
            let (k, v) = b.attn.project_kv(tape, p, h)?;
            let (a, _) = b.attn.attend(tape, p, h, k, v, Some(&bias))?;
            x = tape.add(x, a)?;
            if let Some((ln, cross)) = &b.cross {
                let h = ln.forward(tape, p, x)?;
                let (k, v) = cross.project_kv(tape, p, enc)?;
                let (a, logits) = cross.attend(tape, p, h, k, v, None)?;
                cross_logits = Some(logits[0]);
                x = tape.add(x, a)?;
            }
            x = b.feed_forward(tape, p, x)?;
        }
        let o = self.dec_ln.forward(tape, p, x)?;
        Ok((o, cross_logits.expect("one cross-attention layer")))
    }

    /// Logits of groups `0..=cond.len()` for every row of `o`; `cond[j]`
    /// holds the group-`j` tokens conditioning later groups.
    pub fn group_logits(&self, tape: &mut Tape, p: &Bound, o: Var, cond: &[Vec<usize>]) -> Result<Vec<Var>> {
        match &self.heads {
            Heads::Linear(hs) => hs[..=cond.len()].iter().map(|h| h.forward(tape, p, o)).collect(),
            Heads::Sub {
                embed,
                blocks,
                ln_out,
                out,
            } => {
                let rows = tape.shape(o)[0];
                let mut xs = vec![o];
                for (j, ids) in cond.iter().enumerate() {
                    xs.push(embed[j].forward(tape, p, ids)?);
                }
                let n = xs.len();
                for (ln_a, attn, ln_f, ff) in blocks {
                    let stacked = tape.concat_rows(&xs)?;
                    let h = ln_a.forward(tape, p, stacked)?;
                    let hs: Vec<Var> = (0..n).map(|j| tape.slice_rows(h, j * rows, rows)).collect::<Result<_>>()?;
                    let a = frame_causal_attention(tape, p, attn, &hs)?;
                    for (x, a) in xs.iter_mut().zip(a) {
                        *x = tape.add(*x, a)?;
                    }
                    let stacked = tape.concat_rows(&xs)?;
                    let h = ln_f.forward(tape, p, stacked)?;
                    let h = ff.forward(tape, p, h)?;
                    let y = tape.add(stacked, h)?;
                    xs = (0..n).map(|j| tape.slice_rows(y, j * rows, rows)).collect::<Result<_>>()?;
                }
                let stacked = tape.concat_rows(&xs)?;
                let y = ln_out.forward(tape, p, stacked)?;
                (0..n)
                    .map(|j| {
                        let yj = tape.slice_rows(y, j * rows, rows)?;
                        out[j].forward(tape, p, yj)
                    })
                    .collect()
            }
        }
    }

    /// Teacher-forced negative log-likelihood (summed over frames and groups,
    /// END included) of one utterance's token stream.
    pub fn stream_nll(
        &self,
        tape: &mut Tape,
        p: &Bound,
        phonemes: &PhonemeSequence,
        speaker: &[f64],
        stream: &TokenStream,
    ) -> Result<Var> {
        Ok(self.stream_terms(tape, p, phonemes, speaker, stream)?.0)
    }

    /// [`Self::stream_nll`] together with the cross-attention logits
    /// `[positions, enc_len]` of the same pass.
    pub fn stream_terms(
        &self,
        tape: &mut Tape,
        p: &Bound,
        phonemes: &PhonemeSequence,
        speaker: &[f64],
        stream: &TokenStream,
    ) -> Result<(Var, Var)> {
        let n = self.cfg.groups;
        if stream.groups() != n || stream.codebook_size() != self.cfg.codebook_size {
            return Err(Error::Input("token stream layout does not match the model".into()));
        }
        let ids = self.encoder_input(phonemes)?;
        let enc = self.encode_on_tape(tape, p, &ids)?;
        let spk = self.speaker_on_tape(tape, p, speaker)?;
        let len = stream.len();
        let inputs: Vec<&[usize]> = (0..len - 1).map(|t| stream.position(t)).collect();
        let x = self.decoder_inputs(tape, p, &inputs, spk)?;
        let (o, cross) = self.decode_on_tape(tape, p, x, enc)?;
        let targets: Vec<Vec<usize>> = (0..n).map(|i| stream.group(i)[1..].to_vec()).collect();
        let logits = self.group_logits(tape, p, o, &targets[..n - 1])?;
        let mut terms = Vec::with_capacity(n);
        for (l, tgt) in logits.into_iter().zip(&targets) {
            let lp = tape.log_softmax(l, 1)?;
            let picked = tape.pick_cols(lp, tgt)?;
            terms.push(tape.sum(picked));
        }
        let all = tape.concat_rows(&terms)?;
        let s = tape.sum(all);
        Ok((tape.scale(s, -1.0), cross))
    }

    /// Mean per-utterance NLL over `examples` (no gradient).
    pub fn evaluate_nll(&self, examples: &[TtsExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, false);
            let l = self.stream_nll(&mut tape, &p, &ex.phonemes, &ex.speaker, &encode_repetition(&ex.codes))?;
            total += tape.value(l).item();
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// One incremental decoder step on input frame tokens `tokens`.
    /// `window` restricts the cross-attention to encoder positions
    /// `[start, end)`.
    pub fn decoder_step(
        &self,
        tokens: &[usize],
        spk: &Tensor,
        enc: &EncodedText,
        state: &mut DecoderState,
        window: Option<(usize, usize)>,
    ) -> Result<StepOutput> {
        if tokens.len() != self.cfg.groups || tokens.iter().any(|&t| t >= self.cfg.vocab()) {
            return Err(Error::Input(format!("invalid decoder input frame {tokens:?}")));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let sv = tape.constant(spk.clone());
        let x0 = self.decoder_inputs(&mut tape, &p, &[tokens], sv)?;
        let pos = state.steps;
        let bias = alibi_bias(1, pos + 1, pos, self.cfg.heads, true)?;
        state.caches.resize(self.dec_blocks.len(), None);
        let mut x = x0;
        let mut cross = None;
        for (l, b) in self.dec_blocks.iter().enumerate() {
            let h = b.ln_attn.forward(&mut tape, &p, x)?;
            let (k_new, v_new) = b.attn.project_kv(&mut tape, &p, h)?;
            let (k_all, v_all) = match &state.caches[l] {
                None => (tape.value(k_new).clone(), tape.value(v_new).clone()),
                Some((k, v)) => (append_row(k, tape.value(k_new))?, append_row(v, tape.value(v_new))?),
            };
            let kv = tape.constant(k_all.clone());
            let vv = tape.constant(v_all.clone());
            state.caches[l] = Some((k_all, v_all));
            let (a, _) = b.attn.attend(&mut tape, &p, h, kv, vv, Some(&bias))?;
            x = tape.add(x, a)?;
            if let Some((ln, ca)) = &b.cross {
                let h = ln.forward(&mut tape, &p, x)?;
                let kv = tape.constant(enc.cross_k.clone());
                let vv = tape.constant(enc.cross_v.clone());
                let mask = window.map(|(s, e)| vec![window_mask(enc.len(), s, e)]);
                let (a, logits) = ca.attend(&mut tape, &p, h, kv, vv, mask.as_deref())?;
                cross = Some(logits[0]);
                x = tape.add(x, a)?;
            }
            x = b.feed_forward(&mut tape, &p, x)?;
        }
        state.steps += 1;
        let o = self.dec_ln.forward(&mut tape, &p, x)?;
        let logits = tape.value(cross.expect("cross layer")).data().to_vec();
        let cross_weights = softmax(&logits);
        Ok(StepOutput {
            output: tape.value(o).clone(),
            cross_logits: logits,
            cross_weights,
        })
    }

    /// Processed speaker vector as a tensor for [`Self::decoder_step`].
    pub fn speaker_vector(&self, s: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let v = self.speaker_on_tape(&mut tape, &p, s)?;
        Ok(tape.value(v).clone())
    }

    /// Distribution over the group-`prefix.len()` vocabulary given `O_t` and
    /// the tokens already chosen for earlier groups.
    pub fn group_distribution(&self, o: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.cfg.groups {
            return Err(Error::Input(format!("prefix of {} tokens for {} groups", prefix.len(), self.cfg.groups)));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let ov = tape.constant(o.clone());
        let cond: Vec<Vec<usize>> = prefix.iter().map(|&t| vec![t]).collect();
        let logits = self.group_logits(&mut tape, &p, ov, &cond)?;
        let l = logits[prefix.len()];
        Ok(softmax(tape.value(l).data()))
    }

    /// Start-of-stream input frame.
    pub fn start_frame(&self) -> Vec<usize> {
        vec![Token::Start.id(self.cfg.codebook_size); self.cfg.groups]
    }
}

fn append_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(row.data());
    Tensor::new([a.rows() + row.rows(), a.cols()], data)
}

/// Numerically stable softmax; `-inf` entries get exactly zero weight.
/// Weights `1 - exp(-(n/(N-1) - t/(T-1))^2 / (2 g^2))` that are small near
/// the diagonal of a `[T, N]` attention map.
pub fn diagonal_penalty(positions: usize, enc_len: usize, width: f64) -> Tensor {
    let frac = |i: usize, len: usize| if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
    let data = (0..positions)
        .flat_map(|t| (0..enc_len).map(move |n| (t, n)))
        .map(|(t, n)| {
            let d = frac(n, enc_len) - frac(t, positions);
            1.0 - (-d * d / (2.0 * width * width)).exp()
        })
        .collect();
    Tensor::new([positions, enc_len], data).expect("shape matches data")
}

/// Guided-attention penalty: attention mass placed away from the diagonal,
/// summed over decoder positions.
pub fn guided_attention_loss(tape: &mut Tape, cross_logits: Var, width: f64) -> Result<Var> {
    let shape = tape.shape(cross_logits).to_vec();
    let w = tape.softmax(cross_logits, 1)?;
    let pen = tape.constant(diagonal_penalty(shape[0], shape[1], width));
    let m = tape.mul(w, pen)?;
    Ok(tape.sum(m))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
