//! Stage one: a convolutional waveform encoder, a multi-codebook quantization
//! bottleneck and a speaker-conditioned convolutional decoder.

mod codes;
mod kmeans;
mod speaker;
mod train;

pub use codes::{assign_codes, assign_grid, lookup, slice_groups, straight_through, vq_loss, CodeGrid, CodebookSet};
pub use kmeans::{kmeans, quantization_error};
pub use speaker::{stub_speaker_embedder, SPEAKER_DIM};
pub use train::{train_quantizer, QuantizerTrainConfig, TrainReport, TrainingClip};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{log_mel_on_tape, MelConfig, MelSpectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::layers::{Conv1d, ConvTranspose1d, GroupNorm, Linear};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerConfig {
    /// Number of codebooks `N`.
    pub groups: usize,
    /// Codes per codebook `K`.
    pub codebook_size: usize,
    /// Latent width `d`; each group gets `d / N`.
    pub latent_dim: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub sample_rate: u32,
    /// Downsampling factor of each encoder stage; their product is the hop.
    pub strides: Vec<usize>,
    /// Channel width after each encoder stage (mirrored in the decoder).
    pub channels: Vec<usize>,
    pub base_channels: usize,
    pub speaker_dim: usize,
    /// Channels per group-normalization group.
    pub norm_channels: usize,
    pub mel: MelConfig,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            codebook_size: 160,
            latent_dim: 32,
            gamma: 0.25,
            lambda: 10.0,
            sample_rate: SAMPLE_RATE,
            strides: vec![4, 4, 4],
            channels: vec![32, 64, 64],
            base_channels: 16,
            speaker_dim: SPEAKER_DIM,
            norm_channels: 16,
            mel: MelConfig::reconstruction(SAMPLE_RATE),
        }
    }
}

impl QuantizerConfig {
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn group_dim(&self) -> usize {
        self.latent_dim / self.groups
    }

    /// Bits per frame, `N · log2 K`.
    pub fn bits_per_frame(&self) -> f64 {
        self.groups as f64 * (self.codebook_size as f64).log2()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.groups == 0 || !self.latent_dim.is_multiple_of(self.groups) {
            return bad(format!("latent_dim {} not divisible by N = {}", self.latent_dim, self.groups));
        }
        if self.codebook_size == 0 || self.codebook_size > u16::MAX as usize + 1 {
            return bad(format!("codebook size {} out of range", self.codebook_size));
        }
        if !(self.gamma > 0.0 && self.lambda > 0.0) {
            return bad("gamma and lambda must be positive".into());
        }
        if self.strides.is_empty() || self.strides.len() != self.channels.len() {
            return bad("strides and channels must be nonempty and the same length".into());
        }
        if self.strides.iter().any(|&s| s < 2 || s % 2 != 0) {
            return bad(format!("strides must be even, got {:?}", self.strides));
        }
        let widths = std::iter::once(self.base_channels).chain(self.channels.iter().copied());
        for c in widths {
            if self.norm_channels == 0 || c % self.norm_channels != 0 {
                return bad(format!("{c} channels not divisible into norm groups of {}", self.norm_channels));
            }
        }
        if self.speaker_dim == 0 {
            return bad("speaker_dim must be positive".into());
        }
        if self.mel.sample_rate != self.sample_rate {
            return bad("mel sample rate differs from quantizer sample rate".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    norm: GroupNorm,
}

impl ResBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, norm_channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, norm_channels),
        }
    }

    /// Residual branch is group-normalized before it is added to the skip.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.leaky_relu(x, LEAKY_SLOPE);
        let h = self.conv1.forward(tape, p, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(tape, p, h)?;
        let h = self.norm.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv1d,
    stages: Vec<(Conv1d, ResBlock)>,
    conv_out: Conv1d,
}

#[derive(Clone, Debug)]
struct Decoder {
    speaker_proj: Linear,
    conv_in: Conv1d,
    stages: Vec<(ConvTranspose1d, ResBlock)>,
    conv_out: Conv1d,
}

/// Output of [`Quantizer::forward_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub vq: Var,
    pub rec: Var,
    pub latents: Var,
}

#[derive(Clone, Debug)]
pub struct Quantizer {
    cfg: QuantizerConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    books: Vec<ParamId>,
    mel: MelSpectrogram,
}

impl Quantizer {
    pub fn new(cfg: QuantizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let nc = cfg.norm_channels;

        let conv_in = Conv1d::new(&mut store, "enc.conv_in", 1, cfg.base_channels, 7, 1, 3, &mut rng);
        let mut stages = Vec::new();
        let mut c_prev = cfg.base_channels;
        for (i, (&s, &c)) in cfg.strides.iter().zip(&cfg.channels).enumerate() {
            let down = Conv1d::new(&mut store, &format!("enc.down{i}"), c_prev, c, 2 * s, s, s / 2, &mut rng);
            let res = ResBlock::new(&mut store, &format!("enc.res{i}"), c, nc, &mut rng);
            stages.push((down, res));
            c_prev = c;
        }
        let conv_out = Conv1d::new(&mut store, "enc.conv_out", c_prev, cfg.latent_dim, 3, 1, 1, &mut rng);
        let encoder = Encoder {
            conv_in,
            stages,
            conv_out,
        };

        let gd = cfg.group_dim();
        let bound = 1.0 / cfg.codebook_size as f64;
        let books = (0..cfg.groups)
            .map(|i| store.add(format!("codebook{i}"), Tensor::uniform([cfg.codebook_size, gd], bound, &mut rng)))
            .collect();

        let speaker_proj = Linear::new(&mut store, "dec.speaker", cfg.speaker_dim, cfg.latent_dim, false, &mut rng);
        let top = *cfg.channels.last().expect("validated");
        let conv_in = Conv1d::new(&mut store, "dec.conv_in", cfg.latent_dim, top, 7, 1, 3, &mut rng);
        let outs: Vec<usize> = cfg
            .channels
            .iter()
            .rev()
            .skip(1)
            .copied()
            .chain(std::iter::once(cfg.base_channels))
            .collect();
        let mut stages = Vec::new();
        let mut c_prev = top;
        for (i, (&s, &c)) in cfg.strides.iter().rev().zip(&outs).enumerate() {
            let up = ConvTranspose1d::new(&mut store, &format!("dec.up{i}"), c_prev, c, 2 * s, s, s / 2, &mut rng);
            let res = ResBlock::new(&mut store, &format!("dec.res{i}"), c, nc, &mut rng);
            stages.push((up, res));
            c_prev = c;
        }
        let conv_out = Conv1d::new(&mut store, "dec.conv_out", c_prev, 1, 7, 1, 3, &mut rng);
        let decoder = Decoder {
            speaker_proj,
            conv_in,
            stages,
            conv_out,
        };

        let mel = MelSpectrogram::new(cfg.mel)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            books,
            mel,
        })
    }

    /// Rebuilds the model and replaces its parameters with `tensors`, which
    /// must match the declaration order and shapes.
    pub fn from_parameters(cfg: QuantizerConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut q = Self::new(cfg, 0)?;
        q.load_parameters(tensors)?;
        Ok(q)
    }

    pub fn load_parameters(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.store.len(),
                tensors.len()
            )));
        }
        for (dst, src) in self.store.tensors_mut().iter_mut().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("load_parameters", dst.shape(), src.shape()));
            }
            *dst = src;
        }
        Ok(())
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn hop(&self) -> usize {
        self.cfg.hop()
    }

    pub fn mel(&self) -> &MelSpectrogram {
        &self.mel
    }

    pub fn codebook_ids(&self) -> &[ParamId] {
        &self.books
    }

    pub fn codebooks(&self) -> Result<CodebookSet> {
        CodebookSet::new(self.books.iter().map(|&id| self.store.get(id).clone()).collect())
    }

    fn padded(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        let mut v = x.to_vec();
        v.resize(x.len().div_ceil(self.hop()) * self.hop(), 0.0);
        Ok(v)
    }

    /// Encoder on the tape: `[samples, 1]` (a multiple of the hop) to `[T, d]`.
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let e = &self.encoder;
        let mut h = e.conv_in.forward(tape, p, x)?;
        for (down, res) in &e.stages {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = down.forward(tape, p, h)?;
            h = res.forward(tape, p, h)?;
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        e.conv_out.forward(tape, p, h)
    }

    /// Decoder on the tape: `[T, d]` latents and a speaker vector to `[T·hop, 1]`.
    pub fn decode_on_tape(&self, tape: &mut Tape, p: &Bound, zq: Var, speaker: Var) -> Result<Var> {
        let d = &self.decoder;
        let s = d.speaker_proj.forward(tape, p, speaker)?;
        let s = tape.reshape(s, &[self.cfg.latent_dim])?;
        let mut h = tape.add_row(zq, s)?;
        h = d.conv_in.forward(tape, p, h)?;
        for (up, res) in &d.stages {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = up.forward(tape, p, h)?;
            h = res.forward(tape, p, h)?;
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        let y = d.conv_out.forward(tape, p, h)?;
        Ok(tape.tanh(y))
    }

    fn speaker_tensor(&self, speaker: &[f64]) -> Result<Tensor> {
        if speaker.len() != self.cfg.speaker_dim {
            return Err(Error::shape("speaker", &[speaker.len()], &[self.cfg.speaker_dim]));
        }
        Tensor::new([1, speaker.len()], speaker.to_vec())
    }

    /// `λ·L_VQ + L_rec` for one waveform. `codes` pins the code assignment
    /// (used to evaluate the same surrogate under finite differences);
    /// otherwise codes are assigned from the encoder output.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        wave: &[f64],
        speaker: &[f64],
        codes: Option<&CodeGrid>,
    ) -> Result<(LossVars, CodeGrid)> {
        let x = self.padded(wave)?;
        let len = x.len();
        let xv = tape.constant(Tensor::new([len, 1], x)?);
        let zc = self.encode_on_tape(tape, p, xv)?;
        let books = self.codebooks()?;
        let grid = match codes {
            Some(c) => c.clone(),
            None => assign_grid(tape.value(zc), &books)?,
        };
        let zq = straight_through(tape, zc, &books, &grid)?;
        let book_vars: Vec<Var> = self.books.iter().map(|&id| p.get(id)).collect();
        let vq = vq_loss(tape, zc, &book_vars, &grid, self.cfg.gamma)?;
        let sv = tape.constant(self.speaker_tensor(speaker)?);
        let y = self.decode_on_tape(tape, p, zq, sv)?;
        let rec = self.reconstruction_loss(tape, xv, y)?;
        let weighted = tape.scale(vq, self.cfg.lambda);
        let total = tape.add(weighted, rec)?;
        Ok((
            LossVars {
                total,
                vq,
                rec,
                latents: zc,
            },
            grid,
        ))
    }

    /// Mean absolute log-mel difference; `y` is cropped to the length of `x`.
    pub fn reconstruction_loss(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
        let n = tape.value(x).numel();
        let y = if tape.value(y).numel() > n { tape.slice_rows(y, 0, n)? } else { y };
        if tape.value(y).numel() != n {
            return Err(Error::shape("reconstruction_loss", tape.shape(x), tape.shape(y)));
        }
        let mx = log_mel_on_tape(tape, x, &self.mel);
        let my = log_mel_on_tape(tape, y, &self.mel);
        let diff = tape.sub(my, mx)?;
        let a = tape.abs(diff);
        Ok(tape.mean(a))
    }

    /// `λ·vq + L1(logmel(x), logmel(y))` with `y` cropped or zero-padded to `x`.
    pub fn total_loss(&self, x: &Waveform, y: &Waveform, vq: f64) -> Result<f64> {
        x.non_empty()?;
        let y = y.fit_to(x.len());
        Ok(self.cfg.lambda * vq + self.log_mel_l1(&x.samples, &y.samples)?)
    }

    pub fn log_mel_l1(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let a = self.mel.log_mel(x)?;
        let b = self.mel.log_mel(y)?;
        if a.shape() != b.shape() {
            return Err(Error::shape("log_mel_l1", a.shape(), b.shape()));
        }
        Ok(a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).sum::<f64>() / a.numel() as f64)
    }

    /// Continuous latents `z^c`, `[ceil(samples / hop), d]`.
    pub fn encode(&self, wave: &Waveform) -> Result<Tensor> {
        let x = self.padded(&wave.samples)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(Tensor::new([x.len(), 1], x)?);
        let z = self.encode_on_tape(&mut tape, &p, xv)?;
        let z = tape.value(z).clone();
        if !z.is_finite() {
            return Err(Error::Numeric("encoder produced non-finite latents".into()));
        }
        Ok(z)
    }

    pub fn quantize(&self, wave: &Waveform) -> Result<CodeGrid> {
        assign_grid(&self.encode(wave)?, &self.codebooks()?)
    }

    /// Waveform of exactly `T · hop` samples.
    pub fn decode(&self, codes: &CodeGrid, speaker: &[f64]) -> Result<Waveform> {
        if codes.groups() != self.cfg.groups || codes.codebook_size() != self.cfg.codebook_size {
            return Err(Error::Input(format!(
                "code grid has N={} K={}, quantizer expects N={} K={}",
                codes.groups(),
                codes.codebook_size(),
                self.cfg.groups,
                self.cfg.codebook_size
            )));
        }
        let zq = lookup(codes, &self.codebooks()?)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let zv = tape.constant(zq);
        let sv = tape.constant(self.speaker_tensor(speaker)?);
        let y = self.decode_on_tape(&mut tape, &p, zv, sv)?;
        Ok(Waveform::new(tape.value(y).data().to_vec(), self.cfg.sample_rate))
    }

    /// `decode(quantize(x))` cropped to the input length.
    pub fn reconstruct(&self, wave: &Waveform, speaker: &[f64]) -> Result<Waveform> {
        let y = self.decode(&self.quantize(wave)?, speaker)?;
        Ok(y.fit_to(wave.len()))
    }

    /// Log-mel L1 between `x` and its reconstruction.
    pub fn reconstruction_error(&self, wave: &Waveform, speaker: &[f64]) -> Result<f64> {
        let y = self.reconstruct(wave, speaker)?;
        self.log_mel_l1(&wave.samples, &y.samples)
    }
}

#[cfg(test)]
mod tests;
