use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{guided_attention_loss, PhonemeSequence, Synthesizer};
use crate::codec::{encode_repetition, silence_prompt, DEFAULT_PROMPT_SIGMA};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::parallel;
use crate::quantizer::{CodeGrid, Quantizer};

/// One training utterance: phonemes, speaker vector and its code grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TtsExample {
    pub phonemes: PhonemeSequence,
    pub speaker: Vec<f64>,
    pub codes: CodeGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtsTrainConfig {
    pub steps: usize,
    /// Utterances per step.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Weight of the guided-attention penalty on the cross-attention map
    /// (0 disables it).
    pub guided_attention: f64,
    /// Width `g` of the guided-attention diagonal, in normalized units.
    pub guided_width: f64,
    /// Silence-prompt copies prepended to each training utterance (see
    /// [`prompted_examples`]); 0 trains on the plain utterances.
    pub prompt_variants: usize,
    pub prompt_sigma: f64,
}

impl Default for TtsTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            clip_norm: Some(1.0),
            seed: 0,
            guided_attention: 0.0,
            guided_width: 0.2,
            prompt_variants: 0,
            prompt_sigma: DEFAULT_PROMPT_SIGMA,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TtsTrainReport {
    /// Batch-mean per-utterance NLL per step.
    pub losses: Vec<f64>,
}

/// Copies of `examples` whose code grids start with a silence prompt, one
/// copy per prompt variant (each with its own noise seed). Training on these
/// matches what the decoder sees at synthesis time.
pub fn prompted_examples(q: &Quantizer, examples: &[TtsExample], cfg: &TtsTrainConfig) -> Result<Vec<TtsExample>> {
    if cfg.prompt_variants == 0 {
        return Ok(examples.to_vec());
    }
    let mut out = Vec::with_capacity(examples.len() * cfg.prompt_variants);
    for v in 0..cfg.prompt_variants {
        for (i, e) in examples.iter().enumerate() {
            let seed = cfg.seed.wrapping_add((v * examples.len() + i) as u64).wrapping_add(1 << 32);
            let prompt = silence_prompt(q, cfg.prompt_sigma, seed)?;
            out.push(TtsExample {
                codes: prompt.concat(&e.codes)?,
                ..e.clone()
            });
        }
    }
    Ok(out)
}

/// Teacher-forced maximum-likelihood training. Batches are drawn by cycling
/// through seeded shuffles of the corpus.
pub fn train_tts(model: &mut Synthesizer, examples: &[TtsExample], cfg: &TtsTrainConfig) -> Result<TtsTrainReport> {
    if examples.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let streams: Vec<_> = examples.iter().map(|e| encode_repetition(&e.codes)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-9,
            total_steps: cfg.steps,
            clip_norm: cfg.clip_norm,
        },
        model.params().tensors(),
    );
    let mut order: Vec<usize> = Vec::new();
    let mut report = TtsTrainReport::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(examples.len()) {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let m = &*model;
        let results = parallel::try_map(&batch, |&i| -> Result<(Vec<Tensor>, f64)> {
            let ex = &examples[i];
            let mut tape = Tape::new();
            let p = m.params().bind(&mut tape, true);
            let (nll, cross) = m.stream_terms(&mut tape, &p, &ex.phonemes, &ex.speaker, &streams[i])?;
            let l = if cfg.guided_attention > 0.0 {
                let g = guided_attention_loss(&mut tape, cross, cfg.guided_width)?;
                let g = tape.scale(g, cfg.guided_attention);
                tape.add(nll, g)?
            } else {
                nll
            };
            Ok((tape.grad(l, p.vars())?, tape.value(nll).item()))
        })?;
        let scale = 1.0 / results.len() as f64;
        let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (g, _) in &results {
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b * scale;
                }
            }
        }
        let loss = results.iter().map(|r| r.1).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite synthesizer loss at step {step}")));
        }
        report.losses.push(loss);
        adam.step(model.params_mut().tensors_mut(), &grads)?;
    }
    Ok(report)
}
