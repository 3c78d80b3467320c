use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CodeGrid, Quantizer};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::parallel;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingClip {
    pub wave: Waveform,
    pub speaker: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Length of each random training crop, in frames.
    pub segment_frames: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Re-seed codes left unused for a full epoch from random encoder outputs.
    pub reseed_dead_codes: bool,
}

impl Default for QuantizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            segment_frames: 32,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            clip_norm: Some(10.0),
            seed: 0,
            reseed_dead_codes: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Batch-mean total loss per step.
    pub losses: Vec<f64>,
    pub vq_losses: Vec<f64>,
    pub rec_losses: Vec<f64>,
    /// Number of codebook rows re-seeded over the run.
    pub reseeded: usize,
}

struct ItemResult {
    grads: Vec<Tensor>,
    total: f64,
    vq: f64,
    rec: f64,
    codes: CodeGrid,
    latents: Tensor,
}

/// Trains all quantizer parameters with Adam on random hop-aligned crops.
/// The per-crop gradients are computed in parallel and summed in crop order.
pub fn train_quantizer(q: &mut Quantizer, clips: &[TrainingClip], cfg: &QuantizerTrainConfig) -> Result<TrainReport> {
    if clips.is_empty() {
        return Err(Error::Input("no training clips".into()));
    }
    if cfg.batch_size == 0 || cfg.segment_frames == 0 {
        return Err(Error::Config("batch_size and segment_frames must be positive".into()));
    }
    for c in clips {
        c.wave.non_empty()?;
    }
    let hop = q.hop();
    let (groups, k) = (q.config().groups, q.config().codebook_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            total_steps: cfg.steps,
            clip_norm: cfg.clip_norm,
        },
        q.params().tensors(),
    );
    let total_frames: usize = clips.iter().map(|c| c.wave.num_frames(hop)).sum();
    let steps_per_epoch = (total_frames / (cfg.batch_size * cfg.segment_frames)).max(1);
    let mut used = vec![false; groups * k];
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        let crops: Vec<(usize, usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let ci = rng.random_range(0..clips.len());
                let frames = clips[ci].wave.num_frames(hop);
                let len = cfg.segment_frames.min(frames);
                let start = rng.random_range(0..=frames - len);
                (ci, start * hop, len * hop)
            })
            .collect();
        let model = &*q;
        let items = parallel::try_map(&crops, |&(ci, start, len)| -> Result<ItemResult> {
            let clip = &clips[ci];
            let end = (start + len).min(clip.wave.len());
            let mut seg = clip.wave.samples[start..end].to_vec();
            seg.resize(len, 0.0);
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape, true);
            let (lv, codes) = model.forward_loss(&mut tape, &p, &seg, &clip.speaker, None)?;
            let grads = tape.grad(lv.total, p.vars())?;
            Ok(ItemResult {
                grads,
                total: tape.value(lv.total).item(),
                vq: tape.value(lv.vq).item(),
                rec: tape.value(lv.rec).item(),
                codes,
                latents: tape.value(lv.latents).clone(),
            })
        })?;

        let scale = 1.0 / items.len() as f64;
        let mut grads: Vec<Tensor> = q.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for it in &items {
            for (acc, g) in grads.iter_mut().zip(&it.grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b * scale;
                }
            }
            for t in 0..it.codes.frames() {
                for (i, &c) in it.codes.frame(t).iter().enumerate() {
                    used[i * k + c] = true;
                }
            }
        }
        let loss = items.iter().map(|i| i.total).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite quantizer loss at step {step}")));
        }
        report.losses.push(loss);
        report.vq_losses.push(items.iter().map(|i| i.vq).sum::<f64>() * scale);
        report.rec_losses.push(items.iter().map(|i| i.rec).sum::<f64>() * scale);
        adam.step(q.params_mut().tensors_mut(), &grads)?;

        if cfg.reseed_dead_codes && (step + 1) % steps_per_epoch == 0 && step + 1 < cfg.steps {
            report.reseeded += reseed(q, &used, &items, &mut rng);
            used.iter_mut().for_each(|u| *u = false);
        }
    }
    Ok(report)
}

fn reseed(q: &mut Quantizer, used: &[bool], items: &[ItemResult], rng: &mut ChaCha8Rng) -> usize {
    let (k, gd) = (q.config().codebook_size, q.config().group_dim());
    let ids = q.codebook_ids().to_vec();
    let mut count = 0;
    for (i, &id) in ids.iter().enumerate() {
        let book = q.params_mut().get_mut(id).data_mut();
        for c in 0..k {
            if used[i * k + c] {
                continue;
            }
            let it = &items[rng.random_range(0..items.len())];
            let row = it.latents.row(rng.random_range(0..it.latents.rows()));
            book[c * gd..(c + 1) * gd].copy_from_slice(&row[i * gd..(i + 1) * gd]);
            count += 1;
        }
    }
    count
}
