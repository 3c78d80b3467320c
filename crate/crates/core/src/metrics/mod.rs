//! Evaluation metrics: MCD over DTW-aligned mel cepstra, Fréchet distance of
//! speaker embeddings, cosine speaker similarity, WADA-SNR and a pitch tracker.

mod dtw;
mod frechet;
mod pitch;
mod wada;

pub use dtw::{dtw, mcd, mcep, DtwResult, MCEP_ORDER};
pub use frechet::{frechet_distance, DEFAULT_FRECHET_SCALE};
pub use pitch::{pitch_contour, PitchConfig};
pub use wada::wada_snr;

use crate::error::{Error, Result};

/// Cosine similarity of two speaker embeddings, clamped to [-1, 1].
pub fn speaker_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("speaker_similarity", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("speaker similarity of a zero embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
