use crate::audio::{dct_ii, MelConfig, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mel-cepstral coefficients kept per frame (the energy term is dropped).
pub const MCEP_ORDER: usize = 23;

#[derive(Clone, Debug, PartialEq)]
pub struct DtwResult {
    /// Sum of frame distances along the path.
    pub total: f64,
    /// `total / path.len()`.
    pub mean: f64,
    pub path: Vec<(usize, usize)>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dynamic time warping with unit-weight diagonal, horizontal and vertical
/// steps over Euclidean frame distances. Among minimal-cost paths the
/// shortest is chosen, which keeps the result symmetric in its arguments.
pub fn dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DtwResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("dtw needs two nonempty sequences".into()));
    }
    if a.iter().chain(b).any(|v| v.len() != a[0].len()) {
        return Err(Error::Input("dtw frames must share one dimension".into()));
    }
    let (n, m) = (a.len(), b.len());
    // (cost, path length) compared lexicographically
    let mut acc = vec![(f64::INFINITY, usize::MAX); n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = euclid(&a[i], &b[j]);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut cands = Vec::with_capacity(3);
                if i > 0 && j > 0 {
                    cands.push(acc[at(i - 1, j - 1)]);
                }
                if i > 0 {
                    cands.push(acc[at(i - 1, j)]);
                }
                if j > 0 {
                    cands.push(acc[at(i, j - 1)]);
                }
                cands
                    .into_iter()
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .expect("one predecessor")
            };
            acc[at(i, j)] = (best.0 + d, best.1 + 1);
        }
    }
    let (total, len) = acc[at(n - 1, m - 1)];
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let here = acc[at(i, j)];
        let d = euclid(&a[i], &b[j]);
        let mut preds = Vec::with_capacity(3);
        if i > 0 && j > 0 {
            preds.push((i - 1, j - 1));
        }
        if i > 0 {
            preds.push((i - 1, j));
        }
        if j > 0 {
            preds.push((i, j - 1));
        }
        let (pi, pj) = preds
            .into_iter()
            .find(|&(pi, pj)| {
                let p = acc[at(pi, pj)];
                p.1 + 1 == here.1 && p.0 + d == here.0
            })
            .expect("a predecessor reproduces the accumulated cost");
        path.push((pi, pj));
        i = pi;
        j = pj;
    }
    path.reverse();
    debug_assert_eq!(path.len(), len);
    Ok(DtwResult {
        total,
        mean: total / len as f64,
        path,
    })
}

/// 23 mel-cepstral coefficients per frame: orthonormal DCT-II of a 40-band
/// log-mel spectrum, coefficients 1 through 23.
pub fn mcep(wave: &Waveform) -> Result<Vec<Vec<f64>>> {
    wave.non_empty()?;
    let cfg = MelConfig::cepstral(wave.sample_rate);
    let logmel = MelSpectrogram::new(cfg)?.log_mel(&wave.samples)?;
    let basis = dct_ii(cfg.n_mels, MCEP_ORDER + 1);
    Ok(mcep_from_log_mel(&logmel, &basis))
}

pub(crate) fn mcep_from_log_mel(logmel: &Tensor, basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..logmel.rows())
        .map(|f| {
            let row = logmel.row(f);
            basis[1..].iter().map(|b| b.iter().zip(row).map(|(w, x)| w * x).sum()).collect()
        })
        .collect()
}

/// Mean Euclidean distance between DTW-aligned MCEP frames.
pub fn mcd(reference: &Waveform, synthesized: &Waveform) -> Result<f64> {
    Ok(dtw(&mcep(reference)?, &mcep(synthesized)?)?.mean)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn seq(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    /// Minimal total cost over every monotone path, by exhaustive recursion.
    fn brute(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let d = euclid(&a[i], &b[j]);
        if i == 0 && j == 0 {
            return d;
        }
        let mut best = f64::INFINITY;
        if i > 0 && j > 0 {
            best = best.min(brute(a, b, i - 1, j - 1));
        }
        if i > 0 {
            best = best.min(brute(a, b, i - 1, j));
        }
        if j > 0 {
            best = best.min(brute(a, b, i, j - 1));
        }
        best + d
    }

    #[test]
    fn dtw_examples() {
        let a = seq(&[0.0, 1.0, 2.0]);
        let r = dtw(&a, &a).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(dtw(&seq(&[3.0]), &seq(&[3.0, 3.0, 3.0])).unwrap().total, 0.0);
        let r = dtw(&a, &seq(&[0.0, 2.0])).unwrap();
        assert_eq!(r.total, brute(&a, &seq(&[0.0, 2.0]), 2, 1));
        assert_eq!(r.total, 1.0);
        assert_eq!(r.mean, 1.0 / 3.0);
        assert!(matches!(dtw(&[], &a), Err(Error::Input(_))));
    }

    fn sine(len: usize, f: f64, amp: f64) -> Waveform {
        Waveform::new(
            (0..len).map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()).collect(),
            16000,
        )
    }

    #[test]
    fn mcd_identity_symmetry_and_scaling() {
        let a = sine(1600, 300.0, 0.3);
        let b = sine(1600, 700.0, 0.3);
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
        let ab = mcd(&a, &b).unwrap();
        assert_eq!(ab, mcd(&b, &a).unwrap());
        assert!(ab > 0.0);
        assert_eq!(mcep(&a).unwrap()[0].len(), MCEP_ORDER);
    }

    #[test]
    fn mcd_matches_brute_force_pipeline_on_two_frames() {
        // 80 samples at hop 80 give exactly two centered frames
        let x = sine(80, 500.0, 0.3);
        let y = sine(80, 500.0, 0.6);
        let cfg = MelConfig::cepstral(16000);
        assert_eq!(cfg.hop, 80);
        let fb = crate::audio::mel_filterbank(16000, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax);
        let win = crate::audio::hann_window(cfg.n_fft);
        // direct DFT, explicit DCT-II
        let ceps = |s: &[f64]| -> Vec<Vec<f64>> {
            (0..2)
                .map(|f| {
                    let frame: Vec<f64> = (0..cfg.n_fft)
                        .map(|i| {
                            let t = (f * cfg.hop + i) as isize - (cfg.n_fft / 2) as isize;
                            if t >= 0 && (t as usize) < s.len() { s[t as usize] * win[i] } else { 0.0 }
                        })
                        .collect();
                    let power: Vec<f64> = (0..=cfg.n_fft / 2)
                        .map(|k| {
                            let (mut re, mut im) = (0.0, 0.0);
                            for (n, v) in frame.iter().enumerate() {
                                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.n_fft as f64;
                                re += v * ang.cos();
                                im += v * ang.sin();
                            }
                            re * re + im * im
                        })
                        .collect();
                    let lm: Vec<f64> = fb
                        .iter()
                        .map(|w| (w.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>() + cfg.log_floor).ln())
                        .collect();
                    let m = lm.len() as f64;
                    (1..=MCEP_ORDER)
                        .map(|q| {
                            (2.0 / m).sqrt()
                                * lm.iter()
                                    .enumerate()
                                    .map(|(n, v)| v * (std::f64::consts::PI * q as f64 * (n as f64 + 0.5) / m).cos())
                                    .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let (cx, cy) = (ceps(&x.samples), ceps(&y.samples));
        let expect = dtw(&cx, &cy).unwrap().mean;
        assert!((mcd(&x, &y).unwrap() - expect).abs() < 1e-9);
        // amplitude doubling shifts log-mel by ln 4 in every band, which the
        // DCT puts into the excluded coefficient 0 only (up to the floor)
        assert!(expect < 0.05, "{expect}");
    }

    proptest! {
        #[test]
        fn dtw_symmetric_and_nonnegative(
            a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..8),
            b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..8),
        ) {
            let ab = dtw(&a, &b).unwrap();
            let ba = dtw(&b, &a).unwrap();
            prop_assert_eq!(ab.total, ba.total);
            prop_assert_eq!(ab.mean, ba.mean);
            prop_assert!(ab.total >= 0.0);
            prop_assert!((ab.total - brute(&a, &b, a.len() - 1, b.len() - 1)).abs() < 1e-9);
            for w in ab.path.windows(2) {
                let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(di <= 1 && dj <= 1 && di + dj >= 1);
            }
        }

        #[test]
        fn dtw_zero_on_repetition_expansion(a in prop::collection::vec(-3.0f64..3.0, 1..6), reps in prop::collection::vec(1usize..4, 6)) {
            let expanded: Vec<f64> = a.iter().zip(&reps).flat_map(|(&x, &r)| std::iter::repeat_n(x, r)).collect();
            prop_assert_eq!(dtw(&seq(&a), &seq(&expanded)).unwrap().total, 0.0);
        }
    }
}
