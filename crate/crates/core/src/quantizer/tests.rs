use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{check_gradients, Coords};

pub(crate) fn tiny_config() -> QuantizerConfig {
    QuantizerConfig {
        groups: 2,
        codebook_size: 3,
        latent_dim: 4,
        strides: vec![2, 2],
        channels: vec![4, 4],
        base_channels: 4,
        speaker_dim: 3,
        norm_channels: 2,
        mel: MelConfig {
            sample_rate: SAMPLE_RATE,
            n_fft: 16,
            hop: 4,
            n_mels: 5,
            fmin: 0.0,
            fmax: 8000.0,
            // a milder floor keeps curvature low enough for central differences
            log_floor: 1e-3,
        },
        ..QuantizerConfig::default()
    }
}

fn small_config() -> QuantizerConfig {
    QuantizerConfig {
        codebook_size: 16,
        channels: vec![8, 16, 16],
        base_channels: 8,
        norm_channels: 8,
        ..QuantizerConfig::default()
    }
}

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn([len], 0.3, &mut rng).into_vec()
}

fn sine(len: usize, f: f64) -> Waveform {
    Waveform::new(
        (0..len).map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()).collect(),
        SAMPLE_RATE,
    )
}

#[test]
fn encode_shapes() {
    let q = Quantizer::new(QuantizerConfig::default(), 0).unwrap();
    let z = q.encode(&Waveform::new(vec![0.0; 4 * 64], SAMPLE_RATE)).unwrap();
    assert_eq!(z.shape(), [4, 32]);
    assert!(z.is_finite());
    assert_eq!(q.encode(&Waveform::new(vec![0.1; 64], SAMPLE_RATE)).unwrap().shape(), [1, 32]);
    let z = q.encode(&Waveform::new(noise(1000, 1), SAMPLE_RATE)).unwrap();
    assert_eq!(z.shape(), [16, 32]);
    assert!(matches!(q.encode(&Waveform::new(vec![], SAMPLE_RATE)), Err(Error::Input(_))));
}

#[test]
fn config_validation() {
    let bad = QuantizerConfig {
        latent_dim: 30,
        ..QuantizerConfig::default()
    };
    assert!(matches!(Quantizer::new(bad, 0), Err(Error::Config(_))));
    let bad = QuantizerConfig {
        gamma: 0.0,
        ..QuantizerConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    assert_eq!(QuantizerConfig::default().hop(), 64);
}

#[test]
fn codebooks_start_in_init_range() {
    let q = Quantizer::new(QuantizerConfig::default(), 3).unwrap();
    let books = q.codebooks().unwrap();
    assert_eq!((books.groups(), books.size(), books.group_dim()), (4, 160, 8));
    for i in 0..4 {
        assert!(books.book(i).data().iter().all(|x| x.abs() <= 1.0 / 160.0));
    }
}

#[test]
fn decode_length_and_speaker_conditioning() {
    let q = Quantizer::new(small_config(), 0).unwrap();
    let codes = CodeGrid::new(5, 4, 16, (0..20).map(|i| i % 16).collect()).unwrap();
    let a = stub_speaker_embedder(&sine(4000, 220.0)).unwrap();
    let b = stub_speaker_embedder(&sine(4000, 440.0)).unwrap();
    let ya = q.decode(&codes, &a).unwrap();
    let yb = q.decode(&codes, &b).unwrap();
    assert_eq!(ya.len(), 5 * 64);
    assert!(ya.samples.iter().zip(&yb.samples).any(|(x, y)| (x - y).abs() > 1e-9));

    let wrong = CodeGrid::new(2, 4, 17, vec![16; 8]).unwrap();
    assert!(matches!(q.decode(&wrong, &a), Err(Error::Input(_))));
}

#[test]
fn total_loss_examples() {
    let q = Quantizer::new(small_config(), 0).unwrap();
    let x = sine(1024, 300.0);
    assert_eq!(q.total_loss(&x, &x, 0.0).unwrap(), 0.0);
    let y = sine(1000, 310.0);
    let base = q.total_loss(&x, &y, 0.0).unwrap();
    let with = q.total_loss(&x, &y, 1.0).unwrap();
    assert!((with - base - 10.0).abs() < 1e-12);
}

#[test]
fn straight_through_gradient_equals_quantized_gradient() {
    let q = Quantizer::new(tiny_config(), 5).unwrap();
    let mut tape = Tape::new();
    let p = q.params().bind(&mut tape, true);
    let xv = tape.constant(Tensor::new([16, 1], noise(16, 2)).unwrap());
    let zc = q.encode_on_tape(&mut tape, &p, xv).unwrap();
    let books = q.codebooks().unwrap();
    let grid = assign_grid(tape.value(zc), &books).unwrap();
    let zq = straight_through(&mut tape, zc, &books, &grid).unwrap();
    let s = tape.constant(Tensor::new([1, 3], vec![0.2, -0.4, 0.1]).unwrap());
    let y = q.decode_on_tape(&mut tape, &p, zq, s).unwrap();
    let loss = q.reconstruction_loss(&mut tape, xv, y).unwrap();
    let book_vars: Vec<Var> = q.codebook_ids().iter().map(|&id| p.get(id)).collect();
    let mut leaves = vec![zc, zq];
    leaves.extend(&book_vars);
    let g = tape.grad(loss, &leaves).unwrap();
    assert_eq!(g[0].data(), g[1].data());
    assert!(g[0].sq_norm() > 0.0);
    // the reconstruction path never reaches the codebooks
    for gb in &g[2..] {
        assert!(gb.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn full_loss_matches_finite_differences() {
    let q = Quantizer::new(tiny_config(), 11).unwrap();
    let wave = noise(16, 7);
    let speaker = [0.3, -0.2, 0.5];
    let mut tape = Tape::new();
    let p = q.params().bind(&mut tape, true);
    let (_, grid) = q.forward_loss(&mut tape, &p, &wave, &speaker, None).unwrap();
    let report = check_gradients(
        |t, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(q.forward_loss(t, &p, &wave, &speaker, Some(&grid))?.0.total)
        },
        q.params().tensors(),
        Coords::All,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.checked, q.params().num_scalars());
}

#[test]
fn kmeans_error_non_increasing_in_k() {
    let q = Quantizer::new(small_config(), 1).unwrap();
    let z = q.encode(&Waveform::new(noise(64 * 60, 3), SAMPLE_RATE)).unwrap();
    let (t, d) = z.dims2().unwrap();
    let mut prev = f64::INFINITY;
    let mut centroids = Tensor::new([1, d], z.row(0).to_vec()).unwrap();
    for k in [1usize, 2, 4, 8, 16] {
        if k > centroids.rows() {
            // nested initialization: previous centroids plus fresh data rows
            let mut data = centroids.data().to_vec();
            for j in centroids.rows()..k {
                data.extend_from_slice(z.row((j * 7) % t));
            }
            centroids = Tensor::new([k, d], data).unwrap();
        }
        centroids = kmeans(&z, &centroids, 10).unwrap();
        let err = quantization_error(&z, &centroids).unwrap();
        assert!(err <= prev + 1e-12, "K={k}: {err} > {prev}");
        prev = err;
    }
}

#[test]
fn training_reduces_loss_on_sine_corpus() {
    let mut q = Quantizer::new(small_config(), 2).unwrap();
    let clips: Vec<TrainingClip> = [220.0, 330.0, 440.0]
        .iter()
        .map(|&f| {
            let wave = sine(64 * 40, f);
            let speaker = stub_speaker_embedder(&wave).unwrap();
            TrainingClip { wave, speaker }
        })
        .collect();
    let cfg = QuantizerTrainConfig {
        steps: 200,
        batch_size: 2,
        segment_frames: 16,
        lr: 2e-3,
        ..QuantizerTrainConfig::default()
    };
    let report = train_quantizer(&mut q, &clips, &cfg).unwrap();
    let head: f64 = report.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = report.losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "loss went from {head} to {tail}");
    assert!(report.reseeded > 0);
}

#[test]
fn training_is_deterministic() {
    let clips = vec![TrainingClip {
        wave: sine(64 * 8, 200.0),
        speaker: vec![0.0; SPEAKER_DIM],
    }];
    let cfg = QuantizerTrainConfig {
        steps: 3,
        batch_size: 2,
        segment_frames: 4,
        ..QuantizerTrainConfig::default()
    };
    let run = || {
        let mut q = Quantizer::new(small_config(), 4).unwrap();
        let r = train_quantizer(&mut q, &clips, &cfg).unwrap();
        (q.params().fingerprint(), r.losses)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decode_length_is_frames_times_hop(t in 1usize..6, seed in 0u64..100) {
        let q = Quantizer::new(tiny_config(), seed).unwrap();
        let codes = CodeGrid::new(t, 2, 3, (0..2 * t).map(|i| (i + seed as usize) % 3).collect()).unwrap();
        let y = q.decode(&codes, &[0.1, 0.2, 0.3]).unwrap();
        prop_assert_eq!(y.len(), t * 4);
    }
}
