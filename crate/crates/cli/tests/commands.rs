use std::fs;
use std::path::Path;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use codetts::audio::Waveform;
use codetts::Error;
use codetts_cli::commands::{evaluate, evaluate_cmd, gen_corpus, load_corpus, wav_path, MANIFEST, WAV_DIR};
use codetts_cli::config::RunConfig;
use codetts_cli::wav::write_wav;
use codetts_cli::{exit_code, EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_TRUNCATED};

fn small_corpus(dir: &Path) {
    let cfg = RunConfig::load(None, &["corpus.utterances=3".into()], Some(1)).unwrap();
    gen_corpus(&cfg, dir).unwrap();
}

/// Copy of `src` with white noise of standard deviation `sigma` added.
fn noisy_copy(src: &Path, dst: &Path, sigma: f64) {
    fs::create_dir_all(dst.join(WAV_DIR)).unwrap();
    fs::copy(src.join(MANIFEST), dst.join(MANIFEST)).unwrap();
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for it in load_corpus(src).unwrap() {
        let samples = it.wave.samples.iter().map(|s| s + normal.sample(&mut rng)).collect();
        write_wav(&wav_path(dst, &it.entry.id), &Waveform::new(samples, it.wave.sample_rate)).unwrap();
    }
}

#[test]
fn self_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let items = load_corpus(dir.path()).unwrap();
    let r = evaluate(&items, &load_corpus(dir.path()).unwrap()).unwrap();
    assert_eq!(r.pairs.len(), 3);
    for p in &r.pairs {
        assert_eq!(p.mcd, 0.0);
        assert!((p.sss - 1.0).abs() < 1e-12);
    }
    assert_eq!(r.frechet, Some(0.0));

    let text = evaluate_cmd(dir.path(), dir.path(), &dir.path().join("eval.tsv")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3);
}

#[test]
fn added_noise_raises_mcd_and_lowers_snr() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, light, heavy) = (dir.path().join("c"), dir.path().join("l"), dir.path().join("h"));
    small_corpus(&clean);
    noisy_copy(&clean, &light, 0.01);
    noisy_copy(&clean, &heavy, 0.1);
    let reference = load_corpus(&clean).unwrap();
    let base = evaluate(&reference, &load_corpus(&clean).unwrap()).unwrap();
    let l = evaluate(&reference, &load_corpus(&light).unwrap()).unwrap();
    let h = evaluate(&reference, &load_corpus(&heavy).unwrap()).unwrap();
    for ((b, l), h) in base.pairs.iter().zip(&l.pairs).zip(&h.pairs) {
        assert!(b.mcd < l.mcd && l.mcd < h.mcd, "{} {} {}", b.mcd, l.mcd, h.mcd);
        assert!(b.snr > l.snr && l.snr > h.snr, "{} {} {}", b.snr, l.snr, h.snr);
    }
}

#[test]
fn unpaired_manifests_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small_corpus(&a);
    noisy_copy(&a, &b, 0.01);
    let manifest = fs::read_to_string(b.join(MANIFEST)).unwrap();
    let kept: Vec<&str> = manifest.lines().take(3).collect();
    fs::write(b.join(MANIFEST), kept.join("\n") + "\n").unwrap();
    let err = evaluate(&load_corpus(&a).unwrap(), &load_corpus(&b).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
    assert_eq!(exit_code(&err), EXIT_IO);
}

fn run(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_codetts")).current_dir(dir).args(args).output().unwrap();
    out.status.code().expect("exit code")
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["--config", "missing.conf", "gen-corpus", "--out", "x"]), EXIT_IO);
    assert_eq!(run(d, &["--set", "nosuch.key=1", "gen-corpus", "--out", "x"]), EXIT_CONFIG);
    assert_eq!(run(d, &["--set", "corpus.utterances=0", "gen-corpus", "--out", "x"]), EXIT_CONFIG);
    assert_eq!(
        run(d, &["synthesize", "--quantizer", "q", "--model", "m", "--phonemes", "ab", "--speaker-ref", "r.wav", "--out", "o.wav"]),
        EXIT_CONFIG
    );

    let tiny = [
        "--set", "corpus.utterances=2",
        "--set", "quantizer.codebook_size=8",
        "--set", "transformer.codebook_size=8",
        "--set", "transformer.model_dim=16",
        "--set", "transformer.ff_dim=16",
        "--set", "quantizer_train.steps=2",
        "--set", "tts_train.steps=2",
        "--set", "synthesis.max_frames=1",
    ];
    let with = |rest: &[&str]| -> Vec<String> { tiny.iter().chain(rest).map(|s| s.to_string()).collect() };
    let call = |rest: &[&str]| {
        let args = with(rest);
        run(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(call(&["gen-corpus", "--out", "c"]), EXIT_OK);
    assert_eq!(call(&["train-quantizer", "--corpus", "c", "--out", "q"]), EXIT_OK);
    assert_eq!(call(&["train-tts", "--corpus", "c", "--quantizer", "q", "--out", "m"]), EXIT_OK);
    // one frame is always generated, so a one-frame budget always truncates
    assert_eq!(
        call(&["synthesize", "--quantizer", "q", "--model", "m", "--phonemes", "abc", "--speaker-ref", "c/wav/utt0000.wav", "--out", "o.wav"]),
        EXIT_TRUNCATED
    );
    assert!(d.join("o.wav").is_file() && d.join("o.diag.tsv").is_file());
    // a corrupted checkpoint is a malformed file
    let mut bytes = fs::read(d.join("m")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(d.join("m"), bytes).unwrap();
    assert_eq!(
        call(&["synthesize", "--quantizer", "q", "--model", "m", "--phonemes", "abc", "--speaker-ref", "c/wav/utt0000.wav", "--out", "p.wav"]),
        EXIT_IO
    );
}

#[test]
fn snr_sweep_table_has_one_row_per_sigma_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sets = [
        "corpus.utterances=2",
        "quantizer.codebook_size=8",
        "transformer.codebook_size=8",
        "transformer.model_dim=16",
        "transformer.ff_dim=16",
        "quantizer_train.steps=5",
        "tts_train.steps=5",
        "synthesis.max_frames=20",
    ];
    let cfg = RunConfig::load(None, &sets.iter().map(|s| s.to_string()).collect::<Vec<_>>(), Some(2)).unwrap();
    let (c, q, m) = (d.join("c"), d.join("q"), d.join("m"));
    gen_corpus(&cfg, &c).unwrap();
    codetts_cli::commands::train_quantizer_cmd(&cfg, &c, &q).unwrap();
    codetts_cli::commands::train_tts_cmd(&cfg, &c, &q, &m).unwrap();
    let models = codetts_cli::commands::load_models(&q, &m).unwrap();
    let sigmas = [0.0, 1e-6, 1e-5, 1e-4, 1e-3];
    let sweep = |out: &str| {
        codetts_cli::commands::snr_sweep_cmd(&cfg, (&models.0, &models.1), &c, &sigmas, 2, &d.join(out)).unwrap();
        fs::read_to_string(d.join(out).join("snr_sweep.tsv")).unwrap()
    };
    let a = sweep("s1");
    assert_eq!(a.lines().count(), 1 + 5);
    assert!(d.join("s1").join("snr_sweep.svg").is_file());
    let b = sweep("s2");
    assert_eq!(a.lines().nth(1), b.lines().nth(1));
    assert_eq!(a, b);
}
