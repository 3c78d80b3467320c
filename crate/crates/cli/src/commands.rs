use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use codetts::audio::Waveform;
use codetts::corpus::{generate_corpus, parse_manifest, parse_phoneme_string, write_manifest, ManifestEntry};
use codetts::inference::{synthesize, Synthesis, SynthesisConfig};
use codetts::metrics::{frechet_distance, mcd, speaker_similarity, wada_snr, DEFAULT_FRECHET_SCALE};
use codetts::parallel;
use codetts::persist::{load_quantizer, load_synthesizer, save_quantizer, save_synthesizer, write_atomic, KvWriter};
use codetts::quantizer::{stub_speaker_embedder, train_quantizer, Quantizer, TrainingClip};
use codetts::synthesizer::{prompted_examples, train_tts, PhonemeSequence, Synthesizer, TtsExample};
use codetts::{Error, Result};

use crate::config::RunConfig;
use crate::diagnostics::{diagnostics_text, parse_diagnostics};
use crate::plot::{heatmap_svg, LinePlot};
use crate::wav::{read_wav, write_wav};

pub const MANIFEST: &str = "manifest.tsv";
pub const WAV_DIR: &str = "wav";

/// Successful outcome of a command; truncation still writes every output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Truncated(usize),
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    Ok(fs::create_dir_all(path)?)
}

pub fn wav_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(WAV_DIR).join(format!("{id}.wav"))
}

pub struct CorpusItem {
    pub entry: ManifestEntry,
    pub wave: Waveform,
}

pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let entries = parse_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if entries.is_empty() {
        return Err(Error::Format(format!("{} lists no utterances", dir.join(MANIFEST).display())));
    }
    parallel::try_map(&entries, |e| -> Result<CorpusItem> {
        Ok(CorpusItem {
            wave: read_wav(&wav_path(dir, &e.id))?,
            entry: e.clone(),
        })
    })
}

fn check_rate(cfg: &RunConfig, w: &Waveform) -> Result<()> {
    if w.sample_rate != cfg.quantizer.sample_rate {
        return Err(Error::Config(format!(
            "audio at {} Hz, model at {} Hz (resampling is not supported)",
            w.sample_rate, cfg.quantizer.sample_rate
        )));
    }
    Ok(())
}

/// A missing checkpoint is a configuration problem, not an I/O failure.
fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} checkpoint {} does not exist", path.display())))
    }
}

fn loss_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.tsv");
    PathBuf::from(s)
}

pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<String> {
    let corpus = generate_corpus(&cfg.corpus)?;
    create_dir(&out.join(WAV_DIR))?;
    parallel::try_map(&corpus, |u| write_wav(&wav_path(out, &u.id), &u.wave))?;
    let entries: Vec<ManifestEntry> = corpus.iter().map(Into::into).collect();
    write_text(&out.join(MANIFEST), &write_manifest(&entries))?;
    let mut w = KvWriter::new();
    w.section("corpus", &cfg.corpus);
    write_text(&out.join("corpus.conf"), &w.finish())?;
    let secs: f64 = corpus.iter().map(|u| u.wave.duration_secs()).sum();
    Ok(format!("wrote {} utterances ({secs:.2} s of audio) to {}", corpus.len(), out.display()))
}

fn mean_reconstruction_error(q: &Quantizer, clips: &[TrainingClip]) -> Result<f64> {
    let errs = parallel::try_map(clips, |c| q.reconstruction_error(&c.wave, &c.speaker))?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

pub fn train_quantizer_cmd(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<String> {
    let items = load_corpus(corpus)?;
    let clips = parallel::try_map(&items, |it| -> Result<TrainingClip> {
        check_rate(cfg, &it.wave)?;
        Ok(TrainingClip {
            speaker: stub_speaker_embedder(&it.wave)?,
            wave: it.wave.clone(),
        })
    })?;
    let mut q = Quantizer::new(cfg.quantizer.clone(), cfg.quantizer_train.seed)?;
    let before = mean_reconstruction_error(&q, &clips)?;
    let report = train_quantizer(&mut q, &clips, &cfg.quantizer_train)?;
    let after = mean_reconstruction_error(&q, &clips)?;
    save_quantizer(&q, out)?;
    let mut log = String::from("step\ttotal\tvq\treconstruction\n");
    for (i, ((t, v), r)) in report.losses.iter().zip(&report.vq_losses).zip(&report.rec_losses).enumerate() {
        let _ = writeln!(log, "{i}\t{t:.6}\t{v:.6}\t{r:.6}");
    }
    write_text(&loss_path(out), &log)?;
    Ok(format!(
        "quantizer: {} steps, log-mel L1 {before:.4} -> {after:.4} ({:.1}% lower), {} codes re-seeded, fingerprint {:08x}",
        report.losses.len(),
        100.0 * (1.0 - after / before),
        report.reseeded,
        q.params().fingerprint()
    ))
}

pub fn tts_examples(q: &Quantizer, items: &[CorpusItem], inventory: usize) -> Result<Vec<TtsExample>> {
    parallel::try_map(items, |it| -> Result<TtsExample> {
        Ok(TtsExample {
            phonemes: PhonemeSequence::new(parse_phoneme_string(&it.entry.phonemes, inventory)?, inventory)?,
            speaker: stub_speaker_embedder(&it.wave)?,
            codes: q.quantize(&it.wave)?,
        })
    })
}

fn check_pair(q: &Quantizer, m: &Synthesizer) -> Result<()> {
    let (qc, tc) = (q.config(), m.config());
    if qc.groups != tc.groups || qc.codebook_size != tc.codebook_size {
        return Err(Error::Config(format!(
            "quantizer has N={} K={}, transformer expects N={} K={}",
            qc.groups, qc.codebook_size, tc.groups, tc.codebook_size
        )));
    }
    Ok(())
}

pub fn train_tts_cmd(cfg: &RunConfig, corpus: &Path, quantizer: &Path, out: &Path) -> Result<String> {
    require(quantizer, "quantizer")?;
    let q = load_quantizer(quantizer)?;
    let frozen = q.params().fingerprint();
    let items = load_corpus(corpus)?;
    for it in &items {
        check_rate(cfg, &it.wave)?;
    }
    let mut m = Synthesizer::new(cfg.transformer.clone(), cfg.tts_train.seed)?;
    check_pair(&q, &m)?;
    let examples = prompted_examples(&q, &tts_examples(&q, &items, cfg.transformer.phonemes)?, &cfg.tts_train)?;
    // uniform guessing over the K+3 token vocabulary, per utterance
    let vocab = cfg.transformer.vocab() as f64;
    let uniform = examples
        .iter()
        .map(|e| (e.codes.frames() + 1) as f64 * e.codes.groups() as f64 * vocab.ln())
        .sum::<f64>()
        / examples.len() as f64;
    let report = train_tts(&mut m, &examples, &cfg.tts_train)?;
    if q.params().fingerprint() != frozen || load_quantizer(quantizer)?.params().fingerprint() != frozen {
        return Err(Error::Contract("quantizer parameters changed during stage-2 training".into()));
    }
    let nll = m.evaluate_nll(&examples)?;
    save_synthesizer(&m, out)?;
    let mut log = String::from("step\tnll\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(log, "{i}\t{l:.6}");
    }
    write_text(&loss_path(out), &log)?;
    Ok(format!(
        "transformer: {} steps, teacher-forced NLL per utterance {nll:.3} (uniform {uniform:.3}), quantizer fingerprint {frozen:08x} unchanged",
        report.losses.len()
    ))
}

pub fn load_models(quantizer: &Path, model: &Path) -> Result<(Quantizer, Synthesizer)> {
    require(quantizer, "quantizer")?;
    require(model, "transformer")?;
    let q = load_quantizer(quantizer)?;
    let m = load_synthesizer(model)?;
    check_pair(&q, &m)?;
    Ok((q, m))
}

pub fn diagnostics_path(out: &Path) -> PathBuf {
    out.with_extension("diag.tsv")
}

fn write_synthesis(s: &Synthesis, out: &Path) -> Result<()> {
    write_wav(out, &s.wave)?;
    write_text(&diagnostics_path(out), &diagnostics_text(&s.diagnostics))
}

pub enum TextInput<'a> {
    Phonemes(&'a str),
    Text(&'a str),
}

pub fn synthesize_cmd(
    cfg: &RunConfig,
    (q, m): (&Quantizer, &Synthesizer),
    input: TextInput,
    speaker_ref: &Path,
    out: &Path,
) -> Result<(Status, String)> {
    let inventory = m.config().phonemes;
    let phonemes = match input {
        TextInput::Phonemes(p) => PhonemeSequence::new(parse_phoneme_string(p, inventory)?, inventory)?,
        TextInput::Text(t) => PhonemeSequence::from_text(t, inventory)?,
    };
    let reference = read_wav(speaker_ref)?;
    check_rate(cfg, &reference)?;
    let speaker = stub_speaker_embedder(&reference)?;
    let s = synthesize(q, m, &phonemes, &speaker, &cfg.synthesis)?;
    write_synthesis(&s, out)?;
    let frames = s.codes.frames();
    let msg = format!(
        "{} frames ({:.3} s) -> {}, stop: {:?}",
        frames,
        s.wave.duration_secs(),
        out.display(),
        s.diagnostics.stop
    );
    let status = if s.diagnostics.truncated() { Status::Truncated(1) } else { Status::Ok };
    Ok((status, msg))
}

/// Synthesizes every manifest entry of `corpus`, each with its own recording
/// as the speaker reference, into a corpus-shaped directory.
pub fn synthesize_corpus_cmd(
    cfg: &RunConfig,
    (q, m): (&Quantizer, &Synthesizer),
    corpus: &Path,
    out_dir: &Path,
) -> Result<(Status, String)> {
    let items = load_corpus(corpus)?;
    create_dir(&out_dir.join(WAV_DIR))?;
    let inventory = m.config().phonemes;
    let results = parallel::try_map(&items, |it| -> Result<bool> {
        check_rate(cfg, &it.wave)?;
        let ph = PhonemeSequence::new(parse_phoneme_string(&it.entry.phonemes, inventory)?, inventory)?;
        let s = synthesize(q, m, &ph, &stub_speaker_embedder(&it.wave)?, &cfg.synthesis)?;
        write_synthesis(&s, &wav_path(out_dir, &it.entry.id))?;
        Ok(s.diagnostics.truncated())
    })?;
    let entries: Vec<ManifestEntry> = items.iter().map(|it| it.entry.clone()).collect();
    write_text(&out_dir.join(MANIFEST), &write_manifest(&entries))?;
    let truncated = results.iter().filter(|&&t| t).count();
    let status = if truncated > 0 { Status::Truncated(truncated) } else { Status::Ok };
    Ok((status, format!("synthesized {} utterances into {} ({truncated} truncated)", items.len(), out_dir.display())))
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub mean: f64,
    pub sd: f64,
    pub snrs: Vec<f64>,
}

/// Synthesizes `n` utterances per prompt noise level and estimates their
/// SNR. Utterance `j` uses the same text, speaker and seed at every level.
pub fn snr_sweep(
    cfg: &RunConfig,
    (q, m): (&Quantizer, &Synthesizer),
    items: &[CorpusItem],
    sigmas: &[f64],
    n: usize,
) -> Result<(Vec<SweepRow>, usize)> {
    if sigmas.is_empty() || n == 0 || items.is_empty() {
        return Err(Error::Config("snr sweep needs sigmas, a positive count and a corpus".into()));
    }
    let inventory = m.config().phonemes;
    let jobs: Vec<(usize, usize)> = (0..sigmas.len()).flat_map(|s| (0..n).map(move |j| (s, j))).collect();
    let results = parallel::try_map(&jobs, |&(s, j)| -> Result<(f64, bool)> {
        let it = &items[j % items.len()];
        let ph = PhonemeSequence::new(parse_phoneme_string(&it.entry.phonemes, inventory)?, inventory)?;
        let sc = SynthesisConfig {
            prompt_sigma: sigmas[s],
            seed: cfg.synthesis.seed.wrapping_add(j as u64),
            ..cfg.synthesis.clone()
        };
        let out = synthesize(q, m, &ph, &stub_speaker_embedder(&it.wave)?, &sc)?;
        Ok((wada_snr(&out.wave.samples)?, out.diagnostics.truncated()))
    })?;
    let truncated = results.iter().filter(|r| r.1).count();
    let rows = sigmas
        .iter()
        .enumerate()
        .map(|(s, &sigma)| {
            let snrs: Vec<f64> = results[s * n..(s + 1) * n].iter().map(|r| r.0).collect();
            let (mean, sd) = mean_sd(&snrs);
            SweepRow { sigma, mean, sd, snrs }
        })
        .collect();
    Ok((rows, truncated))
}

pub fn snr_sweep_cmd(
    cfg: &RunConfig,
    models: (&Quantizer, &Synthesizer),
    corpus: &Path,
    sigmas: &[f64],
    n: usize,
    out_dir: &Path,
) -> Result<(Status, String)> {
    let items = load_corpus(corpus)?;
    let (rows, truncated) = snr_sweep(cfg, models, &items, sigmas, n)?;
    create_dir(out_dir)?;
    let mut table = String::from("sigma\tmean_snr_db\tsd_snr_db\tn\n");
    for r in &rows {
        let _ = writeln!(table, "{:e}\t{:.4}\t{:.4}\t{}", r.sigma, r.mean, r.sd, r.snrs.len());
    }
    write_text(&out_dir.join("snr_sweep.tsv"), &table)?;
    let plot = LinePlot {
        title: "SNR of syntheses vs prompt noise".into(),
        x_label: "prompt noise sigma".into(),
        y_label: "WADA-SNR (dB)".into(),
        series: vec![("mean SNR".into(), rows.iter().map(|r| (r.sigma, r.mean)).collect())],
        log_x: true,
    };
    write_text(&out_dir.join("snr_sweep.svg"), &plot.to_svg())?;
    let status = if truncated > 0 { Status::Truncated(truncated) } else { Status::Ok };
    Ok((status, table))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub id: String,
    pub mcd: f64,
    pub sss: f64,
    pub snr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
    /// Fréchet distance between stub speaker embeddings of the two sets;
    /// needs at least two pairs.
    pub frechet: Option<f64>,
}

pub fn evaluate(reference: &[CorpusItem], synthesized: &[CorpusItem]) -> Result<EvalReport> {
    let mut ref_ids: Vec<&str> = reference.iter().map(|i| i.entry.id.as_str()).collect();
    let mut syn_ids: Vec<&str> = synthesized.iter().map(|i| i.entry.id.as_str()).collect();
    ref_ids.sort_unstable();
    syn_ids.sort_unstable();
    if ref_ids != syn_ids {
        let only: Vec<&&str> = ref_ids.iter().filter(|i| !syn_ids.contains(i)).chain(syn_ids.iter().filter(|i| !ref_ids.contains(i))).collect();
        return Err(Error::Format(format!("manifests are not paired; unmatched ids {only:?}")));
    }
    let pairs: Vec<(&CorpusItem, &CorpusItem)> = reference
        .iter()
        .map(|r| (r, synthesized.iter().find(|s| s.entry.id == r.entry.id).expect("paired")))
        .collect();
    let rows = parallel::try_map(&pairs, |(r, s)| -> Result<(PairMetrics, Vec<f64>, Vec<f64>)> {
        let (er, es) = (stub_speaker_embedder(&r.wave)?, stub_speaker_embedder(&s.wave)?);
        let m = PairMetrics {
            id: r.entry.id.clone(),
            mcd: mcd(&r.wave, &s.wave)?,
            sss: speaker_similarity(&er, &es)?,
            snr: wada_snr(&s.wave.samples)?,
        };
        Ok((m, er, es))
    })?;
    let frechet = if rows.len() >= 2 {
        let real: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
        let fake: Vec<Vec<f64>> = rows.iter().map(|r| r.2.clone()).collect();
        Some(frechet_distance(&real, &fake, DEFAULT_FRECHET_SCALE)?)
    } else {
        None
    };
    Ok(EvalReport {
        pairs: rows.into_iter().map(|r| r.0).collect(),
        frechet,
    })
}

pub fn report_text(r: &EvalReport) -> String {
    let mut out = String::from("id\tmcd\tsss\tsnr_db\n");
    for p in &r.pairs {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.4}", p.id, p.mcd, p.sss, p.snr);
    }
    let col = |f: fn(&PairMetrics) -> f64| mean_sd(&r.pairs.iter().map(f).collect::<Vec<_>>());
    for (name, (m, sd)) in [("mcd", col(|p| p.mcd)), ("sss", col(|p| p.sss)), ("snr_db", col(|p| p.snr))] {
        let _ = writeln!(out, "# {name}\tmean {m:.6}\tsd {sd:.6}");
    }
    match r.frechet {
        Some(f) => {
            let _ = writeln!(out, "# frechet\t{f:.6}");
        }
        None => out.push_str("# frechet\tn/a (needs two or more pairs)\n"),
    }
    out
}

pub fn evaluate_cmd(reference: &Path, synthesized: &Path, out: &Path) -> Result<String> {
    let report = evaluate(&load_corpus(reference)?, &load_corpus(synthesized)?)?;
    let text = report_text(&report);
    write_text(out, &text)?;
    Ok(text)
}

pub fn plot_alignment_cmd(diagnostics: &Path, out: &Path) -> Result<String> {
    let d = parse_diagnostics(&fs::read_to_string(diagnostics)?)?;
    let path: Vec<(f64, f64)> = d.alignment.iter().enumerate().map(|(k, &b)| (k as f64, b as f64)).collect();
    let svg = heatmap_svg(
        &format!("cross-attention and alignment path (stop: {})", d.stop),
        "decoder step",
        "encoder position",
        &d.attention,
        &path,
    );
    write_text(out, &svg)?;
    Ok(format!("{} steps over {} encoder positions -> {}", d.alignment.len(), d.enc_len, out.display()))
}
