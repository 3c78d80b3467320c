use std::fs;
use std::path::Path;

use codetts::corpus::CorpusSpec;
use codetts::inference::SynthesisConfig;
use codetts::persist::{KvReader, KvWriter};
use codetts::quantizer::{QuantizerConfig, QuantizerTrainConfig, SPEAKER_DIM};
use codetts::synthesizer::{TransformerConfig, TtsTrainConfig};
use codetts::{Error, Result};

/// Everything a run needs, read from one `section.key = value` file. Missing
/// keys keep their defaults; unknown keys are errors.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub quantizer: QuantizerConfig,
    pub transformer: TransformerConfig,
    pub synthesis: SynthesisConfig,
    pub quantizer_train: QuantizerTrainConfig,
    pub tts_train: TtsTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            quantizer: QuantizerConfig::default(),
            transformer: TransformerConfig::default(),
            synthesis: SynthesisConfig::default(),
            quantizer_train: QuantizerTrainConfig::default(),
            // the toy corpus is too small for alignment to emerge unaided
            tts_train: TtsTrainConfig {
                guided_attention: 1.0,
                prompt_variants: 4,
                ..TtsTrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    fn read_over(self, text: &str) -> Result<Self> {
        let mut r = KvReader::parse(text)?;
        let out = Self {
            corpus: r.section("corpus", self.corpus)?,
            quantizer: r.section("quantizer", self.quantizer)?,
            transformer: r.section("transformer", self.transformer)?,
            synthesis: r.section("synthesis", self.synthesis)?,
            quantizer_train: r.section("quantizer_train", self.quantizer_train)?,
            tts_train: r.section("tts_train", self.tts_train)?,
        };
        r.finish()?;
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().read_over(text)
    }

    /// Loads `path` (or the defaults), then applies `key=value` overrides and
    /// an optional global seed, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_text(&fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if !overrides.is_empty() {
            let mut doc = KvWriter::new().finish();
            for o in overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
                doc.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
            }
            cfg = cfg.read_over(&doc)?;
        }
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.quantizer_train.seed = seed;
        self.tts_train.seed = seed;
        self.synthesis.seed = seed;
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        w.section("corpus", &self.corpus);
        w.section("quantizer", &self.quantizer);
        w.section("transformer", &self.transformer);
        w.section("synthesis", &self.synthesis);
        w.section("quantizer_train", &self.quantizer_train);
        w.section("tts_train", &self.tts_train);
        w.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.quantizer.validate()?;
        self.transformer.validate()?;
        self.synthesis.validate()?;
        let (q, t, c) = (&self.quantizer, &self.transformer, &self.corpus);
        let mismatch = |what: &str| Err(Error::Config(format!("sections disagree on {what}")));
        if q.groups != t.groups || q.codebook_size != t.codebook_size {
            return mismatch("quantizer/transformer N or K");
        }
        if q.speaker_dim != SPEAKER_DIM || t.speaker_dim != SPEAKER_DIM {
            return mismatch(&format!("speaker_dim (the stub embedder gives {SPEAKER_DIM})"));
        }
        if c.phonemes != t.phonemes {
            return mismatch("corpus/transformer phoneme inventory");
        }
        if c.hop != q.hop() || c.sample_rate != q.sample_rate || q.mel.sample_rate != q.sample_rate {
            return mismatch("hop or sample rate");
        }
        Ok(())
    }
}
