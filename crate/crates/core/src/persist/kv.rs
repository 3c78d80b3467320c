use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::audio::MelConfig;
use crate::error::{Error, Result};
use crate::inference::SynthesisConfig;
use crate::quantizer::{QuantizerConfig, QuantizerTrainConfig};
use crate::synthesizer::{TransformerConfig, TtsTrainConfig};

/// Version written as `format.version` and required when reading.
pub const FORMAT_VERSION: u32 = 1;
const VERSION_KEY: &str = "format.version";

/// A value that can sit on the right-hand side of `key = value`.
pub trait KvValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> Result<Self>;
}

fn bad(key_or_value: &str, what: &str) -> Error {
    Error::Config(format!("cannot parse {key_or_value:?} as {what}"))
}

macro_rules! kv_from_str {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|_| bad(s, stringify!($t)))
            }
        }
    )*};
}

kv_from_str!(usize, u32, u64, bool);

impl KvValue for f64 {
    fn render(&self) -> String {
        // Debug is the shortest representation that parses back exactly
        format!("{self:?}")
    }
    fn parse_value(s: &str) -> Result<Self> {
        let v: f64 = s.parse().map_err(|_| bad(s, "f64"))?;
        if v.is_finite() { Ok(v) } else { Err(bad(s, "finite f64")) }
    }
}

impl KvValue for Option<f64> {
    fn render(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.render())
    }
    fn parse_value(s: &str) -> Result<Self> {
        if s == "none" { Ok(None) } else { f64::parse_value(s).map(Some) }
    }
}

impl KvValue for Vec<usize> {
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
    }
    fn parse_value(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| usize::parse_value(p.trim())).collect()
    }
}

impl KvValue for Vec<f64> {
    fn render(&self) -> String {
        self.iter().map(|v| v.render()).collect::<Vec<_>>().join(", ")
    }
    fn parse_value(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| f64::parse_value(p.trim())).collect()
    }
}

#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    /// Starts a document with the version line.
    pub fn new() -> Self {
        let mut w = Self::default();
        w.put(VERSION_KEY, &FORMAT_VERSION);
        w
    }

    pub fn put<T: KvValue>(&mut self, key: &str, value: &T) {
        let _ = writeln!(self.out, "{key} = {}", value.render());
    }

    pub fn comment(&mut self, text: &str) {
        let _ = writeln!(self.out, "# {text}");
    }

    pub fn section<S: Section>(&mut self, name: &str, s: &S) {
        s.write(name, self);
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Parsed `section.key = value` lines. Every key must be consumed before
/// [`KvReader::finish`], which is how unknown keys are rejected.
#[derive(Debug)]
pub struct KvReader {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvReader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: bad key {k:?}", n + 1)));
            }
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        let mut r = Self { entries };
        let mut version = 0u32;
        if !r.set(VERSION_KEY, &mut version)? {
            return Err(Error::Config(format!("missing {VERSION_KEY}")));
        }
        if version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported config version {version}")));
        }
        Ok(r)
    }

    /// Overwrites `slot` if `key` is present; returns whether it was.
    pub fn set<T: KvValue>(&mut self, key: &str, slot: &mut T) -> Result<bool> {
        match self.entries.remove(key) {
            Some((line, v)) => {
                *slot = T::parse_value(&v).map_err(|e| Error::Config(format!("line {line}, {key}: {e}")))?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn take<T: KvValue>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            Some((line, v)) => T::parse_value(&v)
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}, {key}: {e}"))),
            None => Ok(None),
        }
    }

    /// Reads a section on top of `base`.
    pub fn section<S: Section>(&mut self, name: &str, mut base: S) -> Result<S> {
        base.read_into(name, self)?;
        Ok(base)
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key {k}"))),
        }
    }
}

/// A struct stored as a group of `prefix.field` keys.
pub trait Section {
    fn write(&self, prefix: &str, w: &mut KvWriter);
    fn read_into(&mut self, prefix: &str, r: &mut KvReader) -> Result<()>;
}

#[macro_export]
#[doc(hidden)]
macro_rules! kv_section {
    ($ty:ty { $($field:ident),* $(,)? } $(nested { $($sub:ident),* })?) => {
        impl $crate::persist::Section for $ty {
            fn write(&self, prefix: &str, w: &mut $crate::persist::KvWriter) {
                $( w.put(&format!("{prefix}.{}", stringify!($field)), &self.$field); )*
                $($( self.$sub.write(&format!("{prefix}.{}", stringify!($sub)), w); )*)?
            }
            fn read_into(&mut self, prefix: &str, r: &mut $crate::persist::KvReader) -> $crate::Result<()> {
                $( r.set(&format!("{prefix}.{}", stringify!($field)), &mut self.$field)?; )*
                $($( self.$sub.read_into(&format!("{prefix}.{}", stringify!($sub)), r)?; )*)?
                Ok(())
            }
        }
    };
}

kv_section!(MelConfig { sample_rate, n_fft, hop, n_mels, fmin, fmax, log_floor });
kv_section!(QuantizerConfig {
    groups, codebook_size, latent_dim, gamma, lambda, sample_rate, strides, channels,
    base_channels, speaker_dim, norm_channels,
} nested { mel });
kv_section!(TransformerConfig {
    groups, codebook_size, phonemes, speaker_dim, model_dim, heads, ff_dim,
    enc_layers, dec_layers, sub_layers, linear_heads,
});
kv_section!(SynthesisConfig { top_p, window, prompt_sigma, max_frames, seed });
kv_section!(QuantizerTrainConfig {
    steps, batch_size, segment_frames, lr, beta1, beta2, clip_norm, seed, reseed_dead_codes,
});
kv_section!(TtsTrainConfig {
    steps,
    batch_size,
    lr,
    beta1,
    beta2,
    clip_norm,
    seed,
    guided_attention,
    guided_width,
    prompt_variants,
    prompt_sigma
});
