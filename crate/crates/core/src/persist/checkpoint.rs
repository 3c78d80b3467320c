use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::{Quantizer, QuantizerConfig};
use crate::synthesizer::{Synthesizer, TransformerConfig};

use super::kv::{KvReader, KvWriter};

const MAGIC: &[u8; 4] = b"CTTS";
const VERSION: u32 = 1;
pub const QUANTIZER_TAG: [u8; 4] = *b"QNTZ";
pub const SYNTHESIZER_TAG: [u8; 4] = *b"TTSM";

/// Binary parameter container:
///
/// ```text
/// "CTTS" | version u32 | tag [4] | config_len u32 | config text
/// | count u32 | count × (name_len u32 | name | rank u32 | dims u64… | f64…)
/// | crc32 u32
/// ```
///
/// All integers and floats are little-endian; the checksum covers every
/// preceding byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tag: [u8; 4],
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("dimension overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 text".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.tag);
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut c = Cursor { buf: body, pos: 4 };
        let version = c.u32()?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let tag: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
        let config = c.string()?;
        let count = c.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = c.string()?;
            let rank = c.u32()?;
            let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= body.len() / 8)
                .ok_or_else(|| Error::Format(format!("tensor {name} is larger than the file")))?;
            let raw = c.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if c.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        Ok(Self { tag, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn expect_tag(&self, tag: [u8; 4]) -> Result<()> {
        if self.tag != tag {
            return Err(Error::Format(format!(
                "checkpoint holds {:?}, expected {:?}",
                String::from_utf8_lossy(&self.tag),
                String::from_utf8_lossy(&tag)
            )));
        }
        Ok(())
    }

    fn check_names(&self, names: &[String]) -> Result<Vec<Tensor>> {
        if self.tensors.len() != names.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", names.len(), self.tensors.len())));
        }
        for ((got, _), want) in self.tensors.iter().zip(names) {
            if got != want {
                return Err(Error::Format(format!("tensor {got} where {want} was expected")));
            }
        }
        Ok(self.tensors.iter().map(|(_, t)| t.clone()).collect())
    }
}

/// Writes through a sibling temporary file and a rename, so readers see
/// either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn quantizer_checkpoint(q: &Quantizer) -> Checkpoint {
    let mut w = KvWriter::new();
    w.section("quantizer", q.config());
    // informational; checked against the strides on load
    w.put("quantizer.hop", &q.hop());
    Checkpoint {
        tag: QUANTIZER_TAG,
        config: w.finish(),
        tensors: q.params().names().iter().cloned().zip(q.params().tensors().iter().cloned()).collect(),
    }
}

pub fn quantizer_from_checkpoint(ck: &Checkpoint) -> Result<Quantizer> {
    ck.expect_tag(QUANTIZER_TAG)?;
    let mut r = KvReader::parse(&ck.config)?;
    let cfg = r.section("quantizer", QuantizerConfig::default())?;
    let hop: Option<usize> = r.take("quantizer.hop")?;
    r.finish()?;
    if hop.is_some_and(|h| h != cfg.hop()) {
        return Err(Error::Format(format!("stored hop {hop:?} disagrees with strides {:?}", cfg.strides)));
    }
    let mut q = Quantizer::new(cfg, 0)?;
    let tensors = ck.check_names(q.params().names())?;
    q.load_parameters(tensors)?;
    Ok(q)
}

pub fn synthesizer_checkpoint(m: &Synthesizer) -> Checkpoint {
    let mut w = KvWriter::new();
    w.section("transformer", m.config());
    Checkpoint {
        tag: SYNTHESIZER_TAG,
        config: w.finish(),
        tensors: m.params().names().iter().cloned().zip(m.params().tensors().iter().cloned()).collect(),
    }
}

pub fn synthesizer_from_checkpoint(ck: &Checkpoint) -> Result<Synthesizer> {
    ck.expect_tag(SYNTHESIZER_TAG)?;
    let mut r = KvReader::parse(&ck.config)?;
    let cfg = r.section("transformer", TransformerConfig::default())?;
    r.finish()?;
    let names = Synthesizer::new(cfg.clone(), 0)?.params().names().to_vec();
    Synthesizer::from_parameters(cfg, ck.check_names(&names)?)
}

pub fn save_quantizer(q: &Quantizer, path: &Path) -> Result<()> {
    quantizer_checkpoint(q).save(path)
}

pub fn load_quantizer(path: &Path) -> Result<Quantizer> {
    quantizer_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn save_synthesizer(m: &Synthesizer, path: &Path) -> Result<()> {
    synthesizer_checkpoint(m).save(path)
}

pub fn load_synthesizer(path: &Path) -> Result<Synthesizer> {
    synthesizer_from_checkpoint(&Checkpoint::load(path)?)
}
