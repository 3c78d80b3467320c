use std::fmt::Write as _;

use codetts::inference::{Diagnostics, StopReason};
use codetts::{Error, Result};

fn stop_name(s: StopReason) -> &'static str {
    match s {
        StopReason::Alignment => "alignment",
        StopReason::EndToken => "end-token",
        StopReason::MaxFrames => "max-frames",
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

/// Header lines (`key<TAB>value`), then one tab-separated row per generated
/// frame: step, `b_k`, per-group entropies, cross-attention weights.
pub fn diagnostics_text(d: &Diagnostics) -> String {
    let mut out = String::from("# synthesis diagnostics\n");
    let _ = writeln!(out, "enc_len\t{}", d.enc_len);
    let _ = writeln!(out, "frames\t{}", d.alignment.len());
    let _ = writeln!(out, "stop\t{}", stop_name(d.stop));
    let _ = writeln!(out, "prompt_frames\t{}", d.prompt.frames());
    let prompt: Vec<String> = d.prompt.codes().iter().map(|c| c.to_string()).collect();
    let _ = writeln!(out, "prompt_codes\t{}", prompt.join(","));
    let nucleus: Vec<String> = d.samples.iter().map(|s| s.candidates.to_string()).collect();
    let _ = writeln!(out, "nucleus_sizes\t{}", nucleus.join(","));
    out.push_str("step\tb\tentropy\tattention\n");
    for (k, &b) in d.alignment.iter().enumerate() {
        let _ = writeln!(out, "{k}\t{b}\t{}\t{}", join(&d.entropies[k]), join(&d.attention[k]));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedDiagnostics {
    pub enc_len: usize,
    pub stop: String,
    pub alignment: Vec<usize>,
    pub entropies: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
}

pub fn parse_diagnostics(text: &str) -> Result<ParsedDiagnostics> {
    let bad = |m: String| Error::Format(format!("diagnostics: {m}"));
    let mut enc_len = None;
    let mut stop = None;
    let mut frames = None;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    for line in lines.by_ref() {
        if line == "step\tb\tentropy\tattention" {
            break;
        }
        let (k, v) = line.split_once('\t').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
        match k {
            "enc_len" => enc_len = Some(v.parse().map_err(|_| bad(format!("enc_len {v:?}")))?),
            "frames" => frames = Some(v.parse::<usize>().map_err(|_| bad(format!("frames {v:?}")))?),
            "stop" => stop = Some(v.to_string()),
            _ => {}
        }
    }
    let floats = |s: &str| -> Result<Vec<f64>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|x| x.parse().map_err(|_| bad(format!("number {x:?}")))).collect()
    };
    let (mut alignment, mut entropies, mut attention) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 || cols[0].parse::<usize>().ok() != Some(alignment.len()) {
            return Err(bad(format!("bad row {line:?}")));
        }
        alignment.push(cols[1].parse().map_err(|_| bad(format!("b {:?}", cols[1])))?);
        entropies.push(floats(cols[2])?);
        attention.push(floats(cols[3])?);
    }
    let enc_len = enc_len.ok_or_else(|| bad("missing enc_len".into()))?;
    if frames != Some(alignment.len()) {
        return Err(bad(format!("header says {frames:?} frames, found {}", alignment.len())));
    }
    Ok(ParsedDiagnostics {
        enc_len,
        stop: stop.ok_or_else(|| bad("missing stop".into()))?,
        alignment,
        entropies,
        attention,
    })
}
