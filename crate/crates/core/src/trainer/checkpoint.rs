//! Checkpoint directory: `manifest.txt` and `payload.bin`.
//!
//! The manifest is line-oriented text:
//!
//! ```text
//! tood-checkpoint v1
//! step 500
//! config {"image_size":128,...}
//! param backbone.0.weight 3,3,3,16 0 1756
//! ...
//! ```
//!
//! Each `param` line gives the name, dims, byte offset and byte length of a
//! TNSR blob in the payload.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{build_model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::thead::ParamTree;

pub const CHECKPOINT_HEADER: &str = "tood-checkpoint v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<f32>>,
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{CHECKPOINT_HEADER}\nstep {}\nconfig {}\n", ckpt.step, ckpt.config.to_json());
    let mut payload = Vec::new();
    for (name, t) in ckpt.params.named() {
        let start = payload.len();
        t.write_tnsr(&mut payload);
        let _ = writeln!(manifest, "param {name} {} {start} {}", dims(t.shape()), payload.len() - start);
    }
    let mp = dir.join(MANIFEST_FILE);
    std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    let pp = dir.join(PAYLOAD_FILE);
    std::fs::write(&pp, payload).map_err(|e| Error::io(&pp, e))
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse().map_err(|_| Error::Checkpoint(format!("manifest line {line}: bad number {s:?}")))
}

/// Loads a checkpoint and validates it against the model built from its own
/// config: every parameter must be present once, with matching dims.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mp = dir.join(MANIFEST_FILE);
    let manifest = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let pp = dir.join(PAYLOAD_FILE);
    let payload = std::fs::read(&pp).map_err(|e| Error::io(&pp, e))?;

    let mut lines = manifest.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, CHECKPOINT_HEADER)) => {}
        other => return Err(Error::Checkpoint(format!("bad manifest header {:?}", other.map(|o| o.1)))),
    }
    let step = match lines.next() {
        Some((n, l)) if l.starts_with("step ") => parse_usize(&l[5..], n)?,
        _ => return Err(Error::Checkpoint("manifest line 2: expected `step N`".into())),
    };
    let config = match lines.next() {
        Some((_, l)) if l.starts_with("config ") => ModelConfig::from_json(&l[7..])
            .map_err(|e| Error::Checkpoint(format!("manifest config: {e}")))?,
        _ => return Err(Error::Checkpoint("manifest line 3: expected `config {...}`".into())),
    };

    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (n, l) in lines {
        if l.is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split(' ').collect();
        if f.len() != 5 || f[0] != "param" {
            return Err(Error::Checkpoint(format!("manifest line {n}: expected `param NAME DIMS OFFSET BYTES`")));
        }
        let shape = if f[2].is_empty() {
            Vec::new()
        } else {
            f[2].split(',').map(|d| parse_usize(d, n)).collect::<Result<_>>()?
        };
        let e = Entry { shape, offset: parse_usize(f[3], n)?, bytes: parse_usize(f[4], n)? };
        if entries.insert(f[1].to_string(), e).is_some() {
            return Err(Error::Checkpoint(format!("manifest line {n}: duplicate parameter {}", f[1])));
        }
    }

    let mut params = build_model(&config)?;
    let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let missing: Vec<&str> = expected.iter().filter(|n| !entries.contains_key(*n)).map(|n| n.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing parameter(s): {}", missing.join(", "))));
    }
    let unknown: Vec<&str> = entries.keys().filter(|k| !expected.contains(k)).map(|k| k.as_str()).collect();
    if !unknown.is_empty() {
        return Err(Error::Checkpoint(format!("unknown parameter(s): {}", unknown.join(", "))));
    }

    let mut err = None;
    params.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        let e = &entries[&name];
        if e.shape != p.shape() {
            err = Some(Error::Checkpoint(format!("{name}: manifest dims {:?}, model expects {:?}", e.shape, p.shape())));
            return;
        }
        let Some(blob) = e.offset.checked_add(e.bytes).and_then(|end| payload.get(e.offset..end)) else {
            err = Some(Error::Checkpoint(format!("{name}: bytes {}+{} outside payload of {}", e.offset, e.bytes, payload.len())));
            return;
        };
        match Tensor::from_tnsr_bytes(blob) {
            Ok(t) if t.shape() == p.shape() => *p = t,
            Ok(t) => err = Some(Error::Checkpoint(format!("{name}: payload dims {:?}, manifest {:?}", t.shape(), e.shape))),
            Err(x) => err = Some(Error::Checkpoint(format!("{name}: {x}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(Checkpoint { step, config, params })
}
