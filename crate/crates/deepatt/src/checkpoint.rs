//! Checkpoint persistence.
//!
//! Layout: header line `DEEPATT v1`, model config as `key=value` lines, a
//! blank line, then for each parameter a descriptor line
//! `param=<name> rank=<r> dims=<d1,...>` followed by its values as
//! little-endian 32-bit floats, row-major. Save -> load -> save is
//! byte-identical.
//!
//! The vocabulary and tag inventory travel in sidecar files next to the
//! checkpoint (`<path>.vocab`, `<path>.tags`), one entry per line in id
//! order.

use crate::data::Vocabulary;
use crate::decode::TagSet;
use crate::encoder::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::runconfig::{apply_model_key, model_config_pairs};
use crate::tensor::Tensor;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

pub const MAGIC: &str = "DEEPATT v1";

pub fn write_checkpoint<T: Real>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParameters<T>,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}")?;
    for (k, v) in model_config_pairs(cfg) {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out)?;
    for p in params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(
            out,
            "param={} rank={} dims={}",
            p.name,
            p.value.shape().len(),
            dims.join(",")
        )?;
        for &v in p.value.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_line(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos] != b'\n' {
        *pos += 1;
    }
    if *pos >= bytes.len() {
        return Err(Error::Data("truncated checkpoint".into()));
    }
    let line = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::Data("checkpoint header is not UTF-8".into()))?
        .to_string();
    *pos += 1;
    Ok(line)
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<(ModelConfig, ModelParameters<T>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = read_line(&bytes, &mut pos)?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "bad checkpoint header '{magic}', expected '{MAGIC}'"
        )));
    }
    let mut cfg = ModelConfig::default();
    loop {
        let line = read_line(&bytes, &mut pos)?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad config line '{line}' in checkpoint")))?;
        if !apply_model_key(&mut cfg, k, v)? {
            return Err(Error::Data(format!("unknown config key '{k}' in checkpoint")));
        }
    }
    let mut tensors = Vec::new();
    while pos < bytes.len() {
        let line = read_line(&bytes, &mut pos)?;
        let mut name = None;
        let mut rank = None;
        let mut dims: Option<Vec<usize>> = None;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad descriptor '{line}'")))?;
            match k {
                "param" => name = Some(v.to_string()),
                "rank" => {
                    rank = Some(v.parse::<usize>().map_err(|_| {
                        Error::Data(format!("bad rank in descriptor '{line}'"))
                    })?)
                }
                "dims" => {
                    dims = Some(
                        v.split(',')
                            .map(|d| {
                                d.parse::<usize>().map_err(|_| {
                                    Error::Data(format!("bad dims in descriptor '{line}'"))
                                })
                            })
                            .collect::<Result<_>>()?,
                    )
                }
                other => return Err(Error::Data(format!("unknown descriptor field '{other}'"))),
            }
        }
        let (name, rank, dims) = match (name, rank, dims) {
            (Some(n), Some(r), Some(d)) => (n, r, d),
            _ => return Err(Error::Data(format!("incomplete descriptor '{line}'"))),
        };
        if dims.len() != rank {
            return Err(Error::Data(format!(
                "rank {rank} does not match {} dims for '{name}'",
                dims.len()
            )));
        }
        let numel: usize = dims.iter().product();
        let need = numel * 4;
        if pos + need > bytes.len() {
            return Err(Error::Data(format!("truncated payload for '{name}'")));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b = [
                bytes[pos + 4 * i],
                bytes[pos + 4 * i + 1],
                bytes[pos + 4 * i + 2],
                bytes[pos + 4 * i + 3],
            ];
            data.push(T::from_f64(f32::from_le_bytes(b) as f64));
        }
        pos += need;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    Ok((cfg, ModelParameters::from_named(tensors)))
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_sidecars(path: &Path, vocab: &Vocabulary, tagset: &TagSet) -> Result<()> {
    std::fs::write(sidecar(path, ".vocab"), vocab.words().join("\n") + "\n")?;
    std::fs::write(sidecar(path, ".tags"), tagset.labels().join("\n") + "\n")?;
    Ok(())
}

pub fn read_sidecars(path: &Path) -> Result<(Vocabulary, TagSet)> {
    let vpath = sidecar(path, ".vocab");
    let vtext = std::fs::read_to_string(&vpath)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", vpath.display())))?;
    let words: Vec<String> = vtext.lines().map(|l| l.to_string()).collect();
    if words.get(0).map(String::as_str) != Some(crate::data::PAD_TOKEN)
        || words.get(1).map(String::as_str) != Some(crate::data::UNK_TOKEN)
    {
        return Err(Error::Data("vocab sidecar missing reserved entries".into()));
    }
    let tpath = sidecar(path, ".tags");
    let ttext = std::fs::read_to_string(&tpath)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", tpath.display())))?;
    let tagset = TagSet::from_tag_strings(ttext.lines());
    // reject inventories our ordering convention cannot reproduce
    let labels: Vec<&str> = ttext.lines().collect();
    if tagset.labels().iter().map(String::as_str).collect::<Vec<_>>() != labels {
        return Err(Error::Data("tag sidecar is not in canonical order".into()));
    }
    Ok((Vocabulary::from_words(words), tagset))
}
