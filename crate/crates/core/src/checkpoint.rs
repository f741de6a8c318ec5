//! Checkpoint directories: `manifest.json` plus `weights.bin`, the raw
//! little-endian f32 arrays concatenated in manifest order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, ModelConfig};
use crate::pipeline::TrainConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenize::{fnv1a64, Tokenizer};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

/// Byte range of one array inside the blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub head: HeadKind,
    pub train: Option<TrainConfig>,
    /// FNV-1a 64 of the vocabulary file, as 16 hex digits.
    pub tokenizer_fingerprint: String,
    /// The tokenizer file itself, so a checkpoint is usable on its own.
    pub tokenizer: Option<String>,
    /// Class names in label order for classifier checkpoints.
    pub labels: Option<Vec<String>>,
    /// FNV-1a 64 of the blob, as 16 hex digits.
    pub blob_fnv1a: String,
    pub arrays: Vec<ArrayEntry>,
}

impl Manifest {
    pub fn fingerprint(&self) -> Result<u64> {
        u64::from_str_radix(&self.tokenizer_fingerprint, 16)
            .map_err(|_| Error::Checkpoint(format!("bad fingerprint {:?}", self.tokenizer_fingerprint)))
    }
}

/// What goes into a checkpoint besides the weights.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointMeta<'a> {
    pub tokenizer: &'a Tokenizer,
    pub train: Option<&'a TrainConfig>,
    pub labels: Option<&'a [String]>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> Result<u64> {
        self.manifest.fingerprint()
    }

    pub fn require_head(&self, kind: HeadKind) -> Result<()> {
        if self.manifest.head != kind {
            return Err(Error::Checkpoint(format!(
                "head shape mismatch: checkpoint holds a {:?} head, this stage needs {:?}",
                self.manifest.head, kind
            )));
        }
        Ok(())
    }

    /// Fails unless `tokenizer` is the one the weights were trained with.
    pub fn check_tokenizer(&self, tokenizer: &Tokenizer) -> Result<()> {
        let expected = self.fingerprint()?;
        if expected != tokenizer.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected,
                found: tokenizer.fingerprint(),
            });
        }
        Ok(())
    }

    /// The embedded tokenizer, checked against the recorded fingerprint.
    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let text = self
            .manifest
            .tokenizer
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no tokenizer".into()))?;
        let tok = Tokenizer::from_file_string(text)?;
        self.check_tokenizer(&tok)?;
        Ok(tok)
    }
}

fn arrays(model: &Model) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model.params().into_iter().map(|p| (p.name, p.tensor)).collect();
    out.extend(model.buffers().into_iter().map(|(n, t)| (n.to_string(), t)));
    out
}

/// Blob bytes and array table for `model`, values rounded to f32.
pub fn encode_weights(model: &Model) -> (Vec<u8>, Vec<ArrayEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in arrays(model) {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(ArrayEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    (blob, entries)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn sibling(dir: &Path, tag: &str) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no final component", dir.display())))?;
    let mut s = std::ffi::OsString::from(".");
    s.push(name);
    s.push(format!(".{tag}-{}", std::process::id()));
    Ok(dir.with_file_name(s))
}

/// Writes a checkpoint directory. The files are written to a temporary
/// sibling directory that is then renamed into place, replacing any
/// existing checkpoint at `dir`.
pub fn save_checkpoint(model: &Model, meta: CheckpointMeta<'_>, dir: &Path) -> Result<Manifest> {
    let (blob, entries) = encode_weights(model);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        head: model.head.kind(),
        train: meta.train.cloned(),
        tokenizer_fingerprint: format!("{:016x}", meta.tokenizer.fingerprint()),
        tokenizer: Some(meta.tokenizer.to_file_string()),
        labels: meta.labels.map(|l| l.to_vec()),
        blob_fnv1a: format!("{:016x}", fnv1a64(&blob)),
        arrays: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";

    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = sibling(dir, "tmp")?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_file(&tmp.join(BLOB_FILE), &blob)?;
    write_file(&tmp.join(MANIFEST_FILE), json.as_bytes())?;
    if dir.exists() {
        let old = sibling(dir, "old")?;
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(manifest)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads a checkpoint directory, verifying the array table against the
/// blob and against the architecture named in the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let total: u64 = manifest.arrays.iter().map(|a| a.length).sum();
    if total != blob.len() as u64 {
        return Err(bad(format!("blob holds {} bytes, manifest lists {total}", blob.len())));
    }
    if format!("{:016x}", fnv1a64(&blob)) != manifest.blob_fnv1a {
        return Err(bad("blob checksum does not match the manifest"));
    }

    manifest.model.validate()?;
    let mut rng = Rng::new(0);
    let mut model = match manifest.head {
        HeadKind::Lm => Model::new_lm(manifest.model.clone(), &mut rng)?,
        HeadKind::Classifier => Model::new_classifier(manifest.model.clone(), &mut rng)?,
    };
    let expected: Vec<(String, Vec<usize>)> = arrays(&model).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != manifest.arrays.len() {
        return Err(bad(format!(
            "head shape mismatch: manifest lists {} arrays, the architecture has {}",
            manifest.arrays.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    let mut values = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.arrays.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            let what = if name.starts_with("head.") { "head shape mismatch" } else { "array mismatch" };
            return Err(bad(format!("{what}: manifest has {} {:?}, expected {name} {shape:?}", entry.name, entry.shape)));
        }
        let n: usize = shape.iter().product();
        if entry.offset != offset || entry.length != 4 * n as u64 {
            return Err(bad(format!("array {name} has inconsistent offset or length")));
        }
        let bytes = &blob[offset as usize..(offset + entry.length) as usize];
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint array {name}")));
        }
        values.push(Tensor::new(shape.clone(), data)?);
        offset += entry.length;
    }
    let mut it = values.into_iter();
    for p in model.params_mut() {
        *p.tensor = it.next().expect("counted above");
    }
    for (_, t) in model.buffers_mut() {
        *t = it.next().expect("counted above");
    }
    Ok(Checkpoint { manifest, model })
}
