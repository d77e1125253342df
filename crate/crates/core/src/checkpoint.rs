//! Checkpoint directories: `manifest.json` plus one raw little-endian blob
//! per tensor (parameters, buffers and optimizer moments).

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::networks::{ArchitectureSpec, BinModel, ModelFlags};
use crate::optim::Adam;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoder and classifier head trained; generator untrained.
    Classifier,
    Bin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |d: &str| Error::Integrity {
            name: "rng".into(),
            detail: d.into(),
        };
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("bad hex in seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad("bad word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<i64>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub group: String,
    pub step: u64,
    pub lr: f64,
    pub moments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub stage: Stage,
    pub step: u64,
    pub epoch: usize,
    pub architecture: ArchitectureSpec,
    pub flags: ModelFlags,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizers: Vec<OptimizerEntry>,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Run configuration and any other metadata (accuracy, notes).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn dtype_name(kind: Kind) -> Result<&'static str> {
    match kind {
        Kind::Float => Ok("float32-le"),
        Kind::Double => Ok("float64-le"),
        k => Err(Error::Contract(format!("unsupported tensor kind {k:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let t = t.detach().contiguous().flatten(0, -1);
    Ok(match t.kind() {
        Kind::Float => Vec::<f32>::try_from(&t)?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Kind::Double => Vec::<f64>::try_from(&t)?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        k => return Err(Error::Contract(format!("unsupported tensor kind {k:?}"))),
    })
}

fn tensor_from_bytes(entry: &TensorEntry, bytes: &[u8]) -> Result<Tensor> {
    let n: i64 = entry.shape.iter().product();
    let width = match entry.dtype.as_str() {
        "float32-le" => 4,
        "float64-le" => 8,
        d => {
            return Err(Error::Integrity {
                name: entry.name.clone(),
                detail: format!("unknown dtype {d}"),
            })
        }
    };
    if bytes.len() != n as usize * width {
        return Err(Error::Integrity {
            name: entry.name.clone(),
            detail: format!(
                "blob has {} bytes, manifest implies {}",
                bytes.len(),
                n as usize * width
            ),
        });
    }
    let t = if width == 4 {
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_slice(&v)
    } else {
        let v: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_slice(&v)
    };
    Ok(t.view(entry.shape.as_slice()))
}

fn file_name(name: &str) -> String {
    format!(
        "{}.bin",
        name.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            })
            .collect::<String>()
    )
}

/// Everything that goes into a checkpoint besides the model tensors.
pub struct SaveRequest<'a> {
    pub stage: Stage,
    pub step: u64,
    pub epoch: usize,
    pub optimizers: Vec<(&'a str, &'a Adam)>,
    pub rng: Option<&'a ChaCha8Rng>,
    pub meta: serde_json::Value,
}

fn model_tensors(model: &BinModel) -> impl Iterator<Item = (&str, &Tensor)> {
    model
        .tan
        .iter()
        .chain(model.gen.iter())
        .chain(model.disc.iter())
        .map(|p| (p.name.as_str(), &p.tensor))
}

/// Writes a checkpoint atomically: the directory appears complete or not at all.
pub fn save(dir: &Path, model: &BinModel, req: SaveRequest<'_>) -> Result<PathBuf> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("ckpt"),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let mut entries = Vec::new();
    let mut write = |name: String, t: &Tensor| -> Result<()> {
        let file = file_name(&name);
        fs::write(tmp.join(&file), tensor_bytes(t)?)?;
        entries.push(TensorEntry {
            name,
            shape: t.size(),
            dtype: dtype_name(t.kind())?.into(),
            file,
        });
        Ok(())
    };
    for (name, t) in model_tensors(model) {
        write(name.to_string(), t)?;
    }
    let mut optimizers = Vec::new();
    for (group, opt) in &req.optimizers {
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            write(format!("optim.{group}.m.{i}"), m)?;
            write(format!("optim.{group}.v.{i}"), v)?;
        }
        optimizers.push(OptimizerEntry {
            group: group.to_string(),
            step: opt.step,
            lr: opt.lr,
            moments: opt.m.len(),
        });
    }
    let manifest = Manifest {
        format: FORMAT,
        stage: req.stage,
        step: req.step,
        epoch: req.epoch,
        architecture: model.spec.clone(),
        flags: model.flags,
        tensors: entries,
        optimizers,
        rng: req.rng.map(RngState::capture),
        meta: req.meta,
    };
    fs::write(tmp.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;

    if dir.exists() {
        let old = parent.join(format!(
            ".{}.old-{}",
            dir.file_name().and_then(|s| s.to_str()).unwrap_or("ckpt"),
            std::process::id()
        ));
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(dir.to_path_buf())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    let bytes = fs::read(&p).map_err(|e| Error::load(&p, e))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format != FORMAT {
        return Err(Error::Integrity {
            name: MANIFEST.into(),
            detail: format!("unsupported format {}", m.format),
        });
    }
    Ok(m)
}

/// Loads tensors into an existing model (and optimizers). All shapes are
/// checked against the manifest before any blob is read.
pub fn load_into(dir: &Path, model: &BinModel, optimizers: &mut [(&str, &mut Adam)]) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    let find = |name: &str| manifest.tensors.iter().find(|e| e.name == name);
    for (name, t) in model_tensors(model) {
        let e = find(name).ok_or_else(|| Error::Integrity {
            name: name.into(),
            detail: "missing from manifest".into(),
        })?;
        if e.shape != t.size() {
            return Err(Error::Shape {
                expected: t.size(),
                actual: e.shape.clone(),
            });
        }
    }
    let read = |e: &TensorEntry| -> Result<Tensor> {
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::load(&p, err))?;
        tensor_from_bytes(e, &bytes)
    };
    // Decode everything first so a bad blob leaves the model untouched.
    let mut loaded = Vec::new();
    for (name, t) in model_tensors(model) {
        loaded.push((t.shallow_clone(), read(find(name).expect("checked"))?));
    }
    let mut opt_states = Vec::new();
    for (group, opt) in optimizers.iter() {
        let entry = manifest
            .optimizers
            .iter()
            .find(|o| o.group == *group)
            .ok_or_else(|| Error::Integrity {
                name: format!("optim.{group}"),
                detail: "missing from manifest".into(),
            })?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for i in 0..entry.moments {
            for (prefix, out) in [("m", &mut m), ("v", &mut v)] {
                let name = format!("optim.{group}.{prefix}.{i}");
                let e = find(&name).ok_or_else(|| Error::Integrity {
                    name: name.clone(),
                    detail: "missing from manifest".into(),
                })?;
                out.push(read(e)?.to_kind(model.kind));
            }
        }
        if m.len() != opt.params().len() {
            return Err(Error::Integrity {
                name: format!("optim.{group}"),
                detail: format!("{} moments for {} parameters", m.len(), opt.params().len()),
            });
        }
        opt_states.push((entry.step, entry.lr, m, v));
    }
    tch::no_grad(|| {
        for (dst, src) in &loaded {
            let _ = dst.shallow_clone().copy_(src);
        }
    });
    for ((_, opt), (step, lr, m, v)) in optimizers.iter_mut().zip(opt_states) {
        opt.load_state(step, m, v)?;
        opt.lr = lr;
    }
    Ok(manifest)
}

/// Run configuration stored alongside the tensors, if any.
pub fn stored_config(manifest: &Manifest) -> Option<crate::config::TrainConfig> {
    serde_json::from_value(manifest.meta.get("config")?.clone()).ok()
}

/// Builds a model from the manifest's architecture and loads its tensors.
pub fn load_model(dir: &Path) -> Result<(BinModel, Manifest)> {
    let manifest = read_manifest(dir)?;
    let kind = match manifest.tensors.first().map(|e| e.dtype.as_str()) {
        Some("float64-le") => Kind::Double,
        _ => Kind::Float,
    };
    let model = BinModel::new(manifest.architecture.clone(), manifest.flags, 0, kind)?;
    let manifest = load_into(dir, &model, &mut [])?;
    Ok((model, manifest))
}
