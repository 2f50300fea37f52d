//! Self-describing binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a JSON
//! metadata block (architecture, epoch counter, seed, optimizer scalars),
//! both vocabularies, then named tensors as
//! `(name len, name, rank, dims, f64 little-endian values)`. Parameters,
//! Adam moments and (when present) the frozen teacher are all tensors;
//! loading reproduces them bit-exactly.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use seqlab_core::data::Vocab;
use seqlab_core::model::{ModelConfig, ModelParams};
use seqlab_core::optim::{AdamConfig, AdamState};
use seqlab_core::tensor::Tensor;

const MAGIC: &[u8; 8] = b"S2SLCKP\x01";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    src_vocab: usize,
    tgt_vocab: usize,
    d_emb: usize,
    d_hidden: usize,
    enc_layers: usize,
    dec_layers: usize,
    init_range: f64,
}

impl From<&ModelConfig> for ModelMeta {
    fn from(c: &ModelConfig) -> Self {
        ModelMeta {
            src_vocab: c.src_vocab,
            tgt_vocab: c.tgt_vocab,
            d_emb: c.d_emb,
            d_hidden: c.d_hidden,
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            init_range: c.init_range,
        }
    }
}

impl ModelMeta {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            src_vocab: self.src_vocab,
            tgt_vocab: self.tgt_vocab,
            d_emb: self.d_emb,
            d_hidden: self.d_hidden,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            init_range: self.init_range,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    model: ModelMeta,
    completed_epochs: u64,
    seed: u64,
    adam: AdamMeta,
    has_teacher: bool,
}

/// A full training state: enough to resume bit-exactly at an epoch
/// boundary (streams are derived from `seed` and the epoch counter).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: AdamState,
    pub teacher: Option<ModelParams>,
    pub vocab_src: Vocab,
    pub vocab_tgt: Vocab,
    pub completed_epochs: u64,
    pub seed: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_vocab(w: &mut impl Write, vocab: &Vocab) -> io::Result<()> {
    write_u32(w, vocab.len() as u32)?;
    for token in vocab.tokens() {
        write_str(w, token)?;
    }
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, tensor: &Tensor) -> io::Result<()> {
    write_str(w, name)?;
    write_u32(w, tensor.rank() as u32)?;
    for &d in tensor.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8(buf)?)
}

fn read_vocab(r: &mut impl Read) -> Result<Vocab> {
    let count = read_u32(r)? as usize;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        tokens.push(read_str(r)?);
    }
    Ok(Vocab::from_tokens(tokens)?)
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = read_str(r)?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((name, Tensor::from_vec(&shape, data)?))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.write_all(MAGIC)?;
        write_u32(&mut out, VERSION)?;
        let meta = Meta {
            model: ModelMeta::from(self.params.config()),
            completed_epochs: self.completed_epochs,
            seed: self.seed,
            adam: AdamMeta {
                beta1: self.opt.config.beta1,
                beta2: self.opt.config.beta2,
                eps: self.opt.config.eps,
                step: self.opt.step,
            },
            has_teacher: self.teacher.is_some(),
        };
        let meta_json = serde_json::to_vec(&meta)?;
        write_u32(&mut out, meta_json.len() as u32)?;
        out.write_all(&meta_json)?;
        write_vocab(&mut out, &self.vocab_src)?;
        write_vocab(&mut out, &self.vocab_tgt)?;

        let teacher_count = self.teacher.as_ref().map(|t| t.len()).unwrap_or(0);
        let count = self.params.len() * 3 + teacher_count;
        write_u32(&mut out, count as u32)?;
        for (name, tensor) in self.params.iter() {
            write_tensor(&mut out, &format!("param.{name}"), tensor)?;
        }
        for (i, m) in self.opt.m.iter().enumerate() {
            write_tensor(&mut out, &format!("adam.m.{}", self.params.name_at(i)), m)?;
        }
        for (i, v) in self.opt.v.iter().enumerate() {
            write_tensor(&mut out, &format!("adam.v.{}", self.params.name_at(i)), v)?;
        }
        if let Some(teacher) = &self.teacher {
            for (name, tensor) in teacher.iter() {
                write_tensor(&mut out, &format!("teacher.{name}"), tensor)?;
            }
        }
        fs::write(path, out).with_context(|| format!("writing checkpoint {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let mut r = io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            bail!("{} is not a seqlab checkpoint (bad magic)", path.display());
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            bail!(
                "checkpoint {} has format version {version}, this build reads version {VERSION}",
                path.display()
            );
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta: Meta = serde_json::from_slice(&meta_buf).context("checkpoint metadata")?;
        let vocab_src = read_vocab(&mut r)?;
        let vocab_tgt = read_vocab(&mut r)?;

        let config = meta.model.to_config();
        let count = read_u32(&mut r)? as usize;
        let mut param_entries = Vec::new();
        let mut m_entries = Vec::new();
        let mut v_entries = Vec::new();
        let mut teacher_entries = Vec::new();
        for _ in 0..count {
            let (name, tensor) = read_tensor(&mut r)?;
            if let Some(rest) = name.strip_prefix("param.") {
                param_entries.push((rest.to_string(), tensor));
            } else if let Some(rest) = name.strip_prefix("adam.m.") {
                m_entries.push((rest.to_string(), tensor));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v_entries.push((rest.to_string(), tensor));
            } else if let Some(rest) = name.strip_prefix("teacher.") {
                teacher_entries.push((rest.to_string(), tensor));
            } else {
                bail!("unknown tensor section {name:?} in checkpoint");
            }
        }
        let params = ModelParams::from_entries(config.clone(), param_entries)?;
        if m_entries.len() != params.len() || v_entries.len() != params.len() {
            bail!("checkpoint optimizer moments do not cover every parameter");
        }
        for (i, (name, _)) in m_entries.iter().enumerate() {
            if name != params.name_at(i) {
                bail!("optimizer moment order mismatch at {name}");
            }
        }
        let opt = AdamState {
            config: AdamConfig { beta1: meta.adam.beta1, beta2: meta.adam.beta2, eps: meta.adam.eps },
            m: m_entries.into_iter().map(|(_, t)| t).collect(),
            v: v_entries.into_iter().map(|(_, t)| t).collect(),
            step: meta.adam.step,
        };
        let teacher = if meta.has_teacher {
            Some(ModelParams::from_entries(config, teacher_entries)?)
        } else if teacher_entries.is_empty() {
            None
        } else {
            bail!("checkpoint carries teacher tensors but metadata says none");
        };
        if vocab_src.len() != params.config().src_vocab
            || vocab_tgt.len() != params.config().tgt_vocab
        {
            bail!(
                "checkpoint vocabulary sizes ({}, {}) disagree with the model ({}, {})",
                vocab_src.len(),
                vocab_tgt.len(),
                params.config().src_vocab,
                params.config().tgt_vocab
            );
        }
        Ok(Checkpoint {
            params,
            opt,
            teacher,
            vocab_src,
            vocab_tgt,
            completed_epochs: meta.completed_epochs,
            seed: meta.seed,
        })
    }
}

/// Load only the frozen parameters of a checkpoint (teacher use).
pub fn load_params(path: &Path) -> Result<ModelParams> {
    Ok(Checkpoint::load(path)?.params)
}

/// Quick structural check used by tests and the grid runner.
pub fn is_checkpoint(path: &Path) -> bool {
    fs::File::open(path)
        .ok()
        .and_then(|mut f| {
            let mut magic = [0u8; 8];
            f.read_exact(&mut magic).ok()?;
            Some(&magic == MAGIC)
        })
        .unwrap_or(false)
}
