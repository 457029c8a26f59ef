//! Binary checkpoint container.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic        8 bytes   "SDBCKPT\0"
//! version      u32       1
//! config_len   u32       byte length of the config block
//! config       UTF-8     `key=value` lines (see `ModelConfig` fields below)
//! vocab_count  u32       number of vocabulary tokens (0 = none stored)
//! vocab        repeated  u32 byte length, UTF-8 token
//! tensor_count u32
//! tensors      repeated  u32 name length, UTF-8 name,
//!                        u32 rank, u64 × rank extents,
//!                        f64 × product(extents) row-major values
//! ```
//!
//! Config keys: `num_layers`, `num_heads`, `d_model`, `d_ff`, `vocab_size`,
//! `max_len`, `num_classes`, `attention` (`full` or `sparse`) and, for
//! sparse models, `global_tokens`, `window`, `random_keys`, `mask_seed`.
//! Tensor names and order follow `EncoderWeights::named`. Values are stored
//! as raw IEEE-754 bits, so save → load is lossless.

use std::fs;
use std::path::Path;

use crate::attention::SparsityConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{check_shapes, AttentionMode, ModelConfig, Parameters};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDBCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Option<Vocabulary>,
    pub params: Parameters,
}

pub fn config_to_text(config: &ModelConfig) -> String {
    let mut out = format!(
        "num_layers={}\nnum_heads={}\nd_model={}\nd_ff={}\nvocab_size={}\nmax_len={}\nnum_classes={}\n",
        config.num_layers,
        config.num_heads,
        config.d_model,
        config.d_ff,
        config.vocab_size,
        config.max_len,
        config.num_classes
    );
    match config.attention {
        AttentionMode::Full => out.push_str("attention=full\n"),
        AttentionMode::Sparse(s) => out.push_str(&format!(
            "attention=sparse\nglobal_tokens={}\nwindow={}\nrandom_keys={}\nmask_seed={}\n",
            s.global_tokens, s.window, s.random_keys, s.seed
        )),
    }
    out
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
        fields.insert(k, v);
    }
    let num = |key: &str| -> Result<u64> {
        fields
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("config missing {key}")))?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("config {key}: {e}")))
    };
    let attention = match fields.get("attention").copied() {
        Some("full") => AttentionMode::Full,
        Some("sparse") => AttentionMode::Sparse(SparsityConfig {
            global_tokens: num("global_tokens")? as usize,
            window: num("window")? as usize,
            random_keys: num("random_keys")? as usize,
            seed: num("mask_seed")?,
        }),
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown attention mode {other:?}"
            )))
        }
    };
    let config = ModelConfig {
        num_layers: num("num_layers")? as usize,
        num_heads: num("num_heads")? as usize,
        d_model: num("d_model")? as usize,
        d_ff: num("d_ff")? as usize,
        vocab_size: num("vocab_size")? as usize,
        max_len: num("max_len")? as usize,
        num_classes: num("num_classes")? as usize,
        attention,
    };
    config.validate()?;
    Ok(config)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &config_to_text(&self.config));
        match &self.vocab {
            None => out.extend_from_slice(&0u32.to_le_bytes()),
            Some(v) => {
                out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                for t in v.tokens() {
                    put_str(&mut out, t);
                }
            }
        }
        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = config_from_text(&r.string()?)?;
        let vocab_count = r.u32()? as usize;
        let vocab = if vocab_count == 0 {
            None
        } else {
            let tokens = (0..vocab_count)
                .map(|_| r.string())
                .collect::<Result<Vec<_>>>()?;
            let mut text = tokens.join("\n");
            text.push('\n');
            Some(Vocabulary::from_file_string(&text)?)
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?
                .with_requires_grad(true);
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }

        let template = crate::model::init_params(&config, 0)?;
        let expected: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        if expected.len() != tensors.len()
            || expected.iter().zip(&tensors).any(|(e, (n, _))| e != n)
        {
            return Err(Error::Checkpoint(
                "tensor names do not match the stored config".into(),
            ));
        }
        let mut params = template;
        for (slot, (_, t)) in params.items_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        check_shapes(&params, &config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
