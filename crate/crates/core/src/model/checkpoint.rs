//! Binary checkpoint format.
//!
//! Little-endian: 4-byte magic (`ULDC` model, `ULDA` assistant), `u32`
//! version, `u32`-prefixed JSON config block, `u32` tensor count, then per
//! tensor `u16` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64),
//! `u8` rank, `u64` dims and the raw values.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::lora::{LayerAdapters, LoraAdapter, ADAPTED};
use super::params::{LayerParams, LAYER_FIELDS};
use super::{AssistantModel, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"ULDC";
pub const ASSISTANT_MAGIC: &[u8; 4] = b"ULDA";
pub const FORMAT_VERSION: u32 = 1;

/// Config block of an assistant checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssistantHeader {
    pub k: usize,
    pub rank: usize,
    pub alpha: f64,
    pub target: ModelConfig,
}

pub enum Checkpoint<T: Scalar> {
    Model(ModelParams<T>),
    Assistant {
        header: AssistantHeader,
        tensors: Vec<(String, Tensor<T>)>,
    },
}

fn encode<T: Scalar>(magic: &[u8; 4], config: &str, tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<X>(&self, at: usize, msg: impl Into<String>) -> Result<X> {
        Err(Error::Format {
            offset: at as u64,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(self.pos, format!("truncated: wanted {n} bytes"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

type Decoded<T> = ([u8; 4], String, Vec<(String, Tensor<T>)>);

fn decode<T: Scalar>(buf: &[u8]) -> Result<Decoded<T>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != MODEL_MAGIC && &magic != ASSISTANT_MAGIC {
        return r.fail(0, format!("bad magic {magic:?}"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let len = r.u32()? as usize;
    let at = r.pos;
    let config = match std::str::from_utf8(r.take(len)?) {
        Ok(s) => s.to_string(),
        Err(_) => return r.fail(at, "config block is not UTF-8"),
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let at = r.pos;
        let name = match std::str::from_utf8(r.take(name_len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail(at, "tensor name is not UTF-8"),
        };
        let at = r.pos;
        let dtype = r.u8()?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => return r.fail(at, format!("unknown dtype {other}")),
        };
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(width).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match dtype {
                0 => T::of(f32::read_le(c) as f64),
                _ => T::of(f64::read_le(c)),
            })
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return r.fail(r.pos, "trailing bytes after last tensor");
    }
    Ok((magic, config, tensors))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format {
        offset: 12,
        msg: format!("config block: {e}"),
    }
}

pub fn model_to_bytes<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_string(&params.config)?;
    Ok(encode(MODEL_MAGIC, &config, &params.named_tensors()))
}

pub fn assistant_to_bytes<T: Scalar>(assistant: &AssistantModel<T>) -> Result<Vec<u8>> {
    let header = AssistantHeader {
        k: assistant.k,
        rank: assistant.rank,
        alpha: assistant.alpha,
        target: assistant.target.config.clone(),
    };
    let config = serde_json::to_string(&header)?;
    Ok(encode(ASSISTANT_MAGIC, &config, &assistant.named_tensors()))
}

pub fn checkpoint_from_bytes<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let (magic, config, tensors) = decode::<T>(buf)?;
    if &magic == MODEL_MAGIC {
        let config: ModelConfig = serde_json::from_str(&config).map_err(json_err)?;
        Ok(Checkpoint::Model(assemble_model(config, tensors)?))
    } else {
        let header: AssistantHeader = serde_json::from_str(&config).map_err(json_err)?;
        Ok(Checkpoint::Assistant { header, tensors })
    }
}

fn mismatch<X>(msg: String) -> Result<X> {
    Err(Error::Format { offset: 0, msg })
}

fn assemble_model<T: Scalar>(
    config: ModelConfig,
    tensors: Vec<(String, Tensor<T>)>,
) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut it = tensors.into_iter();
    let mut next = |expect: &str, shape: &[usize]| -> Result<Tensor<T>> {
        match it.next() {
            Some((name, t)) if name == expect && t.shape() == shape => Ok(t),
            Some((name, t)) => mismatch(format!(
                "expected {expect} {shape:?}, found {name} {:?}",
                t.shape()
            )),
            None => mismatch(format!("missing tensor {expect}")),
        }
    };
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let tok_embed = next("tok_embed", &[v, d])?;
    let pos_embed = if config.rope {
        None
    } else {
        Some(next("pos_embed", &[config.max_seq_len, d])?)
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let shapes: [&[usize]; 8] = [&[d], &[d, d], &[d, d], &[d, d], &[d, d], &[d], &[d, f], &[f, d]];
        let mut ts = Vec::with_capacity(8);
        for (name, shape) in LAYER_FIELDS.iter().zip(shapes) {
            ts.push(next(&format!("layers.{i}.{name}"), shape)?);
        }
        let mut ts = ts.into_iter();
        let mut n = || ts.next().expect("eight tensors");
        layers.push(LayerParams {
            attn_norm: n(),
            wq: n(),
            wk: n(),
            wv: n(),
            wo: n(),
            mlp_norm: n(),
            w_up: n(),
            w_down: n(),
        });
    }
    let final_norm = next("final_norm", &[d])?;
    let lm_head = next("lm_head", &[d, v])?;
    if let Some((name, _)) = it.next() {
        return mismatch(format!("unexpected tensor {name}"));
    }
    Ok(ModelParams {
        config,
        tok_embed,
        pos_embed,
        layers,
        final_norm,
        lm_head,
    })
}

/// Attach stored adapters to the target they were trained against.
pub fn attach_assistant<T: Scalar>(
    header: AssistantHeader,
    tensors: Vec<(String, Tensor<T>)>,
    target: Arc<ModelParams<T>>,
) -> Result<AssistantModel<T>> {
    if header.target != target.config {
        return Err(Error::Contract("assistant checkpoint was built for a different target".into()));
    }
    if header.k == 0 || header.k >= target.config.n_layers || header.rank == 0 {
        return mismatch(format!("invalid assistant header {header:?}"));
    }
    let (d, f, r) = (target.config.d_model, target.config.d_ff, header.rank);
    let dims = [(d, d), (d, d), (d, d), (d, d), (d, f), (f, d)];
    let mut it = tensors.into_iter();
    let mut layers = Vec::with_capacity(header.k);
    for i in 0..header.k {
        let mut ads = Vec::with_capacity(6);
        for (name, &(din, dout)) in ADAPTED.iter().zip(&dims) {
            let mut get = |suffix: &str, shape: [usize; 2]| -> Result<Tensor<T>> {
                let expect = format!("layers.{i}.{name}.{suffix}");
                match it.next() {
                    Some((n, t)) if n == expect && t.shape() == shape => Ok(t.with_grad(true)),
                    Some((n, _)) => mismatch(format!("expected {expect}, found {n}")),
                    None => mismatch(format!("missing tensor {expect}")),
                }
            };
            let a = get("lora_a", [din, r])?;
            let b = get("lora_b", [r, dout])?;
            ads.push(LoraAdapter {
                rank: r,
                alpha: header.alpha,
                a,
                b,
            });
        }
        let adapters: [LoraAdapter<T>; 6] = ads.try_into().expect("six adapters");
        layers.push(LayerAdapters { adapters });
    }
    if let Some((name, _)) = it.next() {
        return mismatch(format!("unexpected tensor {name}"));
    }
    Ok(AssistantModel {
        target,
        k: header.k,
        rank: header.rank,
        alpha: header.alpha,
        layers,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_model<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &model_to_bytes(params)?)
}

pub fn save_assistant<T: Scalar>(assistant: &AssistantModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &assistant_to_bytes(assistant)?)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Load a model checkpoint; tensors come back frozen.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    match load_checkpoint(path)? {
        Checkpoint::Model(m) => Ok(m),
        Checkpoint::Assistant { .. } => mismatch("expected a model checkpoint, found an assistant".into()),
    }
}

pub fn load_assistant<T: Scalar>(
    path: impl AsRef<Path>,
    target: Arc<ModelParams<T>>,
) -> Result<AssistantModel<T>> {
    match load_checkpoint(path)? {
        Checkpoint::Assistant { header, tensors } => attach_assistant(header, tensors, target),
        Checkpoint::Model(_) => mismatch("expected an assistant checkpoint, found a model".into()),
    }
}
