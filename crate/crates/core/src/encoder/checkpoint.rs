//! Checkpoint files: a UTF-8 key-value header describing the encoder config,
//! terminated by a line `end`, followed by every parameter as little-endian
//! `f64` in declaration order.
//!
//! ```text
//! alpkd-checkpoint 1
//! num_layers=4
//! ...
//! scalars=<total parameter count>
//! end
//! <scalars * 8 bytes>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &str = "alpkd-checkpoint 1";

fn header(config: &EncoderConfig, scalars: usize) -> String {
    format!(
        "{MAGIC}\nnum_layers={}\nhidden_dim={}\nnum_heads={}\nffn_dim={}\nvocab_size={}\n\
         max_seq_len={}\nnum_classes={}\ndropout_rate={:?}\nlayer_norm_eps={:?}\ninit_std={:?}\n\
         scalars={scalars}\nend\n",
        config.num_layers,
        config.hidden_dim,
        config.num_heads,
        config.ffn_dim,
        config.vocab_size,
        config.max_seq_len,
        config.num_classes,
        config.dropout_rate,
        config.layer_norm_eps,
        config.init_std,
    )
}

pub fn encode<T: Scalar>(encoder: &Encoder<T>) -> Vec<u8> {
    let params = encoder.params();
    let mut bytes = header(encoder.config(), params.num_scalars()).into_bytes();
    for id in params.ids() {
        for &x in params.value(id).data() {
            bytes.extend_from_slice(&x.to_f64c().to_le_bytes());
        }
    }
    bytes
}

pub fn save_checkpoint<T: Scalar>(encoder: &Encoder<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(encoder)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Encoder<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and rejects any checkpoint whose declared config differs from
/// `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(
    path: impl AsRef<Path>,
    expected: &EncoderConfig,
) -> Result<Encoder<T>> {
    let enc = load_checkpoint::<T>(path)?;
    if enc.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint declares {:?}, expected {:?}",
            enc.config(),
            expected
        )));
    }
    Ok(enc)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Encoder<T>> {
    let mut offset = 0;
    let mut fields = BTreeMap::new();
    let mut first = true;
    loop {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(offset, "header ends before `end` line"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| format_err(offset, "header is not UTF-8"))?;
        let line_offset = offset;
        offset += nl + 1;
        if first {
            if line != MAGIC {
                return Err(format_err(line_offset, format!("bad magic line {line:?}")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(line_offset, format!("malformed header line {line:?}")))?;
        if fields.insert(k.to_string(), (v.to_string(), line_offset)).is_some() {
            return Err(format_err(line_offset, format!("duplicate key {k}")));
        }
    }

    let take = |key: &str| -> Result<(String, usize)> {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| format_err(offset, format!("header missing key {key}")))
    };
    let int = |key: &str| -> Result<usize> {
        let (v, at) = take(key)?;
        v.parse()
            .map_err(|_| format_err(at, format!("{key}={v} is not an integer")))
    };
    let float = |key: &str| -> Result<f64> {
        let (v, at) = take(key)?;
        v.parse()
            .map_err(|_| format_err(at, format!("{key}={v} is not a number")))
    };
    let config = EncoderConfig {
        num_layers: int("num_layers")?,
        hidden_dim: int("hidden_dim")?,
        num_heads: int("num_heads")?,
        ffn_dim: int("ffn_dim")?,
        vocab_size: int("vocab_size")?,
        max_seq_len: int("max_seq_len")?,
        num_classes: int("num_classes")?,
        dropout_rate: float("dropout_rate")?,
        layer_norm_eps: float("layer_norm_eps")?,
        init_std: float("init_std")?,
    };
    let declared = int("scalars")?;
    if fields.len() != 11 {
        return Err(format_err(0, "header carries unknown keys"));
    }
    config.validate()?;
    if declared != config.num_scalars() {
        return Err(Error::ConfigMismatch(format!(
            "header declares {declared} scalars but its config implies {}",
            config.num_scalars()
        )));
    }

    let payload = &bytes[offset..];
    let want = declared * 8;
    if payload.len() < want {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: {} of {want} bytes", payload.len()),
        ));
    }
    if payload.len() > want {
        return Err(format_err(offset + want, "trailing bytes after payload"));
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))));
    let mut params = ParamStore::new();
    for (name, shape) in config.param_layout() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = values.by_ref().take(n).collect();
        params.add(name, Tensor::new(shape, data)?);
    }
    Encoder::from_parts(config, params)
}
