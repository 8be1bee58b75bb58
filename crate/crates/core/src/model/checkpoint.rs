//! Binary checkpoints: `"SPMX"`, format version, `K B C P` as u32 and the
//! concentration scale as f64, then named tensor blocks until end of file.
//! Each block is a u32 name length, the UTF-8 name, a u32 rank, u32 dims
//! and little-endian f64 data.

use std::collections::BTreeMap;
use std::path::Path;

use super::{block_name, ConvBn, DecoderParams, EncoderParams, Model, ModelConfig, BODY_BLOCKS};
use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

const MAGIC: &[u8; 4] = b"SPMX";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_block(w: &mut ByteWriter, name: &str, t: &Tensor) -> Result<()> {
    w.len_u32(name.len())?;
    w.bytes(name.as_bytes());
    w.len_u32(t.rank())?;
    for &d in t.shape() {
        w.len_u32(d)?;
    }
    w.f64s(t.data());
    Ok(())
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for d in [c.k, c.bands, c.hidden_channels, c.patch_size] {
        w.len_u32(d)?;
    }
    w.f64(c.concentration_scale);
    for (name, t) in model.named_tensors() {
        put_block(&mut w, &name, t)?;
    }
    for (i, st) in model.encoder.stats().into_iter().enumerate() {
        let p = block_name(i);
        let n = st.channels();
        put_block(&mut w, &format!("{p}.running_mean"), &Tensor::new([n], st.mean.clone())?)?;
        put_block(&mut w, &format!("{p}.running_var"), &Tensor::new([n], st.var.clone())?)?;
    }
    Ok(w.buf)
}

struct Blocks {
    map: BTreeMap<String, (u64, Tensor)>,
    end: u64,
}

impl Blocks {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let (offset, t) = self.map.remove(name).ok_or_else(|| Error::Format {
            offset: self.end,
            message: format!("missing tensor '{name}'"),
        })?;
        if t.shape() != shape {
            return Err(Error::Format {
                offset,
                message: format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(t)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"SPMX\""),
        });
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let k = r.u32("k")? as usize;
    let b = r.u32("bands")? as usize;
    let c = r.u32("hidden channels")? as usize;
    let p = r.u32("patch size")? as usize;
    let at = r.offset();
    let s = r.f64("concentration scale")?;

    let mut map = BTreeMap::new();
    while !r.at_end() {
        let start = r.offset();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.fail(format!("tensor '{name}' is too large")))?;
        let data = r.f64s(count, &name)?;
        if map.insert(name.clone(), (start, Tensor::new(dims, data)?)).is_some() {
            return Err(Error::Format {
                offset: start,
                message: format!("duplicate tensor '{name}'"),
            });
        }
    }
    let mut blocks = Blocks { map, end: r.offset() };

    let d = blocks
        .map
        .get("dec.w1")
        .map(|(_, t)| t.shape()[0])
        .ok_or_else(|| Error::Format {
            offset: blocks.end,
            message: "missing tensor 'dec.w1'".into(),
        })?;
    let config = ModelConfig {
        k,
        bands: b,
        hidden_channels: c,
        patch_size: p,
        concentration_scale: s,
        decoder_hidden: d,
    };
    config.validate().map_err(|e| Error::Format {
        offset: at,
        message: e.to_string(),
    })?;

    let mut conv_bn = |i: usize, c_in: usize| -> Result<ConvBn> {
        let pfx = block_name(i);
        Ok(ConvBn {
            kernel: blocks.take(&format!("{pfx}.kernel"), &[c, c_in, 3, 3])?,
            bias: blocks.take(&format!("{pfx}.bias"), &[c])?,
            gamma: blocks.take(&format!("{pfx}.gamma"), &[c])?,
            beta: blocks.take(&format!("{pfx}.beta"), &[c])?,
            stats: RunningStats {
                mean: blocks.take(&format!("{pfx}.running_mean"), &[c])?.into_data(),
                var: blocks.take(&format!("{pfx}.running_var"), &[c])?.into_data(),
                momentum: RunningStats::new(0).momentum,
            },
        })
    };
    let stem = conv_bn(0, b)?;
    let body = (1..=BODY_BLOCKS).map(|i| conv_bn(i, c)).collect::<Result<Vec<_>>>()?;
    let encoder = EncoderParams {
        stem,
        body,
        head_kernel: blocks.take("enc.head.kernel", &[k, c, 1, 1])?,
        head_bias: blocks.take("enc.head.bias", &[k])?,
        attention_kernel: blocks.take("enc.attention.kernel", &[1, 2, 3, 3])?,
        attention_bias: blocks.take("enc.attention.bias", &[1])?,
    };
    let decoder = DecoderParams {
        w1: blocks.take("dec.w1", &[d, k])?,
        b1: blocks.take("dec.b1", &[d])?,
        w2: blocks.take("dec.w2", &[d, d])?,
        b2: blocks.take("dec.b2", &[d])?,
        mu_w: blocks.take("dec.mu.w", &[b, d])?,
        mu_b: blocks.take("dec.mu.b", &[b])?,
        sigma_w: blocks.take("dec.sigma.w", &[b, d])?,
        sigma_b: blocks.take("dec.sigma.b", &[b])?,
    };
    if let Some((name, (offset, _))) = blocks.map.iter().next() {
        return Err(Error::Format {
            offset: *offset,
            message: format!("unexpected tensor '{name}'"),
        });
    }
    Ok(Model {
        config,
        encoder,
        decoder,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    model_from_bytes(&std::fs::read(path)?)
}
