//! Binary checkpoint format.
//!
//! ```text
//! "VITPRN01"                      8 bytes
//! image_size patch_size d L H m C dtype   u32 LE each
//! repeated until EOF:
//!   name_len u16 | name bytes | rank u8 | dims u32[rank] | values LE
//! ```
//!
//! `dtype` is [`DTYPE_F32`] or [`DTYPE_F64`]. Per-head widths of each block
//! are stored as the rank-1 tensor `blocks.{l}.attn.head_dims`, so compacted
//! models round-trip too.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::VitConfig;
use super::weights::{BlockWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::{HeadLayout, Tensor};

pub const MAGIC: &[u8; 8] = b"VITPRN01";
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_F64: u32 = 2;

fn named(model: &ModelWeights) -> Vec<(String, Tensor)> {
    let mut out = vec![
        ("patch_embed.weight".to_string(), model.patch_weight.clone()),
        ("patch_embed.bias".to_string(), model.patch_bias.clone()),
        ("cls_token".to_string(), model.cls_token.clone()),
        ("pos_embed".to_string(), model.pos_embed.clone()),
    ];
    for (l, b) in model.blocks.iter().enumerate() {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.push((p("norm1.weight"), b.norm1_gain.clone()));
        out.push((p("norm1.bias"), b.norm1_bias.clone()));
        out.push((
            p("attn.head_dims"),
            Tensor::vector(b.layout.head_dims.iter().map(|&v| v as f64).collect()),
        ));
        out.push((p("attn.qkv.weight"), b.qkv_weight.clone()));
        if let Some(bias) = &b.qkv_bias {
            out.push((p("attn.qkv.bias"), bias.clone()));
        }
        out.push((p("attn.proj.weight"), b.proj_weight.clone()));
        out.push((p("attn.proj.bias"), b.proj_bias.clone()));
        out.push((p("norm2.weight"), b.norm2_gain.clone()));
        out.push((p("norm2.bias"), b.norm2_bias.clone()));
        out.push((p("mlp.fc1.weight"), b.fc1_weight.clone()));
        out.push((p("mlp.fc1.bias"), b.fc1_bias.clone()));
        out.push((p("mlp.fc2.weight"), b.fc2_weight.clone()));
        out.push((p("mlp.fc2.bias"), b.fc2_bias.clone()));
    }
    out.push(("norm.weight".to_string(), model.norm_gain.clone()));
    out.push(("norm.bias".to_string(), model.norm_bias.clone()));
    out.push(("head.weight".to_string(), model.head_weight.clone()));
    out.push(("head.bias".to_string(), model.head_bias.clone()));
    out
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(model: &ModelWeights, mut w: W) -> Result<()> {
    let c = &model.config;
    w.write_all(MAGIC)?;
    for (name, v) in [
        ("image_size", c.image_size),
        ("patch_size", c.patch_size),
        ("embed_dim", c.embed_dim),
        ("num_blocks", c.num_blocks),
        ("num_heads", c.num_heads),
        ("mlp_hidden", c.mlp_hidden),
        ("num_classes", c.num_classes),
    ] {
        w.write_all(&to_u32(v, name)?.to_le_bytes())?;
    }
    w.write_all(&DTYPE_F64.to_le_bytes())?;
    for (name, t) in named(model) {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        w.write_all(&[rank])?;
        for &dim in t.shape() {
            w.write_all(&to_u32(dim, "dim")?.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(model, BufWriter::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a checkpoint held in memory.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
    };
    let mut header = [0usize; 7];
    for h in header.iter_mut() {
        *h = cur.u32("header")? as usize;
    }
    let dtype = cur.u32("header")?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    while !cur.at_end() {
        let len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n * width, &name)?;
        let data = if dtype == DTYPE_F64 {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        };
        tensors.insert(name, Tensor::new(&dims, data)?);
    }

    let qkv_bias = tensors.contains_key("blocks.0.attn.qkv.bias");
    let config = VitConfig {
        image_size: header[0],
        patch_size: header[1],
        embed_dim: header[2],
        num_blocks: header[3],
        num_heads: header[4],
        mlp_hidden: header[5],
        num_classes: header[6],
        qkv_bias,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    assemble(config, tensors)
}

fn assemble(config: VitConfig, mut tensors: HashMap<String, Tensor>) -> Result<ModelWeights> {
    let mut take = |name: &str| -> Result<Tensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let patch_weight = take("patch_embed.weight")?;
    let patch_bias = take("patch_embed.bias")?;
    let cls_token = take("cls_token")?;
    let pos_embed = take("pos_embed")?;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for l in 0..config.num_blocks {
        let p = |s: &str| format!("blocks.{l}.{s}");
        let head_dims = take(&p("attn.head_dims"))?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("block {l}: bad head width {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(BlockWeights {
            norm1_gain: take(&p("norm1.weight"))?,
            norm1_bias: take(&p("norm1.bias"))?,
            qkv_weight: take(&p("attn.qkv.weight"))?,
            qkv_bias: if config.qkv_bias {
                Some(take(&p("attn.qkv.bias"))?)
            } else {
                None
            },
            proj_weight: take(&p("attn.proj.weight"))?,
            proj_bias: take(&p("attn.proj.bias"))?,
            norm2_gain: take(&p("norm2.weight"))?,
            norm2_bias: take(&p("norm2.bias"))?,
            fc1_weight: take(&p("mlp.fc1.weight"))?,
            fc1_bias: take(&p("mlp.fc1.bias"))?,
            fc2_weight: take(&p("mlp.fc2.weight"))?,
            fc2_bias: take(&p("mlp.fc2.bias"))?,
            layout: HeadLayout::new(head_dims),
        });
    }
    let model = ModelWeights {
        patch_weight,
        patch_bias,
        cls_token,
        pos_embed,
        blocks,
        norm_gain: take("norm.weight")?,
        norm_bias: take("norm.bias")?,
        head_weight: take("head.weight")?,
        head_bias: take("head.bias")?,
        config,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    model.validate()?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

/// Loads a checkpoint and checks its header against `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &VitConfig) -> Result<ModelWeights> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(Error::dim(
            "load_checkpoint",
            format!("file holds {:?}, expected {:?}", model.config, expected),
        ));
    }
    Ok(model)
}
