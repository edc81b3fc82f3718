//! Checkpoint container: an 8-byte magic, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then every parameter block
//! as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::layers::{Layer, LayerSpec, Mlp};
use super::model::{EnergyModel, Generator};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JRFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    blocks: Vec<BlockHeader>,
}

/// Self-describing binary file of named `f64` blocks plus JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub blocks: Vec<Block>,
}

fn format_err(offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| format_err(self.offset, format!("truncated {what}: {e}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

impl Container {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockHeader {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for b in &self.blocks {
            for v in &b.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Counting { inner: r, offset: 0 };
        let mut magic = [0u8; 8];
        r.exact(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let mut u32b = [0u8; 4];
        r.exact(&mut u32b, "version")?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(format_err(8, format!("unsupported version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.exact(&mut u64b, "header length")?;
        let len = u64::from_le_bytes(u64b);
        if len > (1 << 30) {
            return Err(format_err(12, format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        let header_at = r.offset;
        r.exact(&mut json, "header")?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| format_err(header_at, format!("invalid header: {e}")))?;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for bh in header.blocks {
            let n: usize = bh.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.exact(&mut raw, &bh.name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push(Block {
                name: bh.name,
                shape: bh.shape,
                data,
            });
        }
        let mut probe = [0u8; 1];
        if r.inner.read(&mut probe)? != 0 {
            return Err(format_err(r.offset, "trailing bytes after last block"));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::read_from(BufReader::new(File::open(path)?))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }
}

fn mlp_blocks(net: &Mlp) -> Vec<Block> {
    let mut out = Vec::new();
    let mut push = |name: String, t: &Tensor| {
        out.push(Block {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
    };
    for (i, l) in net.layers.iter().enumerate() {
        match l {
            Layer::Dense(d) => {
                push(format!("layers.{i}.weight"), &d.weight);
                if let Some(g) = &d.gain {
                    push(format!("layers.{i}.gain"), g);
                }
                push(format!("layers.{i}.bias"), &d.bias);
            }
            Layer::BatchNorm(b) => {
                push(format!("layers.{i}.gamma"), &b.gamma);
                push(format!("layers.{i}.beta"), &b.beta);
                let dim = b.dim();
                push(
                    format!("layers.{i}.running_mean"),
                    &Tensor::new([dim], b.running_mean.clone()).unwrap(),
                );
                push(
                    format!("layers.{i}.running_var"),
                    &Tensor::new([dim], b.running_var.clone()).unwrap(),
                );
            }
        }
    }
    out
}

fn mlp_from_blocks(specs: &[LayerSpec], blocks: &[Block]) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Mlp::from_specs(specs, &mut rng)?;
    let mut it = blocks.iter();
    let mut fill = |dst: &mut [f64], shape: &[usize]| -> Result<()> {
        let b = it
            .next()
            .ok_or_else(|| Error::Data("checkpoint has fewer blocks than its layers need".into()))?;
        if b.shape != shape {
            return Err(Error::dim("checkpoint block", &b.shape, shape));
        }
        dst.copy_from_slice(&b.data);
        Ok(())
    };
    for l in &mut net.layers {
        match l {
            Layer::Dense(d) => {
                let s = d.weight.shape().to_vec();
                fill(d.weight.data_mut(), &s)?;
                if let Some(g) = &mut d.gain {
                    let s = g.shape().to_vec();
                    fill(g.data_mut(), &s)?;
                }
                let s = d.bias.shape().to_vec();
                fill(d.bias.data_mut(), &s)?;
            }
            Layer::BatchNorm(b) => {
                let s = [b.dim()];
                fill(b.gamma.data_mut(), &s)?;
                fill(b.beta.data_mut(), &s)?;
                fill(&mut b.running_mean, &s)?;
                fill(&mut b.running_var, &s)?;
            }
        }
    }
    if it.next().is_some() {
        return Err(Error::Data("checkpoint has more blocks than its layers need".into()));
    }
    Ok(net)
}

#[derive(Serialize, Deserialize)]
struct EnergyMeta {
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    layers: Vec<LayerSpec>,
    sigma: f64,
}

impl EnergyModel {
    pub fn to_container(&self) -> Container {
        Container {
            kind: "energy_model".into(),
            meta: serde_json::to_value(EnergyMeta {
                layers: self.net.specs(),
            })
            .expect("specs serialize"),
            blocks: mlp_blocks(&self.net),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("energy_model")?;
        let meta: EnergyMeta = serde_json::from_value(c.meta.clone())?;
        Ok(EnergyModel {
            net: mlp_from_blocks(&meta.layers, &c.blocks)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl Generator {
    pub fn to_container(&self) -> Container {
        Container {
            kind: "generator".into(),
            meta: serde_json::to_value(GeneratorMeta {
                layers: self.net.specs(),
                sigma: self.sigma,
            })
            .expect("specs serialize"),
            blocks: mlp_blocks(&self.net),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("generator")?;
        let meta: GeneratorMeta = serde_json::from_value(c.meta.clone())?;
        if !(meta.sigma > 0.0) {
            return Err(Error::Config(format!(
                "generator sigma must be positive, got {}",
                meta.sigma
            )));
        }
        Ok(Generator {
            net: mlp_from_blocks(&meta.layers, &c.blocks)?,
            sigma: meta.sigma,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
