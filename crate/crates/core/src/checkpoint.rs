//! Binary checkpoint: every multi-byte field is little-endian.
//!
//! ```text
//! "DFM1" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//! params table | ema table
//! table  = count u32, then per tensor:
//!          name_len u32 | name | rank u32 | dims u32 x rank | f32 x numel
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::datagen::{DatasetQuantiles, NormKind};
use crate::flowmatch::{StartDistribution, TrainConfig};
use crate::network::{Params, UNet, UNetConfig};
use crate::sampler::DepthModel;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DFM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    TruncatedFile { needed: usize, offset: usize, len: usize },
    #[error("{0} unexpected bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// A trained model together with everything needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: UNetConfig,
    pub train: TrainConfig,
    pub quantiles: DatasetQuantiles,
    pub params: Params<f32>,
    pub ema: Params<f32>,
    /// Free-form single-line description of how the generators were seeded.
    pub rng_note: String,
}

impl Checkpoint {
    pub fn network(&self) -> Result<UNet, CheckpointError> {
        let net = UNet::new(self.net.clone()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        for p in [&self.params, &self.ema] {
            net.check_params(p).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        Ok(net)
    }

    pub fn model<'a>(&'a self, net: &'a UNet, use_ema: bool) -> DepthModel<'a> {
        DepthModel {
            net,
            params: if use_ema { &self.ema } else { &self.params },
            quantiles: self.quantiles,
            t_s: self.train.t_s,
            start: self.train.start,
        }
    }

    fn config_text(&self) -> String {
        let (n, t, q) = (&self.net, &self.train, &self.quantiles);
        // `{:?}` on floats prints the shortest string that parses back exactly.
        let lines = [
            format!("net.base_width={}", n.base_width),
            format!("net.depth_levels={}", n.depth_levels),
            format!("net.state_channels={}", n.state_channels),
            format!("net.cond_channels={}", n.cond_channels),
            format!("net.completion_channels={}", n.completion_channels),
            format!("net.time_embed_dim={}", n.time_embed_dim),
            format!("train.batch_size={}", t.batch_size),
            format!("train.learning_rate={:?}", t.learning_rate),
            format!("train.ema_rate={:?}", t.ema_rate),
            format!("train.sigma_min={:?}", t.sigma_min),
            format!("train.t_s={:?}", t.t_s),
            format!("train.steps={}", t.steps),
            format!("train.seed={}", t.seed),
            format!("train.start={}", t.start.name()),
            format!("train.log_every={}", t.log_every),
            format!("quantiles.d2={:?}", q.d2),
            format!("quantiles.d98={:?}", q.d98),
            format!("quantiles.kind={}", q.kind.name()),
            format!("rng_note={}", self.rng_note),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        if self.rng_note.contains('\n') {
            return Err(CheckpointError::Malformed("rng note must be a single line".into()));
        }
        let config = self.config_text();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, len_u32(config.len())?);
        out.extend_from_slice(config.as_bytes());
        for table in [&self.params, &self.ema] {
            put_u32(&mut out, len_u32(table.len())?);
            for (name, t) in table.entries() {
                put_u32(&mut out, len_u32(name.len())?);
                out.extend_from_slice(name.as_bytes());
                put_u32(&mut out, len_u32(t.rank())?);
                for &d in t.shape() {
                    put_u32(&mut out, len_u32(d)?);
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?
            .to_string();
        let params = r.table()?;
        let ema = r.table()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        let fields = ConfigBlock::parse(&config)?;
        let ckpt = Self {
            net: UNetConfig {
                base_width: fields.num("net.base_width")?,
                depth_levels: fields.num("net.depth_levels")?,
                state_channels: fields.num("net.state_channels")?,
                cond_channels: fields.num("net.cond_channels")?,
                completion_channels: fields.num("net.completion_channels")?,
                time_embed_dim: fields.num("net.time_embed_dim")?,
            },
            train: TrainConfig {
                batch_size: fields.num("train.batch_size")?,
                learning_rate: fields.num("train.learning_rate")?,
                ema_rate: fields.num("train.ema_rate")?,
                sigma_min: fields.num("train.sigma_min")?,
                t_s: fields.num("train.t_s")?,
                steps: fields.num("train.steps")?,
                seed: fields.num("train.seed")?,
                start: StartDistribution::parse(fields.get("train.start")?)
                    .ok_or_else(|| CheckpointError::Malformed("unknown start distribution".into()))?,
                log_every: fields.num("train.log_every")?,
            },
            quantiles: DatasetQuantiles::new(
                fields.num("quantiles.d2")?,
                fields.num("quantiles.d98")?,
                NormKind::parse(fields.get("quantiles.kind")?)
                    .ok_or_else(|| CheckpointError::Malformed("unknown quantile kind".into()))?,
            )
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
            params,
            ema,
            rng_note: fields.get("rng_note")?.to_string(),
        };
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Malformed(format!("length {n} does not fit in 32 bits")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::TruncatedFile {
                needed: n,
                offset: self.pos,
                len: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn table(&mut self) -> Result<Params<f32>, CheckpointError> {
        let count = self.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
            let data = self
                .take(numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            entries.push((name, t));
        }
        Ok(Params::new(entries))
    }
}

struct ConfigBlock(BTreeMap<String, String>);

impl ConfigBlock {
    fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("config line without '=': {line}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Self(map))
    }

    fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Malformed(format!("config block lacks {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| CheckpointError::Malformed(format!("{key}={v} does not parse")))
    }
}
