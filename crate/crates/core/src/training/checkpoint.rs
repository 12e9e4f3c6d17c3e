//! Binary checkpoint format.
//!
//! ```text
//! "GAIT"  u32 version
//! u64 manifest length, manifest (TOML, UTF-8)
//! u64 record count
//! per record: u32 name length, name (UTF-8), u32 rank, u64 dims[rank],
//!             u64 element count, f64 payload (all little-endian)
//! ```
//!
//! Parameters are stored as `g_st/<name>`, `g_ts/…`, `d_s/…`, `d_t/…`;
//! Adam moments as `adam_g.m/g_st/<name>` and so on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::sampler::DomainSampler;
use super::{Networks, TrainConfig};
use crate::error::{Error, Result};
use crate::networks::{DiscriminatorParams, GeneratorParams, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GAIT";
pub const VERSION: u32 = 1;

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub nets: Networks,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub sampler_s: DomainSampler,
    pub sampler_t: DomainSampler,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    step: u64,
    seed: u64,
    adam_g_t: u64,
    adam_d_t: u64,
    sampler_s: DomainSampler,
    sampler_t: DomainSampler,
    config: TrainConfig,
}

const NETS: [&str; 4] = ["g_st", "g_ts", "d_s", "d_t"];

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    put_u64(buf, t.numel() as u64);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    fn sets(&self) -> [&ParamSet; 4] {
        [
            &self.nets.g_st.params,
            &self.nets.g_ts.params,
            &self.nets.d_s.params,
            &self.nets.d_t.params,
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: VERSION,
            step: self.step,
            seed: self.config.seed,
            adam_g_t: self.adam_g.t,
            adam_d_t: self.adam_d.t,
            sampler_s: self.sampler_s.clone(),
            sampler_t: self.sampler_t.clone(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;

        let mut records: Vec<(String, &Tensor)> = Vec::new();
        for (net, set) in NETS.iter().zip(self.sets()) {
            records.extend(set.iter().map(|(n, t)| (format!("{net}/{n}"), t)));
        }
        for (opt, state, nets) in [("adam_g", &self.adam_g, &NETS[..2]), ("adam_d", &self.adam_d, &NETS[2..])] {
            for (kind, moments) in [("m", &state.m), ("v", &state.v)] {
                for (net, set) in nets.iter().zip(moments) {
                    records.extend(set.iter().map(|(n, t)| (format!("{opt}.{kind}/{net}/{n}"), t)));
                }
            }
        }

        let payload: usize = records.iter().map(|(n, t)| n.len() + 8 * (t.numel() + t.rank() + 2)).sum();
        let mut buf = Vec::with_capacity(32 + text.len() + payload);
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u64(&mut buf, text.len() as u64);
        buf.extend_from_slice(text.as_bytes());
        put_u64(&mut buf, records.len() as u64);
        for (name, t) in &records {
            put_record(&mut buf, name, t);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "unsupported format version: bad magic {magic:?} (expected \"GAIT\" v{VERSION})"
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads v{VERSION})"
            )));
        }
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.version != version || manifest.seed != manifest.config.seed {
            return Err(Error::Checkpoint("manifest disagrees with header".into()));
        }

        let count = r.u64()?;
        let mut nets: [ParamSet; 4] = Default::default();
        let mut moments: [[ParamSet; 4]; 2] = Default::default();
        for _ in 0..count {
            let (name, tensor) = r.record()?;
            let (head, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("malformed record name {name:?}")))?;
            let (slot, param) = match head {
                "adam_g.m" | "adam_d.m" | "adam_g.v" | "adam_d.v" => {
                    let (net, param) = rest
                        .split_once('/')
                        .ok_or_else(|| Error::Checkpoint(format!("malformed record name {name:?}")))?;
                    let kind = usize::from(head.ends_with(".v"));
                    (&mut moments[kind][net_index(net)?], param)
                }
                net => (&mut nets[net_index(net)?], rest),
            };
            slot.insert(param, tensor).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let config = manifest.config;
        let [g_st, g_ts, d_s, d_t] = nets;
        let nets = Networks {
            g_st: GeneratorParams { config: config.generator.clone(), params: g_st },
            g_ts: GeneratorParams { config: config.generator.clone(), params: g_ts },
            d_s: DiscriminatorParams { config: config.discriminator.clone(), params: d_s },
            d_t: DiscriminatorParams { config: config.discriminator.clone(), params: d_t },
        };
        nets.check(config.generator.image_size)
            .map_err(|e| Error::Checkpoint(format!("parameters: {e}")))?;

        let [[m0, m1, m2, m3], [v0, v1, v2, v3]] = moments;
        let adam_g = AdamState { config: config.adam, m: vec![m0, m1], v: vec![v0, v1], t: manifest.adam_g_t };
        let adam_d = AdamState { config: config.adam, m: vec![m2, m3], v: vec![v2, v3], t: manifest.adam_d_t };
        let expected = [&nets.g_st.params, &nets.g_ts.params, &nets.d_s.params, &nets.d_t.params];
        let got = adam_g.m.iter().chain(&adam_d.m).zip(adam_g.v.iter().chain(&adam_d.v));
        for (p, (m, v)) in expected.into_iter().zip(got) {
            let like = p.zeros_like();
            if !same_layout(&like, m) || !same_layout(&like, v) {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
        }

        Ok(Checkpoint {
            step: manifest.step,
            config,
            nets,
            adam_g,
            adam_d,
            sampler_s: manifest.sampler_s,
            sampler_t: manifest.sampler_t,
        })
    }
}

fn same_layout(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
}

fn net_index(net: &str) -> Result<usize> {
    NETS.iter()
        .position(|&n| n == net)
        .ok_or_else(|| Error::Checkpoint(format!("unknown network {net:?}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: wanted {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A u64 length that must also fit in the remaining input.
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: length {v} exceeds remaining input")))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Checkpoint(format!("record {name}: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let n = self.len()?;
        if shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) != Some(n) {
            return Err(Error::Checkpoint(format!("record {name}: shape {shape:?} does not hold {n} values")));
        }
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("record {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = c.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
