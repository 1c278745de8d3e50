//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DVAE"  u32 version
//! u32 config_len, config text (UTF-8, the flat key = value format)
//! u64 step, u64 prior_step
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, rank × u32 dims, numel × f32
//! ```
//!
//! Tensor names are prefixed by section: `model/`, `codebook/`, `adam/m/`,
//! `adam/v/`, `prior/`, `prior_adam/m/`, `prior_adam/v/`.

use std::collections::HashMap;
use std::path::Path;

use dualvae_autodiff::{Adam, AdamConfig, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::networks::DualVae;
use crate::prior::Prior;

pub const MAGIC: &[u8; 4] = b"DVAE";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub prior_step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.prior_step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. Never panics on malformed input.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let config_text = r.string()?;
        let step = r.u64()?;
        let prior_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name = r.string()?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                if d == 0 {
                    return Err(Error::Checkpoint(format!("tensor `{name}` has a zero extent")));
                }
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
                shape.push(d);
            }
            let bytes_needed = numel
                .checked_mul(4)
                .filter(|&b| b <= r.remaining())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` payload is truncated")))?;
            let payload = r.take(bytes_needed)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config_text,
            step,
            prior_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.config_text)
    }
}

/// Everything a run needs to resume or generate.
#[derive(Clone)]
pub struct Bundle {
    pub config: TrainConfig,
    pub model: DualVae<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub prior: Option<(Prior<f32>, Adam<f32>)>,
}

fn put_store(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>) {
    for (_, name, t) in store.iter() {
        out.push((format!("{prefix}{name}"), t.clone()));
    }
}

fn put_adam(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>, adam: &Adam<f32>) {
    for (id, name, _) in store.iter() {
        out.push((format!("{prefix}m/{name}"), adam.m[id.index()].clone()));
        out.push((format!("{prefix}v/{name}"), adam.v[id.index()].clone()));
    }
}

struct Table(HashMap<String, Tensor<f32>>);

impl Table {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn fill_store(&mut self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = self.take(&name, &shape)?;
        }
        Ok(())
    }

    fn fill_adam(&mut self, prefix: &str, store: &ParamStore<f32>, adam: &mut Adam<f32>) -> Result<()> {
        for (id, name, t) in store.iter() {
            adam.m[id.index()] = self.take(&format!("{prefix}m/{name}"), t.shape())?;
            adam.v[id.index()] = self.take(&format!("{prefix}v/{name}"), t.shape())?;
        }
        Ok(())
    }
}

impl Bundle {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DualVae::new(&config.model, config.codebook.decay, config.codebook.epsilon, &mut rng)?;
        let adam = Adam::new(config.optim.adam, &model.store);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            prior: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        put_store(&mut tensors, "model/", &self.model.store);
        if let Some(cb) = &self.model.codebook {
            tensors.push(("codebook/embeddings".into(), cb.embeddings.clone()));
            tensors.push(("codebook/ema_sum".into(), cb.ema_sum.clone()));
            let n = cb.len();
            tensors.push(("codebook/ema_cluster_size".into(), Tensor::new([n], cb.ema_cluster_size.clone())));
            tensors.push((
                "codebook/usage".into(),
                Tensor::new([n], cb.usage.iter().map(|&u| u as f32).collect()),
            ));
        }
        put_adam(&mut tensors, "adam/", &self.model.store, &self.adam);
        let mut prior_step = 0;
        if let Some((prior, adam)) = &self.prior {
            put_store(&mut tensors, "prior/", &prior.store);
            put_adam(&mut tensors, "prior_adam/", &prior.store, adam);
            prior_step = adam.step;
        }
        Checkpoint {
            config_text: self.config.to_text(),
            step: self.step,
            prior_step,
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        let mut b = Self::new(config, 0)?;
        let mut table = Table(ckpt.tensors.iter().cloned().collect());
        table.fill_store("model/", &mut b.model.store)?;
        if let Some(cb) = &mut b.model.codebook {
            let (n, d) = (cb.len(), cb.dim());
            cb.embeddings = table.take("codebook/embeddings", &[n, d])?;
            cb.ema_sum = table.take("codebook/ema_sum", &[n, d])?;
            cb.ema_cluster_size = table.take("codebook/ema_cluster_size", &[n])?.into_data();
            cb.usage = table
                .take("codebook/usage", &[n])?
                .data()
                .iter()
                .map(|&u| u.max(0.0) as u64)
                .collect();
        }
        table.fill_adam("adam/", &b.model.store, &mut b.adam)?;
        b.adam.step = ckpt.step;
        b.step = ckpt.step;
        if table.0.keys().any(|k| k.starts_with("prior/")) {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let grid = (b.config.model.grid_size(), b.config.model.grid_size());
            let mut prior = Prior::new(&b.config.prior, b.config.model.n_embed, grid, &mut rng)?;
            table.fill_store("prior/", &mut prior.store)?;
            let mut adam = Adam::new(
                AdamConfig {
                    lr: b.config.prior.lr,
                    ..AdamConfig::default()
                },
                &prior.store,
            );
            table.fill_adam("prior_adam/", &prior.store, &mut adam)?;
            adam.step = ckpt.prior_step;
            b.prior = Some((prior, adam));
        }
        if let Some(extra) = table.0.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
