use crate::agent::{AgentConfig, AgentModel};
use crate::autodiff::{ParamStore, Tensor};
use crate::diffusion::{Generator, GeneratorConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGPP";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;
const MAX_NAME: usize = 4096;

/// Magic, version, blob count, then per blob: name length, UTF-8 name,
/// rank, dims and little-endian f64 data. Blobs are written in name order.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("blob count")?;
    let mut store = ParamStore::new();
    let mut last: Option<String> = None;
    for i in 0..count {
        let len = r.u32("name length")?;
        if len == 0 || len > MAX_NAME {
            return Err(Error::format(format!("blob {i} has a name of {len} bytes")));
        }
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(format!("blob {i} name is not UTF-8")))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(Error::format(format!("blob {name:?} is duplicated or out of order")));
        }
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::format(format!("blob {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32("dims")?;
            numel = numel
                .checked_mul(d)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format(format!("blob {name:?} is larger than the file")))?;
            shape.push(d);
        }
        let raw = r.take(numel * 8, "data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("blob {name:?} contains non-finite values")));
        }
        store.insert(name.clone(), Tensor::new(shape, data)?);
        last = Some(name);
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!(
            "{} trailing bytes after the last blob",
            r.remaining()
        )));
    }
    Ok(store)
}

fn with_meta(store: &ParamStore, key: &str, meta: Vec<f64>) -> Vec<u8> {
    let mut s = store.clone();
    s.insert(key, Tensor::new(vec![meta.len()], meta).expect("1-d metadata"));
    encode_checkpoint(&s)
}

fn split_meta(bytes: &[u8], key: &str) -> Result<(ParamStore, Vec<f64>)> {
    let mut store = decode_checkpoint(bytes)?;
    let meta = store
        .remove(key)
        .ok_or_else(|| Error::format(format!("checkpoint has no {key:?} entry")))?;
    Ok((store, meta.into_data()))
}

/// Generator weights, attached adapters and configuration.
pub fn save_generator(g: &Generator) -> Vec<u8> {
    with_meta(&g.store, crate::diffusion::META_KEY, g.cfg.to_meta())
}

pub fn load_generator(bytes: &[u8]) -> Result<Generator> {
    let (store, meta) = split_meta(bytes, crate::diffusion::META_KEY)?;
    let cfg = GeneratorConfig::from_meta(&meta)?;
    let mut g = Generator::from_store(cfg, store)?;
    let adapted = crate::lora::adapted_targets(&g.store);
    if !adapted.is_empty() {
        for name in g.base_names() {
            g.store.freeze(&name)?;
        }
        for t in &adapted {
            crate::lora::layer(&g.store, t).map_err(|_| Error::format(format!("incomplete adapter for {t:?}")))?;
            g.store.freeze(&crate::lora::scale_name(t))?;
        }
    }
    Ok(g)
}

pub fn save_agent(m: &AgentModel) -> Vec<u8> {
    with_meta(&m.store, crate::agent::META_KEY, m.cfg.to_meta())
}

pub fn load_agent(bytes: &[u8]) -> Result<AgentModel> {
    let (store, meta) = split_meta(bytes, crate::agent::META_KEY)?;
    AgentModel::from_store(AgentConfig::from_meta(&meta)?, store)
}
