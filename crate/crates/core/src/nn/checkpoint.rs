//! ASCK checkpoint container, little-endian throughout:
//!
//! ```text
//! "ASCK"  u32 version
//! u32 len, spec as JSON
//! u64 iteration, u64 optimizer step
//! RNG: 32-byte seed, u64 stream, u128 word position
//! u32 record count, then per record:
//!   u32 key len, key (UTF-8), u32 rank, u32 dims.., f32 data..
//! ```
//!
//! Records hold parameters, then batch-norm buffers, then optimizer moments
//! (keys prefixed `adam.`).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{NetSpec, Network, NnError, ParamStore, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ASCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPTIMIZER_PREFIX: &str = "adam.";

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetSpec,
    pub iteration: u64,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub buffers: ParamStore,
    /// Optimizer moments; every key starts with `adam.`.
    pub optimizer: ParamStore,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(NnError::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(network: &Network, iteration: u64, rng: &ChaCha8Rng) -> Self {
        Checkpoint {
            spec: network.spec().clone(),
            iteration,
            optimizer_step: 0,
            rng: RngState::capture(rng),
            params: network.params().clone(),
            buffers: network.buffers().clone(),
            optimizer: ParamStore::new(),
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_parts(self.spec.clone(), self.params.clone(), self.buffers.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let n = self.params.len() + self.buffers.len() + self.optimizer.len();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for store in [&self.params, &self.buffers, &self.optimizer] {
            for (key, t) in store.iter() {
                out.extend_from_slice(&(key.len() as u32).to_le_bytes());
                out.extend_from_slice(key.as_bytes());
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses and validates against the stored spec's plan.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let spec: NetSpec =
            serde_json::from_slice(r.take(len)?).map_err(|e| NnError::Checkpoint(format!("spec: {e}")))?;
        let iteration = r.u64()?;
        let optimizer_step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let (_, buffer_plan) = spec.plan();
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut optimizer = ParamStore::new();
        for _ in 0..r.u32()? {
            let klen = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(klen)?)
                .map_err(|_| NnError::Checkpoint("key is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| NnError::Checkpoint(format!("{key}: {e}")))?;
            let store = if key.starts_with(OPTIMIZER_PREFIX) {
                &mut optimizer
            } else if buffer_plan.iter().any(|b| b.key == key) {
                &mut buffers
            } else {
                &mut params
            };
            store.insert(key, t)?;
        }
        if r.at != bytes.len() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let ck = Checkpoint {
            spec,
            iteration,
            optimizer_step,
            rng: RngState { seed, stream, word_pos },
            params,
            buffers,
            optimizer,
        };
        ck.network()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| NnError::Io { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| NnError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }
}
