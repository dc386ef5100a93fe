//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IAMN"  u32 version  u8 dtype(4|8)
//! u32 len, config text (key = value form)
//! u64 step  u64 optimizer updates
//! rng: 32-byte seed, u64 stream, u128 word position
//! u32 record count, then per record:
//!   u8 kind (0 param, 1 buffer, 2 optimizer slot)  u8 slot
//!   u32 len, name   u32 rank, u64 dims..   values (dtype bytes each)
//! ```
//!
//! Loading parses the whole file into fresh values before returning, so a
//! failed load never touches existing state.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::params::ParamStore;
use crate::tensor::{DType, Float, Tensor};
use crate::training::{OptimizerState, Trainer};

pub const MAGIC: [u8; 4] = *b"IAMN";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_SLOT: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub network: Network<T>,
    pub optimizer: OptimizerState<T>,
    pub step: u64,
    pub rng: RngState,
}

impl<T: Float> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.train = trainer.cfg.clone();
        Self {
            config,
            network: trainer.net.clone(),
            optimizer: trainer.opt.clone(),
            step: trainer.step as u64,
            rng: RngState::capture(&trainer.rng),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let mut t = Trainer::new(self.network, self.config.train)?;
        t.opt = self.optimizer;
        t.step = self.step as usize;
        t.rng = self.rng.restore();
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        put_bytes(&mut out, self.config.to_text().as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.optimizer.updates.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let store = self.network.store();
        let slots: usize = self.optimizer.slots.values().map(Vec::len).sum();
        let count = store.params().count() + store.buffers().count() + slots;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in store.params() {
            put_record(&mut out, KIND_PARAM, 0, name, t);
        }
        for (name, t) in store.buffers() {
            put_record(&mut out, KIND_BUFFER, 0, name, t);
        }
        for (name, ts) in &self.optimizer.slots {
            for (i, t) in ts.iter().enumerate() {
                put_record(&mut out, KIND_SLOT, i as u8, name, t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let tag_at = r.pos;
        let tag = r.u8()?;
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => {
                return Err(Error::Checkpoint(format!(
                    "stored as {d:?}, requested {:?}",
                    T::DTYPE
                )))
            }
            None => return Err(r.error_at(tag_at, format!("unknown dtype tag {tag}"))),
        }
        let text_at = r.pos;
        let text = String::from_utf8(r.bytes_prefixed()?.to_vec())
            .map_err(|_| r.error_at(text_at, "config text is not UTF-8".into()))?;
        let config = RunConfig::parse(&text)?;
        let step = r.u64()?;
        let updates = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));

        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        let mut slots: IndexMap<String, Vec<Tensor<T>>> = IndexMap::new();
        for _ in 0..count {
            let at = r.pos;
            let kind = r.u8()?;
            let slot = r.u8()? as usize;
            let name = String::from_utf8(r.bytes_prefixed()?.to_vec())
                .map_err(|_| r.error_at(at, "tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error_at(at, format!("tensor `{name}` is too large")))?;
            let size = T::DTYPE.size();
            let raw = r.take(n.checked_mul(size).ok_or_else(|| r.error_at(at, "tensor too large".into()))?)?;
            let data: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
            let t = Tensor::new(&shape, data)?;
            match kind {
                KIND_PARAM => store.insert_param(&name, t)?,
                KIND_BUFFER => store.insert_buffer(&name, t)?,
                KIND_SLOT => {
                    let v = slots.entry(name.clone()).or_default();
                    if v.len() != slot {
                        return Err(r.error_at(at, format!("optimizer slot {slot} of `{name}` out of order")));
                    }
                    v.push(t);
                }
                k => return Err(r.error_at(at, format!("unknown record kind {k}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        for name in slots.keys() {
            if store.param(name).is_err() {
                return Err(Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")));
            }
        }
        let network = Network::from_parts(config.net.clone(), store)?;
        Ok(Self {
            config,
            network,
            optimizer: OptimizerState { updates, slots },
            step,
            rng: RngState { seed, stream, word_pos },
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_record<T: Float>(out: &mut Vec<u8>, kind: u8, slot: u8, name: &str, t: &Tensor<T>) {
    out.push(kind);
    out.push(slot);
    put_bytes(out, name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, message: String) -> Error {
        Error::Format {
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Writes via a temporary sibling file and rename, so readers never see a
/// half-written checkpoint.
pub fn save_checkpoint<T: Float>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads and checks the stored network against `expected`: same tensor
/// names and shapes.
pub fn load_checkpoint_for<T: Float>(path: &Path, expected: &crate::network::NetConfig) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint::<T>(path)?;
    let reference = crate::network::init_params::<T>(expected, 0)?;
    crate::network::check_layout(&reference, ckpt.network.store())?;
    Ok(ckpt)
}
