//! Training checkpoints.
//!
//! Layout (little-endian): magic `b"DABK"`, `u32` version, `u32` value
//! width in bits (32 or 64), `u64` epoch, `u64` step, `u64` Adam step
//! count, the sampling RNG as 32 seed bytes + `u64` stream + `u128` word
//! position, then length-prefixed UTF-8 blobs for the resolved config and
//! the training log (JSON), then `u32` tensor count and per tensor its
//! name, rank, dims and parameter values followed by the Adam first and
//! second moments. Values are stored at the trainer's own width, so a
//! reload is exact.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::Adam;
use super::TrainLog;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::net::DabsegNet;
use crate::real::Real;
use crate::train::config::{AdamConfig, TrainConfig};

pub const CKPT_MAGIC: [u8; 4] = *b"DABK";
pub const CKPT_VERSION: u32 = 1;

/// `ckpt_<epoch>.bin`
pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch}.bin")
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub config_json: String,
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    pub log: TrainLog,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(b: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(b, bytes.len() as u64);
    b.extend_from_slice(bytes);
}

fn put_values<T: Real>(b: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        if T::BITS == 64 {
            b.extend_from_slice(&v.f64().to_le_bytes());
        } else {
            b.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Corruption(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.take(16)?.try_into().expect("16 bytes"),
        ))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(
            usize::try_from(n).map_err(|_| Error::Corruption("blob length overflows".into()))?,
        )
    }

    fn text(&mut self) -> Result<String> {
        String::from_utf8(self.blob()?.to_vec())
            .map_err(|_| Error::Corruption("checkpoint text is not UTF-8".into()))
    }

    fn values<T: Real>(&mut self, shape: &[usize], bits: u32) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let w = (bits / 8) as usize;
        let raw = self.take(
            n.checked_mul(w)
                .ok_or_else(|| Error::Corruption("tensor size overflows".into()))?,
        )?;
        let data = raw
            .chunks_exact(w)
            .map(|c| {
                T::of(if w == 8 {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                } else {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                })
            })
            .collect();
        Tensor::new(shape, data)
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&CKPT_MAGIC);
        put_u32(&mut b, CKPT_VERSION);
        put_u32(&mut b, T::BITS);
        put_u64(&mut b, self.epoch as u64);
        put_u64(&mut b, self.step as u64);
        put_u64(&mut b, self.adam.t);
        b.extend_from_slice(&self.rng.get_seed());
        put_u64(&mut b, self.rng.get_stream());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        put_blob(&mut b, self.config_hash.as_bytes());
        put_blob(&mut b, self.config_json.as_bytes());
        put_blob(
            &mut b,
            serde_json::to_string(&self.log)
                .expect("log serializes")
                .as_bytes(),
        );
        put_u32(&mut b, self.params.len() as u32);
        for (i, id) in self.params.ids().enumerate() {
            put_blob(&mut b, self.params.name(id).as_bytes());
            let t = self.params.value(id);
            put_u32(&mut b, t.rank() as u32);
            for &d in t.shape() {
                put_u64(&mut b, d as u64);
            }
            put_values(&mut b, t);
            put_values(&mut b, &self.adam.m[i]);
            put_values(&mut b, &self.adam.v[i]);
        }
        b
    }

    /// Value width recorded in an encoded checkpoint.
    pub fn peek_bits(bytes: &[u8]) -> Result<u32> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        match r.u32()? {
            b @ (32 | 64) => Ok(b),
            b => Err(Error::Corruption(format!("checkpoint value width {b}"))),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bits = Self::peek_bits(bytes)?;
        if bits != T::BITS {
            return Err(Error::Config(format!(
                "checkpoint holds {bits}-bit values, expected {}",
                T::BITS
            )));
        }
        let mut r = Reader { bytes, pos: 12 };
        let epoch = r.u64()? as usize;
        let step = r.u64()? as usize;
        let adam_t = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        let config_hash = r.text()?;
        let config_json = r.text()?;
        let log: TrainLog = serde_json::from_str(&r.text()?)
            .map_err(|e| Error::Corruption(format!("checkpoint log: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let name = r.text()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Corruption(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            params.add(name, r.values(&shape, bits)?);
            m.push(r.values(&shape, bits)?);
            v.push(r.values(&shape, bits)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_json,
            config_hash,
            epoch,
            step,
            params,
            adam: Adam {
                config: AdamConfig::default(),
                t: adam_t,
                m,
                v,
            },
            rng,
            log,
        })
    }

    /// The resolved run configuration stored with the checkpoint.
    pub fn config(&self) -> Result<TrainConfig> {
        let c: TrainConfig = serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Corruption(format!("checkpoint config: {e}")))?;
        if c.hash() != self.config_hash {
            return Err(Error::Corruption(
                "checkpoint config does not match its hash".into(),
            ));
        }
        Ok(c)
    }

    /// Rebuilds the network with the saved parameters.
    pub fn network(&self) -> Result<DabsegNet<T>> {
        let c = self.config()?;
        let mut net = DabsegNet::new(c.net, c.seed)?;
        net.store.load_from(&self.params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
