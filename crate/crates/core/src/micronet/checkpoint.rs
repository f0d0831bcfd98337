//! Versioned binary checkpoints. All integers and floats little-endian.
//!
//! ```text
//! magic        4   "PSCK"
//! version      u32 (1)
//! arch_hash    32  SHA-256 of the architecture descriptor
//! parent_hash  32  SHA-256 of the parent checkpoint file, all zero if none
//! stage        u8  0 = none, 1..=3 = stage I..III
//! rng.seed     32  ChaCha8 seed
//! rng.stream   u64
//! rng.word_pos u128
//! n_params     u32
//! per param:   name_len u16, name (UTF-8), group u8, trainable u8,
//!              lr_mult f64, len u32, values f64 * len
//! has_opt      u8
//! if has_opt:  lr, beta1, beta2, eps, weight_decay (f64 each), then per
//!              param: steps u64, m f64 * len, v f64 * len
//! ```
//!
//! The checkpoint id used for lineage is the SHA-256 of the whole file.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{arch_hash, AdamW, AdamWConfig, MicroNet, Param, ParamGroup, Stage};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub parent: Option<[u8; 32]>,
    pub stage: Option<Stage>,
    pub rng: RngState,
    pub net: MicroNet,
    pub optimizer: Option<AdamW>,
}

pub fn hex(h: &[u8; 32]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&arch_hash());
        b.extend_from_slice(&self.parent.unwrap_or([0; 32]));
        b.push(self.stage.map_or(0, Stage::number));
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let params = self.net.params();
        b.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            b.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            b.extend_from_slice(p.name.as_bytes());
            b.push(p.group.code());
            b.push(p.trainable as u8);
            b.extend_from_slice(&p.lr_mult.to_le_bytes());
            b.extend_from_slice(&(p.value.len() as u32).to_le_bytes());
            p.value.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        }
        match &self.optimizer {
            None => b.push(0),
            Some(o) => {
                b.push(1);
                let c = o.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                for i in 0..o.m.len() {
                    b.extend_from_slice(&o.steps[i].to_le_bytes());
                    o.m[i].iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
                    o.v[i].iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        b
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        if r.hash()? != arch_hash() {
            return Err(Error::Checkpoint("architecture hash mismatch".into()));
        }
        let parent = Some(r.hash()?).filter(|h| h != &[0; 32]);
        let stage = match r.u8()? {
            0 => None,
            n => Some(Stage::from_number(n).ok_or_else(|| Error::Checkpoint(format!("bad stage {n}")))?),
        };
        let rng = RngState {
            seed: r.hash()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let group = ParamGroup::from_code(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("bad group for {name}")))?;
            let trainable = r.u8()? != 0;
            let lr_mult = r.f64()?;
            let len = r.u32()? as usize;
            let value = r.f64s(len)?;
            params.push(Param {
                name,
                group,
                value,
                trainable,
                lr_mult,
            });
        }
        let net = MicroNet::from_params(params)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamWConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let mut opt = AdamW::new(config, &net);
                for i in 0..net.params().len() {
                    let len = net.params()[i].value.len();
                    opt.steps[i] = r.u64()?;
                    opt.m[i] = r.f64s(len)?;
                    opt.v[i] = r.f64s(len)?;
                }
                Some(opt)
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            parent,
            stage,
            rng,
            net,
            optimizer,
        })
    }

    /// Writes atomically (temporary file then rename) and returns the hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<[u8; 32]> {
        let path = path.as_ref();
        let bytes = self.encode();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(Sha256::digest(&bytes).into())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn hash(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample(with_opt: bool) -> Checkpoint {
        let mut net = MicroNet::new(2);
        net.set_stage_trainability(Stage::II);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let optimizer = with_opt.then(|| {
            let mut o = AdamW::new(AdamWConfig::default(), &net);
            o.steps[3] = 7;
            o.m[3][0] = 0.25;
            o
        });
        Checkpoint {
            parent: Some([9; 32]),
            stage: Some(Stage::II),
            rng: RngState::capture(&rng),
            net,
            optimizer,
        }
    }

    #[test]
    fn round_trip() {
        for with_opt in [false, true] {
            let c = sample(with_opt);
            let bytes = c.encode();
            let d = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(d.encode(), bytes);
            assert_eq!(d.parent, Some([9; 32]));
            assert_eq!(d.stage, Some(Stage::II));
            assert_eq!(d.net.params(), c.net.params());
            assert_eq!(d.optimizer, c.optimizer);
            let mut a = c.rng.restore();
            let mut b = d.rng.restore();
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn corrupt_files_error() {
        let bytes = sample(false).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut arch = bytes.clone();
        arch[10] ^= 1;
        assert!(matches!(Checkpoint::decode(&arch), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample(true);
        let path = dir.path().join("a.ckpt");
        let h = c.save(&path).unwrap();
        assert_eq!(h, c.hash());
        assert_eq!(Checkpoint::load(&path).unwrap().hash(), h);
        assert_eq!(hex(&h).len(), 64);
    }
}
