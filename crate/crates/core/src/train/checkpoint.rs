//! `SKCK` checkpoint container.
//!
//! Layout (little-endian): magic `SKCK`, `u32` version, `u64` length plus
//! UTF-8 config echo, `u64` step, `u64` epoch, `u8` RNG flag followed when set
//! by a 32-byte seed, `u64` stream and `u128` word position, then `u64`
//! entry count and per entry a `u32` name length, the name, and an `SKTN`
//! tensor blob.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

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
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub epoch: u64,
    pub rng: Option<RngState>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no entry '{name}'")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        match &self.rng {
            Some(r) => {
                w.write_all(&[1])?;
                w.write_all(&r.seed)?;
                w.write_all(&r.stream.to_le_bytes())?;
                w.write_all(&r.word_pos.to_le_bytes())?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut off = 0usize;
        let take = |r: &mut R, n: usize, off: &mut usize, what: &str| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| Error::Parse {
                offset: *off,
                message: format!("truncated checkpoint while reading {what}"),
            })?;
            *off += n;
            Ok(buf)
        };
        let magic = take(r, 4, &mut off, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "not an SKCK checkpoint".into(),
            });
        }
        let version = u32::from_le_bytes(take(r, 4, &mut off, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let u64_at = |b: Vec<u8>| u64::from_le_bytes(b.try_into().unwrap());
        let len = u64_at(take(r, 8, &mut off, "config length")?) as usize;
        let at = off;
        let config = String::from_utf8(take(r, len, &mut off, "config")?).map_err(|_| Error::Parse {
            offset: at,
            message: "config echo is not UTF-8".into(),
        })?;
        let step = u64_at(take(r, 8, &mut off, "step")?);
        let epoch = u64_at(take(r, 8, &mut off, "epoch")?);
        let rng = match take(r, 1, &mut off, "rng flag")?[0] {
            0 => None,
            _ => Some(RngState {
                seed: take(r, 32, &mut off, "rng seed")?.try_into().unwrap(),
                stream: u64_at(take(r, 8, &mut off, "rng stream")?),
                word_pos: u128::from_le_bytes(take(r, 16, &mut off, "rng position")?.try_into().unwrap()),
            }),
        };
        let count = u64_at(take(r, 8, &mut off, "entry count")?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = u32::from_le_bytes(take(r, 4, &mut off, "name length")?.try_into().unwrap()) as usize;
            let at = off;
            let name = String::from_utf8(take(r, n, &mut off, "name")?).map_err(|_| Error::Parse {
                offset: at,
                message: "entry name is not UTF-8".into(),
            })?;
            let t = read_tensor(r, &mut off)?;
            tensors.push((name, t));
        }
        Ok(Self {
            config,
            step,
            epoch,
            rng,
            tensors,
        })
    }

    /// Writes to a temporary sibling and renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("skck.tmp");
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}
