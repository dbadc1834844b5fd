//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"SFLW"`, `u32` version, `u64` config digest, `u64`-prefixed config
//! text, `u64` epoch, `u64` optimizer step, `u64` tensor count, then per
//! tensor a `u32`-prefixed UTF-8 name, `u64` element count and that many
//! `f64` values.

use std::io::{self, ErrorKind};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Adam;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flowcore::Parameterized;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"SFLW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or generate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: u64,
}

fn tensors(ck: &Checkpoint) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    ck.model.visit_params("model", &mut |name, v| {
        out.push((name.to_string(), v.to_vec()))
    });
    out.push(("model.space_sigma".into(), ck.model.space_sigma.clone()));
    let flags = ck.model.bond_flow.actnorm_flags();
    out.push((
        "model.actnorm_initialized".into(),
        flags.iter().map(|&b| b as u8 as f64).collect(),
    ));
    out.push(("adam.m".into(), ck.adam.m.clone()));
    out.push(("adam.v".into(), ck.adam.v.clone()));
    out
}

impl Checkpoint {
    /// Fresh state for a config: untrained model from the config seed and
    /// zero optimizer moments.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(
            config.model_config(),
            &mut ChaCha8Rng::seed_from_u64(config.seed),
        )?;
        let adam = Adam::new(model.num_params(), config.lr);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.digest().to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        let ts = tensors(self);
        out.extend_from_slice(&(ts.len() as u64).to_le_bytes());
        for (name, values) in ts {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            origin: origin.to_path_buf(),
        };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt(format!(
                "{}: not a checkpoint (bad magic)",
                origin.display()
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "{}: checkpoint format {version}, this build reads {CHECKPOINT_VERSION}",
                origin.display()
            )));
        }
        let digest = r.u64()?;
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| {
            Error::Corrupt(format!("{}: config text is not UTF-8", origin.display()))
        })?;
        let config = RunConfig::parse(text)?;
        if config.digest() != digest {
            return Err(Error::Corrupt(format!(
                "{}: config digest mismatch",
                origin.display()
            )));
        }
        let epoch = r.u64()?;
        let step = r.u64()?;

        let mut ck = Checkpoint::new(config)?;
        ck.epoch = epoch;
        ck.adam.step = step;
        let expected: Vec<(String, usize)> = tensors(&ck)
            .into_iter()
            .map(|(n, v)| (n, v.len()))
            .collect();
        let count = r.len()?;
        if count != expected.len() {
            return Err(Error::Shape(format!(
                "{}: {count} tensors stored, config implies {}",
                origin.display(),
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (want_name, want_len) in &expected {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| {
                Error::Corrupt(format!("{}: tensor name is not UTF-8", origin.display()))
            })?;
            let n = r.len()?;
            if name != want_name || n != *want_len {
                return Err(Error::Shape(format!(
                    "{}: found tensor {name} [{n}], expected {want_name} [{want_len}]",
                    origin.display()
                )));
            }
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.eof(usize::MAX))?)?;
            loaded.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<f64>>(),
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{}: {} trailing bytes after offset {}",
                origin.display(),
                bytes.len() - r.pos,
                r.pos
            )));
        }

        let mut it = loaded.into_iter();
        ck.model
            .visit_params_mut("model", &mut |_, v| v.copy_from_slice(&it.next().unwrap()));
        ck.model.space_sigma = it.next().unwrap();
        let flags: Vec<bool> = it.next().unwrap().iter().map(|&f| f != 0.0).collect();
        ck.model.bond_flow.set_actnorm_flags(&flags)?;
        ck.adam.m = it.next().unwrap();
        ck.adam.v = it.next().unwrap();
        Ok(ck)
    }

    /// Rejects a checkpoint whose architecture differs from `cfg`.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let (have, want) = (&self.model.config, cfg);
        if have != want {
            let (a, b) = (have.shape(), want.shape());
            return Err(Error::Version(format!(
                "checkpoint architecture (N={}, K={}, C={}, Q={}) does not match the requested (N={}, K={}, C={}, Q={})",
                a.n, a.k, a.c, have.coupling_blocks, b.n, b.k, b.c, want.coupling_blocks
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: PathBuf,
}

impl<'a> Reader<'a> {
    fn eof(&self, need: usize) -> Error {
        let detail = format!(
            "truncated checkpoint: need {need} bytes at offset {}, file has {}",
            self.pos,
            self.buf.len()
        );
        Error::io(
            &self.origin,
            io::Error::new(ErrorKind::UnexpectedEof, detail),
        )
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.eof(n));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.eof(usize::MAX))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
