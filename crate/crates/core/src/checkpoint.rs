//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MOLECKPT" | u32 version | u64 len, config TOML | u64 step
//! u64 count, then per parameter: name, u8 trainable, tensor
//! u8 has_optimizer [u64 step, f64 β1, β2, ε, wd, u64 count, (name, m, v)*]
//! 32-byte sha256 of everything above
//! ```
//!
//! Strings are `u64 len` + UTF-8; tensors are `u64 ndim`, `u64` dims, f64 data.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{MoleError, Result};
use crate::model::ToyTransformer;
use crate::numerics::Tensor;
use crate::params::Param;
use crate::train::{Moments, OptimizerState};

pub const MAGIC: &[u8; 8] = b"MOLECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedMoments {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedOptimizer {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub moments: Vec<SavedMoments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub params: Vec<Param>,
    pub optimizer: Option<SavedOptimizer>,
}

impl Checkpoint {
    /// The config snapshot leaves `output_dir` empty: where a run was written
    /// is not part of what it computed.
    pub fn capture(
        config: &ExperimentConfig,
        model: &ToyTransformer,
        optimizer: Option<&OptimizerState>,
        step: u64,
    ) -> Result<Self> {
        let optimizer = optimizer.map(|o| SavedOptimizer {
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            moments: o
                .moments
                .iter()
                .map(|s| SavedMoments {
                    name: model.store.param(s.param).name.clone(),
                    m: s.m.clone(),
                    v: s.v.clone(),
                })
                .collect(),
        });
        let mut snapshot = config.clone();
        snapshot.output_dir = std::path::PathBuf::new();
        Ok(Self {
            config: snapshot.to_toml()?,
            step,
            params: model.store.params().to_vec(),
            optimizer,
        })
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config)
    }

    /// Rebuilds the model described by the embedded config and loads the saved weights.
    pub fn restore(&self) -> Result<(ExperimentConfig, ToyTransformer, Option<OptimizerState>)> {
        let cfg = self.experiment_config()?;
        let mut model = ToyTransformer::new(cfg.model.clone(), cfg.train.adapter_spec())?;
        if model.store.len() != self.params.len() {
            return Err(MoleError::Checkpoint(format!(
                "checkpoint has {} parameters, config builds {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, saved) in ids.into_iter().zip(&self.params) {
            let p = model.store.param(id);
            if p.name != saved.name || p.trainable != saved.trainable {
                return Err(MoleError::Checkpoint(format!(
                    "parameter {} does not match config parameter {}",
                    saved.name, p.name
                )));
            }
            model.store.set(id, saved.value.clone())?;
        }
        let opt = match &self.optimizer {
            None => None,
            Some(o) => {
                let mut moments = Vec::with_capacity(o.moments.len());
                for s in &o.moments {
                    let id = model
                        .store
                        .find(&s.name)
                        .ok_or_else(|| MoleError::Checkpoint(format!("optimizer slot for unknown parameter {}", s.name)))?;
                    let router = s.name.ends_with(".router");
                    moments.push(Moments {
                        param: id,
                        lr_scale: if router { cfg.train.router_lr_scale } else { 1.0 },
                        m: s.m.clone(),
                        v: s.v.clone(),
                    });
                }
                Some(OptimizerState {
                    step: o.step,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                    moments,
                })
            }
        };
        Ok((cfg, model, opt))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut w, &self.config);
        put_u64(&mut w, self.step);
        put_u64(&mut w, self.params.len() as u64);
        for p in &self.params {
            put_str(&mut w, &p.name);
            w.push(u8::from(p.trainable));
            put_tensor(&mut w, &p.value);
        }
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                put_u64(&mut w, o.step);
                for x in [o.beta1, o.beta2, o.eps, o.weight_decay] {
                    w.extend_from_slice(&x.to_le_bytes());
                }
                put_u64(&mut w, o.moments.len() as u64);
                for s in &o.moments {
                    put_str(&mut w, &s.name);
                    put_tensor(&mut w, &s.m);
                    put_tensor(&mut w, &s.v);
                }
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(MoleError::Checkpoint("file too short".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(MoleError::Checkpoint("bad magic bytes".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(MoleError::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(MoleError::Checkpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        let config = r.string()?;
        let step = r.u64()?;
        let n = r.u64()?;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(MoleError::Checkpoint(format!("bad trainable flag {b}"))),
            };
            params.push(Param {
                name,
                value: r.tensor()?,
                trainable,
            });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (beta1, beta2, eps, weight_decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let n = r.u64()?;
                let mut moments = Vec::new();
                for _ in 0..n {
                    moments.push(SavedMoments {
                        name: r.string()?,
                        m: r.tensor()?,
                        v: r.tensor()?,
                    });
                }
                Some(SavedOptimizer {
                    step,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    moments,
                })
            }
            b => return Err(MoleError::Checkpoint(format!("bad optimizer flag {b}"))),
        };
        if r.pos != body.len() {
            return Err(MoleError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            step,
            params,
            optimizer,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes `bytes` to `path` via a temp file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| MoleError::Checkpoint(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn put_u64(w: &mut Vec<u8>, x: u64) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u64(w, s.len() as u64);
    w.extend_from_slice(s.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    put_u64(w, t.shape().len() as u64);
    for &d in t.shape() {
        put_u64(w, d as u64);
    }
    for x in t.data() {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| MoleError::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| MoleError::Checkpoint("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| MoleError::Checkpoint(e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.len()?;
        let mut shape = Vec::with_capacity(nd.min(8));
        for _ in 0..nd {
            shape.push(self.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| MoleError::Checkpoint("tensor size overflow".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| MoleError::Checkpoint("tensor size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}
