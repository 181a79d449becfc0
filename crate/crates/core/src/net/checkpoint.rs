//! Versioned binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! | field                     | encoding                                  |
//! |---------------------------|-------------------------------------------|
//! | magic                     | 8 bytes, `SDFDRO01`                       |
//! | depth, width              | u32, u32                                  |
//! | skip layer count, indices | u32, then one u32 per index               |
//! | activation                | u8 (0 = relu, 1 = softplus), f64 beta     |
//! | init scheme               | u8 (0 = geometric, 1 = uniform)           |
//! | weight count `n`          | u64                                       |
//! | weights                   | `n` × f64, layer order, `W` row-major, `b` |
//! | λ1, λ2                    | f64, f64                                  |
//! | normalization             | center 3 × f64, scale f64                 |
//! | optimizer present         | u8 (0 or 1)                               |
//! | adam step                 | u64                                       |
//! | β1, β2, ε                 | 3 × f64                                   |
//! | WDRO dual variable λ      | f64                                       |
//! | first moments             | `n + 2` × f64 (weights, then λ1, λ2)      |
//! | second moments            | `n + 2` × f64                             |
//!
//! The last six rows are present only when the optimizer flag is 1. Trailing
//! bytes are rejected.

use super::{Activation, InitScheme, MlpParams, NetConfig};
use crate::pointcloud::NormalizationTransform;
use crate::trainer::AdamState;
use crate::{Error, Result};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDFDRO01";
const MAGIC_FAMILY: &[u8; 6] = b"SDFDRO";

/// Optimizer section of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub adam: AdamState,
    pub wdro_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub transform: NormalizationTransform,
    pub optimizer: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let c = p.config();
        let mut out = Vec::with_capacity(64 + 8 * 3 * p.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, c.depth as u32);
        put_u32(&mut out, c.width as u32);
        put_u32(&mut out, c.skip_layers.len() as u32);
        for &s in &c.skip_layers {
            put_u32(&mut out, s as u32);
        }
        match c.activation {
            Activation::Relu => {
                out.push(0);
                put_f64(&mut out, 0.0);
            }
            Activation::Softplus { beta } => {
                out.push(1);
                put_f64(&mut out, beta);
            }
        }
        out.push(match c.init {
            InitScheme::Geometric => 0,
            InitScheme::Uniform => 1,
        });
        put_u64(&mut out, p.values.len() as u64);
        p.values.iter().for_each(|&v| put_f64(&mut out, v));
        put_f64(&mut out, p.loss_weights[0]);
        put_f64(&mut out, p.loss_weights[1]);
        self.transform.center.iter().for_each(|&v| put_f64(&mut out, v));
        put_f64(&mut out, self.transform.scale);
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let a = &opt.adam;
                put_u64(&mut out, a.step);
                put_f64(&mut out, a.beta1);
                put_f64(&mut out, a.beta2);
                put_f64(&mut out, a.eps);
                put_f64(&mut out, opt.wdro_lambda);
                a.m.iter().for_each(|&v| put_f64(&mut out, v));
                a.v.iter().for_each(|&v| put_f64(&mut out, v));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if &magic[..6] != MAGIC_FAMILY {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::VersionMismatch {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let depth = r.u32()? as usize;
        let width = r.u32()? as usize;
        let n_skip = r.u32()? as usize;
        if n_skip > depth {
            return Err(Error::Checkpoint("corrupt skip-layer count".into()));
        }
        let skip_layers = (0..n_skip)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let act_tag = r.u8()?;
        let beta = r.f64()?;
        let activation = match act_tag {
            0 => Activation::Relu,
            1 => Activation::Softplus { beta },
            t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        };
        let init = match r.u8()? {
            0 => InitScheme::Geometric,
            1 => InitScheme::Uniform,
            t => return Err(Error::Checkpoint(format!("unknown init tag {t}"))),
        };
        let config = NetConfig {
            depth,
            width,
            skip_layers,
            activation,
            init,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid network config: {e}")))?;
        let n = r.u64()? as usize;
        if n != config.num_weights() {
            return Err(Error::Checkpoint(format!(
                "weight count {n} does not match the stored configuration ({})",
                config.num_weights()
            )));
        }
        let values = r.f64s(n)?;
        let loss_weights = [r.f64()?, r.f64()?];
        let center = [r.f64()?, r.f64()?, r.f64()?];
        let scale = r.f64()?;
        let params = MlpParams::from_values(&config, values, loss_weights)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let wdro_lambda = r.f64()?;
                let m = r.f64s(n + 2)?;
                let v = r.f64s(n + 2)?;
                Some(AdamSnapshot {
                    adam: AdamState {
                        m,
                        v,
                        step,
                        beta1,
                        beta2,
                        eps,
                    },
                    wdro_lambda,
                })
            }
            t => return Err(Error::Checkpoint(format!("bad optimizer flag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            transform: NormalizationTransform { center, scale },
            optimizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if (self.bytes.len() - self.pos) / 8 < n {
            return Err(Error::Checkpoint("truncated file: parameter block".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = NetConfig {
            depth: 3,
            width: 6,
            skip_layers: vec![1],
            activation: Activation::Softplus { beta: 50.0 },
            init: InitScheme::Geometric,
        };
        let params = MlpParams::init(&config, 4).unwrap();
        let n = params.values.len() + 2;
        Checkpoint {
            params,
            transform: NormalizationTransform {
                center: [1.0, -2.0, 0.5],
                scale: 3.25,
            },
            optimizer: Some(AdamSnapshot {
                adam: AdamState {
                    m: (0..n).map(|i| i as f64 * 0.1).collect(),
                    v: (0..n).map(|i| i as f64 * 0.01).collect(),
                    step: 17,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                wdro_lambda: 79.5,
            }),
        }
    }

    #[test]
    fn round_trip_bytes_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let mut no_opt = ck.clone();
        no_opt.optimizer = None;
        assert_eq!(Checkpoint::from_bytes(&no_opt.to_bytes()).unwrap(), no_opt);
    }

    #[test]
    fn file_round_trip() {
        let ck = sample();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&ck, f.path()).unwrap();
        assert_eq!(load_checkpoint(f.path()).unwrap(), ck);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[7] = b'2';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let bytes = sample().to_bytes();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
