//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "COMPNET-CKPT-1\n"
//! u64 header length, header JSON { network, adam: { config, t } | null }
//! u32 parameter count
//! per parameter: u32 name length, name (UTF-8), u32 rank, u64 × rank dims,
//!                f64 × len values
//! if adam: per parameter m values, then per parameter v values (f64)
//! ```

use super::adam::{AdamConfig, AdamState};
use super::spec::NetworkSpec;
use crate::autodiff::{ParamSet, Parameter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &str = "COMPNET-CKPT-1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkSpec,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkSpec,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            network: self.network.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                t: a.t,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 8 * self.params.scalar_count() * 3);
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name().as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            let shape = p.value().shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, p.value());
        }
        if let Some(adam) = &self.adam {
            for t in adam.m.iter().chain(&adam.v) {
                put_values(&mut out, t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC.as_bytes() {
            return Err(Error::Format("not a COMPNET-CKPT-1 checkpoint".into()));
        }
        let n = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let value = r.tensor(shape)?;
            params.push(Parameter::new(name, value))?;
        }
        header.network.check_params(&params)?;
        let adam = match header.adam {
            Some(h) => {
                let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.value().shape().to_vec()).collect();
                let m = shapes.iter().map(|s| r.tensor(s.clone())).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| r.tensor(s.clone())).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    config: h.config,
                    t: h.t,
                    m,
                    v,
                })
            }
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            network: header.network,
            params,
            adam,
        })
    }

    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        crate::io::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {}", self.pos))
        })?;
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

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Head;

    fn sample_checkpoint() -> Checkpoint {
        let network = NetworkSpec::toy(Head::IndependentSigmoid);
        let params = network.init_params(5).unwrap();
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.t = 7;
        adam.m[0].data_mut()[3] = 0.125;
        adam.v[1].data_mut()[0] = -2.5;
        Checkpoint {
            network,
            params,
            adam: Some(adam),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert!(bytes.starts_with(b"COMPNET-CKPT-1\n"));
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn truncation_and_bad_magic_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
