//! On-disk formats: JSON chain specs and the binary `DBTT` tensor container.
//!
//! A tensor file is laid out as
//!
//! ```text
//! b"DBTT" | version: u16 | dtype: u16 | rank: u16 | dims: rank × u64 | payload
//! ```
//!
//! with every integer and element little-endian and the payload last-dim
//! fastest. dtype 0 is `f32`, 1 is `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::DeButChain;
use crate::error::{DebutError, Result};
use crate::factor::{DeButFactor, FactorSignature};
use crate::generator::{GeneratorPlan, LayerSpec};
use crate::tensor::Tensor;

pub const CHAIN_SPEC_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 4] = b"DBTT";
pub const TENSOR_VERSION: u16 = 1;

/// One factor of a chain spec. `values`, when present, are in canonical
/// row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub s: usize,
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl FactorRecord {
    pub fn signature(&self) -> Result<FactorSignature> {
        FactorSignature::new(self.p, self.q, self.r, self.s, self.t)
    }
}

/// JSON chain description, factors rightmost-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpecFile {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<LayerSpec>,
    pub factors: Vec<FactorRecord>,
}

impl ChainSpecFile {
    pub fn from_chain(chain: &DeButChain, layer: Option<LayerSpec>, with_values: bool) -> Self {
        let factors = chain
            .factors()
            .iter()
            .map(|f| {
                let sig = f.signature();
                FactorRecord {
                    p: sig.p(),
                    q: sig.q(),
                    r: sig.r(),
                    s: sig.s(),
                    t: sig.t(),
                    values: with_values.then(|| f.values().to_vec()),
                }
            })
            .collect();
        ChainSpecFile {
            version: CHAIN_SPEC_VERSION,
            layer,
            factors,
        }
    }

    /// Structure-only spec of a generator plan.
    pub fn from_plan(plan: &GeneratorPlan, layer: Option<LayerSpec>) -> Result<Self> {
        Ok(Self::from_chain(&plan.to_chain()?, layer, false))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ChainSpecFile = serde_json::from_str(text)?;
        if spec.version != CHAIN_SPEC_VERSION {
            return Err(DebutError::Format(format!(
                "unsupported chain spec version {} (expected {CHAIN_SPEC_VERSION})",
                spec.version
            )));
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn signatures(&self) -> Result<Vec<FactorSignature>> {
        self.factors.iter().map(FactorRecord::signature).collect()
    }

    pub fn has_values(&self) -> bool {
        self.factors.iter().all(|f| f.values.is_some())
    }

    /// Validated chain; factors without values are zero-filled.
    pub fn to_chain(&self) -> Result<DeButChain> {
        self.build(|_, _| Ok(None))
    }

    /// Validated chain; every factor must carry values.
    pub fn to_valued_chain(&self) -> Result<DeButChain> {
        self.build(|i, _| Err(DebutError::MissingValues { factor: i + 1 }))
    }

    fn build(&self, missing: impl Fn(usize, &FactorRecord) -> Result<Option<Vec<f64>>>) -> Result<DeButChain> {
        let factors = self
            .factors
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let values = match &rec.values {
                    Some(v) => Some(v.clone()),
                    None => missing(i, rec)?,
                };
                DeButFactor::new(rec.signature()?, values)
            })
            .collect::<Result<Vec<_>>>()?;
        DeButChain::new(factors)
    }
}

/// Element type of a tensor file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u16 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u16) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(DebutError::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn write_tensor(mut w: impl Write, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let rank = u16::try_from(tensor.rank())
        .map_err(|_| DebutError::Format(format!("rank {} does not fit the header", tensor.rank())))?;
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&dtype.code().to_le_bytes())?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in tensor.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &x in tensor.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &x in tensor.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(mut r: impl Read) -> Result<(Tensor, Dtype)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(DebutError::Format("missing DBTT magic".into()));
    }
    let version = read_u16(&mut r)?;
    if version != TENSOR_VERSION {
        return Err(DebutError::Format(format!("unsupported tensor version {version}")));
    }
    let dtype = Dtype::from_code(read_u16(&mut r)?)?;
    let rank = read_u16(&mut r)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| DebutError::Format("dimension does not fit in memory".into()))?;
        dims.push(d);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DebutError::Format("element count overflows".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != len * dtype.size() {
        return Err(DebutError::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            len * dtype.size()
        )));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok((Tensor::new(dims, data)?, dtype))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    write_tensor(BufWriter::new(File::create(path)?), tensor, dtype)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<(Tensor, Dtype)> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::InitScheme;

    fn six_by_27() -> DeButChain {
        let sigs = [(18, 27, 2, 3, 1), (6, 18, 1, 3, 2), (6, 6, 3, 3, 2)]
            .map(|(p, q, r, s, t)| FactorSignature::new(p, q, r, s, t).unwrap());
        DeButChain::from_signatures(&sigs).unwrap()
    }

    #[test]
    fn chain_spec_roundtrip_is_bit_exact() {
        let chain = six_by_27().random_init(9, InitScheme::GaussianFanin);
        let layer = LayerSpec::new(3, 3, 6).named("conv");
        let spec = ChainSpecFile::from_chain(&chain, Some(layer), true);
        let back = ChainSpecFile::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_valued_chain().unwrap(), chain);
    }

    #[test]
    fn structure_only_spec() {
        let text = r#"{"version":1,"factors":[
            {"p":18,"q":27,"r":2,"s":3,"t":1},
            {"p":6,"q":18,"r":1,"s":3,"t":2},
            {"p":6,"q":6,"r":3,"s":3,"t":2}]}"#;
        let spec = ChainSpecFile::from_json(text).unwrap();
        assert!(!spec.has_values());
        let chain = spec.to_chain().unwrap();
        assert_eq!(chain.shape(), (6, 27));
        assert!(matches!(
            spec.to_valued_chain(),
            Err(DebutError::MissingValues { factor: 1 })
        ));
    }

    #[test]
    fn chain_spec_errors() {
        let broken_t = r#"{"version":1,"factors":[
            {"p":18,"q":27,"r":2,"s":3,"t":1},
            {"p":6,"q":18,"r":1,"s":3,"t":1}]}"#;
        let err = ChainSpecFile::from_json(broken_t).unwrap().to_chain().unwrap_err();
        assert_eq!(err.to_string(), "TRecursionBreak at factor 2");

        let bad_len = r#"{"version":1,"factors":[{"p":2,"q":2,"r":2,"s":2,"t":1,"values":[1,2,3]}]}"#;
        assert!(matches!(
            ChainSpecFile::from_json(bad_len).unwrap().to_chain(),
            Err(DebutError::ValueLengthMismatch { expected: 4, got: 3 })
        ));
        assert!(ChainSpecFile::from_json(r#"{"version":2,"factors":[]}"#).is_err());
    }

    #[test]
    fn tensor_roundtrip_f64_is_bit_exact() {
        let t = Tensor::from_fn(vec![2, 3, 4], |i| (i[0] as f64 - 0.3) * 1e-7 + i[1] as f64 / 3.0 - i[2] as f64);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F64).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 2 + 2 + 3 * 8 + 24 * 8);
        assert_eq!(&buf[..4], b"DBTT");
        assert_eq!(buf[6..8], [1, 0]);
        let (back, dtype) = read_tensor(&buf[..]).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_f32_rounds() {
        let t = Tensor::new(vec![3], vec![0.1, 2.5, -1e10]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F32).unwrap();
        let (back, dtype) = read_tensor(&buf[..]).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(back.data(), [0.1f32 as f64, 2.5, -1e10f32 as f64]);
    }

    #[test]
    fn tensor_header_checks() {
        let t = Tensor::zeros(vec![2, 2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Dtype::F64).unwrap();
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&bad[..]).is_err());
        let mut bad = buf;
        bad[6] = 7;
        assert!(read_tensor(&bad[..]).is_err());
    }
}
