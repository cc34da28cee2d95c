//! DDMP checkpoint files. All integers and floats are little-endian.
//!
//! ```text
//! magic "DDMP" | version u32
//! config: len u64 | JSON bytes
//! tensors: count u32 | tensor*
//! optimizer: flag u8 | [step u64 | count u32 | (name, m tensor, v tensor)*]
//! rng: seed u64 | stream u64 | word_pos u128
//! codec: patch u32 | mean f64 | std f64 | mixing tensor
//!
//! tensor: name (len u32 | utf8) | dtype u8 (1 = f64) | ndim u8 | dims u64* | payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ctrldiff::codec::Codec;
use ctrldiff::tensor::RngState;
use ctrldiff::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"DDMP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    /// First and second moments of each trainable tensor, by name.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub rng: RngState,
    pub codec: Codec,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.value)
            .ok_or_else(|| Error::Format(format!("checkpoint: no tensor named {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&count_u32(self.tensors.len())?.to_le_bytes());
        for t in &self.tensors {
            write_tensor(&mut out, &t.name, &t.value)?;
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                out.extend_from_slice(&count_u32(o.moments.len())?.to_le_bytes());
                for (name, m, v) in &o.moments {
                    write_tensor(&mut out, name, m)?;
                    write_tensor(&mut out, name, v)?;
                }
            }
        }
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&count_u32(self.codec.patch_size())?.to_le_bytes());
        out.extend_from_slice(&self.codec.pixel_mean().to_le_bytes());
        out.extend_from_slice(&self.codec.pixel_std().to_le_bytes());
        write_tensor(&mut out, "codec.mixing", self.codec.mixing())?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint: unsupported version {version} (expected {VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let config = serde_json::from_slice(r.take(len)?)?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let (name, value) = r.tensor()?;
            tensors.push(NamedTensor { name, value });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let n = r.u32()? as usize;
                let mut moments = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    let (name, m) = r.tensor()?;
                    let (name_v, v) = r.tensor()?;
                    if name != name_v {
                        return Err(Error::Format(format!("checkpoint: moment names {name} / {name_v}")));
                    }
                    moments.push((name, m, v));
                }
                Some(OptimizerSnapshot { step, moments })
            }
            f => return Err(Error::Format(format!("checkpoint: bad optimizer flag {f}"))),
        };
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        let patch = r.u32()? as usize;
        let mean = r.f64()?;
        let std = r.f64()?;
        let (_, mixing) = r.tensor()?;
        let codec = Codec::from_parts(patch, mixing, mean, std)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint: {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            tensors,
            optimizer,
            rng,
            codec,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn count_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("checkpoint: count {n} exceeds u32")))
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    out.extend_from_slice(&count_u32(name.len())?.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    let ndim = u8::try_from(t.shape().len())
        .map_err(|_| Error::Format(format!("checkpoint: {name} has too many dims")))?;
    out.push(ndim);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
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
            .ok_or_else(|| Error::Format(format!("checkpoint: truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint: tensor name is not UTF-8".into()))?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("checkpoint: {name} has unknown dtype {dtype}")));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Format(format!("checkpoint: {name} shape {shape:?} overruns file")))?;
        let data = self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctrldiff::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(4);
        rng.next_u64();
        Checkpoint {
            config: serde_json::json!({"model": {"base_channels": 4}, "seed": 9}),
            tensors: vec![
                NamedTensor {
                    name: "a.w".into(),
                    value: Tensor::new(vec![2, 3], vec![1.0, -0.0, 2.5, f64::MIN_POSITIVE, 1e300, -7.0]).unwrap(),
                },
                NamedTensor {
                    name: "b".into(),
                    value: Tensor::vector(vec![0.125]),
                },
            ],
            optimizer: Some(OptimizerSnapshot {
                step: 3,
                moments: vec![("a.w".into(), Tensor::zeros(&[2, 3]), Tensor::full(&[2, 3], 0.5))],
            }),
            rng: rng.state(),
            codec: Codec::new(2, 1, 0.4, 0.3).unwrap(),
        }
    }

    #[test]
    fn roundtrip_is_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"DDMP");
        let none = Checkpoint { optimizer: None, ..c };
        let b2 = none.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&b2).unwrap(), none);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let e = Checkpoint::from_bytes(&v2).unwrap_err();
        assert!(e.to_string().contains("version 2"), "{e}");
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        for cut in [0, 3, 7, 20, bytes.len() / 2] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
