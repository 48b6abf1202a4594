//! Binary checkpoint files.
//!
//! ```text
//! "DFDM" | version u32 | count u32 | count × tensor | iteration u64 | seed u64
//! tensor = name_len u16 | name (UTF-8) | rank u8 | dims u32 × rank | f64 × numel
//! ```
//!
//! All integers and floats are little-endian. Besides the network
//! parameters the file holds optimizer velocities under `optim.<param>` and
//! the training mean color under `meta.mean_rgb`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFDM";
pub const VERSION: u32 = 1;

const OPTIM_PREFIX: &str = "optim.";
const MEAN_KEY: &str = "meta.mean_rgb";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub velocity: BTreeMap<String, Tensor>,
    pub mean_rgb: [f64; 3],
    /// Completed training iterations.
    pub iteration: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        entries.extend(
            self.velocity
                .iter()
                .map(|(n, t)| (format!("{OPTIM_PREFIX}{n}"), t)),
        );
        let mean = Tensor::new([3], self.mean_rgb.to_vec())?;
        entries.push((MEAN_KEY.to_string(), &mean));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(entries.len())
                .map_err(|_| Error::contract("too many tensors"))?
                .to_le_bytes(),
        );
        for (name, t) in entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::contract(format!("name `{}` too long", name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::contract("rank exceeds 255"))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::contract("dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {}", version)));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut velocity = BTreeMap::new();
        let mut mean_rgb = None;
        for _ in 0..count {
            let at = r.pos;
            let len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank = usize::from(r.take(1)?[0]);
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| {
                    Error::format(r.bytes.len(), format!("payload of `{}` is truncated", name))
                })?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data)?;
            if name == MEAN_KEY {
                let d = tensor.data();
                if d.len() != 3 {
                    return Err(Error::format(at, "mean color must hold 3 values"));
                }
                mean_rgb = Some([d[0], d[1], d[2]]);
            } else if let Some(param) = name.strip_prefix(OPTIM_PREFIX) {
                velocity.insert(param.to_string(), tensor);
            } else {
                params
                    .insert(name, tensor)
                    .map_err(|e| Error::format(at, e.to_string()))?;
            }
        }
        let iteration = r.u64()?;
        let seed = r.u64()?;
        if r.remaining() != 0 {
            return Err(Error::format(r.pos, "trailing bytes after metadata"));
        }
        for (name, v) in &velocity {
            match params.get(name) {
                Some(p) if p.shape() == v.shape() => {}
                _ => {
                    return Err(Error::format(
                        0,
                        format!("velocity `{}` has no matching parameter", name),
                    ))
                }
            }
        }
        Ok(Checkpoint {
            params,
            velocity,
            mean_rgb: mean_rgb.ok_or_else(|| Error::format(12, "mean color missing"))?,
            iteration,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.bytes.len(),
                format!("truncated: needed {} bytes at offset {}", n, self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .insert(
                "a.weight",
                Tensor::from_fn([2, 3, 1, 1], |i| i as f64 * 0.1 - 0.2),
            )
            .unwrap();
        params
            .insert(
                "a.bias",
                Tensor::new([2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(),
            )
            .unwrap();
        let velocity = BTreeMap::from([(
            "a.bias".to_string(),
            Tensor::new([2], vec![1e-300, 3.5]).unwrap(),
        )]);
        Checkpoint {
            params,
            velocity,
            mean_rgb: [101.5, 102.25, 103.0],
            iteration: 7,
            seed: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = example();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], &[0x44, 0x46, 0x44, 0x4D]);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (name, t) in ck.params.iter() {
            let got = back.params.get(name).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(got), bits(t));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = example().to_bytes().unwrap();
        for len in 0..bytes.len() {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&bytes[..len]),
                    Err(Error::Format { .. })
                ),
                "{len}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = example().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
