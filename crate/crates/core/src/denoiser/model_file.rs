//! Binary model files.
//!
//! Layout: magic `LWDM`, u32 version, u32 tensor count, then per tensor a
//! u32 name length, the UTF-8 name, u32 rank, u32 dims and a little-endian
//! f32 payload. Integers are little-endian. The `meta.arch` tensor holds the
//! [`TinyConfig`] fields.

use std::io::{Read, Write};
use std::path::Path;

use super::tiny::{TinyConfig, TinyNet};
use crate::error::{Error, Result};
use crate::field::Rng;

const MAGIC: &[u8; 4] = b"LWDM";
const VERSION: u32 = 1;
const ARCH: &str = "meta.arch";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(model: &TinyNet<f32>) -> Result<Vec<u8>> {
    let cfg = model.config();
    let arch = [
        cfg.in_channels,
        cfg.width,
        cfg.groups,
        cfg.time_dim,
        cfg.emb_dim,
    ]
    .map(|v| v as f32);
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, model.entries().len() + 1)?;
    put_tensor(&mut out, ARCH, &[arch.len()], &arch)?;
    for e in model.entries() {
        put_tensor(&mut out, &e.name, &e.shape, &model.params()[e.offset..e.offset + e.len()])?;
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated model file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_tensor(c: &mut Cursor) -> Result<Tensor> {
    let len = c.u32()?;
    let name = String::from_utf8(c.take(len)?.to_vec())
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let rank = c.u32()?;
    let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
    let bytes = c.take(count.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor { name, shape, data })
}

pub fn decode(buf: &[u8]) -> Result<TinyNet<f32>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not an LWDM model file".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let count = c.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        tensors.push(read_tensor(&mut c)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }

    let arch = tensors
        .iter()
        .find(|t| t.name == ARCH)
        .ok_or_else(|| Error::Format(format!("missing {ARCH}")))?;
    if arch.data.len() != 5 || arch.data.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
        return Err(Error::Format(format!("malformed {ARCH}")));
    }
    let a: Vec<usize> = arch.data.iter().map(|&v| v as usize).collect();
    let cfg = TinyConfig {
        in_channels: a[0],
        width: a[1],
        groups: a[2],
        time_dim: a[3],
        emb_dim: a[4],
    };
    let layout_probe = TinyNet::<f32>::new(cfg, &mut Rng::new(0))?;
    let mut params = vec![0f32; layout_probe.num_params()];
    for e in layout_probe.entries() {
        let t = tensors
            .iter()
            .find(|t| t.name == e.name)
            .ok_or_else(|| Error::Format(format!("missing tensor {}", e.name)))?;
        if t.shape != e.shape {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, expected {:?}",
                e.name, t.shape, e.shape
            )));
        }
        params[e.offset..e.offset + e.len()].copy_from_slice(&t.data);
    }
    if tensors.len() != layout_probe.entries().len() + 1 {
        return Err(Error::Format("unexpected extra tensors".into()));
    }
    TinyNet::from_params(cfg, params)
}

pub fn save(model: &TinyNet<f32>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TinyNet<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TinyNet<f32> {
        let mut m = TinyNet::<f32>::new(TinyConfig::default(), &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        for p in m.params_mut() {
            *p += rng.uniform_range(-0.1, 0.1) as f32;
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..4], b"LWDM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lwdm");
        let m = model();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap().params(), m.params());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&model()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(decode(&ver).is_err());
    }
}
