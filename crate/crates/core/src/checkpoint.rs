//! Binary checkpoint format and its text sidecar.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic    b"PACQNET\0"
//! version  u32
//! rotations, in_channels, hidden_channels, height, width   u32 each
//! config_hash u64
//! n_arrays u32
//! n_arrays × { name_len u16, name utf8, ndim u8, dims u32 × ndim }
//! parameter values as f64, arrays in the order declared above
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridsim::Primitive;
use crate::qfunc::QNetwork;

pub const MAGIC: &[u8; 8] = b"PACQNET\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub rotations: usize,
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Hex, since TOML integers are signed.
    pub config_hash: String,
    pub arrays: Vec<ArrayInfo>,
}

impl Header {
    pub fn param_count(&self) -> usize {
        self.arrays.iter().map(|a| a.dims.iter().product::<usize>()).sum()
    }
}

fn header_for(net: &QNetwork, config_hash: u64) -> Header {
    let mut arrays = Vec::new();
    for p in Primitive::ALL {
        for (name, dims, _) in net.net(p).arrays() {
            arrays.push(ArrayInfo {
                name: format!("{}.{name}", p.name()),
                dims,
            });
        }
    }
    Header {
        version: VERSION,
        rotations: net.rotations,
        in_channels: net.in_channels,
        hidden_channels: net.hidden_channels,
        height: net.height,
        width: net.width,
        config_hash: format!("{config_hash:016x}"),
        arrays,
    }
}

pub fn encode(net: &QNetwork, config_hash: u64) -> Vec<u8> {
    let header = header_for(net, config_hash);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [net.rotations, net.in_channels, net.hidden_channels, net.height, net.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(header.arrays.len() as u32).to_le_bytes());
    for a in &header.arrays {
        out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(a.dims.len() as u8);
        for &d in &a.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in Primitive::ALL {
        for v in net.params(p) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let rotations = r.u32()? as usize;
    let in_channels = r.u32()? as usize;
    let hidden_channels = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let hash = r.u64()?;
    let n = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("array name is not utf8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        arrays.push(ArrayInfo { name, dims });
    }
    let header = Header {
        version,
        rotations,
        in_channels,
        hidden_channels,
        height,
        width,
        config_hash: format!("{hash:016x}"),
        arrays,
    };
    Ok((header, r.pos))
}

pub fn decode(bytes: &[u8]) -> Result<(QNetwork, Header)> {
    let (header, offset) = decode_header(bytes)?;
    let mut r = Reader { bytes, pos: offset };
    let total = header.param_count();
    if total % 3 != 0 {
        return Err(Error::Checkpoint("parameter count not divisible by three networks".into()));
    }
    let per_net = total / 3;
    let mut nets: [Vec<f64>; 3] = Default::default();
    for net in nets.iter_mut() {
        *net = (0..per_net).map(|_| r.f64()).collect::<Result<_>>()?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let net = QNetwork::from_parts(
        header.rotations,
        header.height,
        header.width,
        header.in_channels,
        header.hidden_channels,
        nets,
    )?;
    if header != header_for(&net, u64::from_str_radix(&header.config_hash, 16).unwrap_or(0)) {
        return Err(Error::Checkpoint("array table does not match network layout".into()));
    }
    Ok((net, header))
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Writes `path` and its `.meta` sidecar.
pub fn save(path: &Path, net: &QNetwork, config_hash: u64) -> Result<()> {
    std::fs::write(path, encode(net, config_hash))?;
    let meta = toml::to_string(&header_for(net, config_hash))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(meta_path(path), meta)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(QNetwork, Header)> {
    decode(&std::fs::read(path)?)
}
