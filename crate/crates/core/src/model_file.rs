//! Binary model file.
//!
//! ```text
//! "RPTM"                      4 bytes magic
//! version                     u16 little endian (currently 1)
//! config_len, config          u32 LE byte length + UTF-8 JSON NetworkConfig
//! per parameter, build order  u32 LE byte length + little-endian f32 values
//! per batch norm, build order u32 LE byte length + running mean (f32 LE)
//!                             u32 LE byte length + running variance (f32 LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Network, NetworkConfig};

pub const MAGIC: &[u8; 4] = b"RPTM";
pub const FORMAT_VERSION: u16 = 1;
const MAX_CONFIG_BYTES: usize = 1 << 20;

fn put_blob(out: &mut Vec<u8>, values: &[f32]) {
    out.extend_from_slice(&((values.len() * 4) as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(net: &Network<f32>) -> Vec<u8> {
    let config = serde_json::to_vec(net.config()).expect("config serialises");
    let mut out = Vec::with_capacity(16 + config.len() + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for p in net.params() {
        put_blob(&mut out, p.value.data());
    }
    for s in net.running_stats() {
        put_blob(&mut out, &s.mean);
        put_blob(&mut out, &s.var);
    }
    out
}

pub fn write_model<W: Write>(net: &Network<f32>, mut w: W) -> Result<()> {
    w.write_all(&to_bytes(net))?;
    Ok(())
}

pub fn save(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(net))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::ModelFormat(format!("truncated while reading {what}")));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn blob_into(&mut self, out: &mut [f32], what: &str) -> Result<()> {
        let len = self.u32(what)?;
        if len != out.len() * 4 {
            return Err(Error::ModelFormat(format!("{what}: expected {} bytes, found {len}", out.len() * 4)));
        }
        for (v, b) in out.iter_mut().zip(self.take(len, what)?.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        Ok(())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let mut cur = Cursor { buf: bytes };
    let magic = cur.take(4, "magic").map_err(|_| Error::VersionMismatch("file too short".into()))?;
    if magic != MAGIC {
        return Err(Error::VersionMismatch(format!("bad magic {magic:02x?}")));
    }
    let v = cur.take(2, "version").map_err(|_| Error::VersionMismatch("missing version".into()))?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let config_len = cur.u32("config length")?;
    if config_len > MAX_CONFIG_BYTES {
        return Err(Error::ModelFormat(format!("config block of {config_len} bytes")));
    }
    let config: NetworkConfig = serde_json::from_slice(cur.take(config_len, "config")?)
        .map_err(|e| Error::ModelFormat(format!("config: {e}")))?;
    config.validate()?;

    // Refuse to allocate more than the file can possibly hold.
    let expected = config.param_count().ok_or_else(|| Error::ModelFormat("parameter count overflows".into()))?;
    if expected.saturating_mul(4) > cur.buf.len() as u128 {
        return Err(Error::ModelFormat(format!("config needs {expected} parameters, file is too short")));
    }

    let mut net = Network::<f32>::build(&config)?;
    for p in net.params_mut() {
        let name = p.name.clone();
        cur.blob_into(p.value.data_mut(), &name)?;
    }
    for (i, s) in net.running_stats_mut().iter_mut().enumerate() {
        cur.blob_into(&mut s.mean, &format!("running mean {i}"))?;
        cur.blob_into(&mut s.var, &format!("running variance {i}"))?;
    }
    if !cur.buf.is_empty() {
        return Err(Error::ModelFormat(format!("{} trailing bytes", cur.buf.len())));
    }
    Ok(net)
}

pub fn read_model<R: Read>(mut r: R) -> Result<Network<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<Network<f32>> {
    from_bytes(&std::fs::read(path)?)
}
