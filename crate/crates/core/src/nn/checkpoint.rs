//! `WCK1` checkpoints: magic, `u32` format version, `u32`-length-prefixed JSON network
//! config, `u32` tensor count, then per tensor: `u32` name length, UTF-8 name, `u32` rank,
//! `u32` dims, little-endian `f32` data. All integers little-endian.

use std::fs;
use std::path::Path;

use super::{Param, TinyNet, TinyNetConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"WCK1";
const VERSION: u32 = 1;

pub fn write_checkpoint(net: &TinyNet) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(MAGIC);
    put(&mut out, VERSION);
    let cfg = serde_json::to_vec(net.config()).expect("config serializes");
    put(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put(&mut out, net.params().len() as u32);
    for p in net.params() {
        put(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put(&mut out, p.shape.len() as u32);
        for &d in &p.shape {
            put(&mut out, d as u32);
        }
        for v in &p.data {
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
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> std::result::Result<TinyNet, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err("missing WCK1 magic".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version as u32 != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let n = r.u32().ok_or("truncated config length")?;
    let cfg: TinyNetConfig = serde_json::from_slice(r.take(n).ok_or("truncated config")?)
        .map_err(|e| format!("bad config: {e}"))?;
    let count = r.u32().ok_or("truncated tensor count")?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32().ok_or("truncated name length")?;
        let name = String::from_utf8(r.take(len).ok_or("truncated name")?.to_vec())
            .map_err(|_| "non-UTF-8 tensor name")?;
        let rank = r.u32().ok_or("truncated rank")?;
        let shape = (0..rank)
            .map(|_| r.u32())
            .collect::<Option<Vec<_>>>()
            .ok_or("truncated shape")?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(4 * numel)
            .ok_or_else(|| format!("truncated data for {name}"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Param { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    TinyNet::from_params(cfg, params).map_err(|e| e.to_string())
}

pub fn save_checkpoint(net: &TinyNet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, write_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TinyNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|reason| Error::format(path, reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests_support::tiny_net;

    #[test]
    fn round_trip_is_exact() {
        let net = tiny_net(16, &[(4, 2), (8, 2)], 9);
        let bytes = write_checkpoint(&net);
        assert_eq!(&bytes[..4], b"WCK1");
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let net = tiny_net(8, &[(4, 2)], 1);
        let mut bytes = write_checkpoint(&net);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(read_checkpoint(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck/net.wck");
        let net = tiny_net(8, &[(4, 2)], 2);
        save_checkpoint(&net, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), net);
    }
}
