//! Binary checkpoints of a [`PeerParameterStore`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IPA1" | version u32 | N u32 | layers u32
//!   per layer: weight rank u32, dims u32.., bias rank u32, dims u32..
//!   per peer:  seed u64, store version u64
//! body:   per peer, every tensor in layer order as f32
//! footer: per peer CRC-64/XZ over that peer's (seed, version, body) bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::alignment::PeerParameterStore;
use crate::error::{Error, Result};
use crate::nn::{ParameterSet, ShapeSignature};

pub const MAGIC: &[u8; 4] = b"IPA1";
pub const VERSION: u32 = 1;

const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn peer_record(seed: u64, version: u64) -> [u8; 16] {
    let mut r = [0u8; 16];
    r[..8].copy_from_slice(&seed.to_le_bytes());
    r[8..].copy_from_slice(&version.to_le_bytes());
    r
}

pub fn encode_store(store: &PeerParameterStore) -> Vec<u8> {
    let sig = store.signature();
    let mut out = Vec::with_capacity(64 + store.len() * (sig.num_params() * 4 + 24));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, store.len());
    put_u32(&mut out, sig.0.len());
    for (w, b) in &sig.0 {
        for shape in [w, b] {
            put_u32(&mut out, shape.len());
            for &d in shape {
                put_u32(&mut out, d);
            }
        }
    }
    for (p, &v) in store.peers().iter().zip(store.versions()) {
        out.extend_from_slice(&peer_record(p.seed, v));
    }
    let mut sums = Vec::with_capacity(store.len());
    for (p, &v) in store.peers().iter().zip(store.versions()) {
        let start = out.len();
        for t in p.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut digest = CRC.digest();
        digest.update(&peer_record(p.seed, v));
        digest.update(&out[start..]);
        sums.push(digest.finalize());
    }
    for s in sums {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Data(format!(
                "checkpoint truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_store(bytes: &[u8]) -> Result<PeerParameterStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint: bad magic at offset 0".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let n = r.u32()?;
    let layers = r.u32()?;
    if n == 0 || layers == 0 || n > 1 << 16 || layers > 1 << 16 {
        return Err(Error::Data(format!("implausible checkpoint header: {n} peers, {layers} layers")));
    }
    let mut sig = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut shapes = [Vec::new(), Vec::new()];
        for shape in &mut shapes {
            let rank = r.u32()?;
            if rank > 8 {
                return Err(Error::Data(format!("tensor rank {rank} at offset {}", r.pos - 4)));
            }
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
        }
        let [w, b] = shapes;
        sig.push((w, b));
    }
    let sig = ShapeSignature(sig);
    let mut meta = Vec::with_capacity(n);
    for _ in 0..n {
        meta.push((r.u64()?, r.u64()?));
    }
    let count = sig.num_params();
    let body_len = count
        .checked_mul(4 * n)
        .ok_or_else(|| Error::Data("checkpoint body size overflows".into()))?;
    let expected = r.pos + body_len + 8 * n;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "checkpoint header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let body_start = r.pos;
    let footer = &bytes[body_start + body_len..];
    let mut peers = Vec::with_capacity(n);
    let mut versions = Vec::with_capacity(n);
    for (k, &(seed, v)) in meta.iter().enumerate() {
        let raw = r.take(count * 4)?;
        let stored = u64::from_le_bytes(footer[8 * k..8 * k + 8].try_into().unwrap());
        let mut digest = CRC.digest();
        digest.update(&peer_record(seed, v));
        digest.update(raw);
        let actual = digest.finalize();
        if stored != actual {
            return Err(Error::Checksum(format!(
                "peer {k}: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        peers.push(ParameterSet::from_flat(&sig, &values, seed)?);
        versions.push(v);
    }
    PeerParameterStore::with_versions(peers, versions)
}

/// Write through a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn save_checkpoint(store: &PeerParameterStore, path: &Path) -> Result<()> {
    let bytes = encode_store(store);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PeerParameterStore> {
    decode_store(&fs::read(path)?)
}
