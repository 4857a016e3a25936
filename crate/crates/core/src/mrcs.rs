//! MRCS measurement files.
//!
//! Layout, little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `MRCS`                            |
//! | 4      | 2    | version (1)                             |
//! | 6      | 2    | channels                                |
//! | 8      | 4    | m                                       |
//! | 12     | 4    | beta numerator                          |
//! | 16     | 4    | beta denominator                        |
//! | 20     | 4    | k                                       |
//! | 24     | 4    | N                                       |
//! | 28     | 4    | stored measurements per channel         |
//! | 32     | 8    | seed                                    |
//! | 40     | 4 each | `channels x stored` `f32` values, channel-major |
//!
//! A full file stores `stage_dims[k-1]` values per channel; a truncated one
//! stores any shorter prefix.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sensing::{Beta, MeasurementSet, SensingConfig};

pub const MAGIC: &[u8; 4] = b"MRCS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 40;

pub fn encode_mrcs(config: &SensingConfig, set: &MeasurementSet) -> Result<Vec<u8>> {
    if set.stage_dims() != config.stage_dims() || set.source_shape().0 != config.channels() {
        return Err(Error::Shape("measurement set does not belong to this sensing config".into()));
    }
    let stored = set.available();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * config.channels() * stored);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.channels() as u16).to_le_bytes());
    for v in [
        config.base_dim(),
        config.beta().num() as usize,
        config.beta().den() as usize,
        config.stages(),
        config.signal_dim(),
        stored,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("header field {v} does not fit in 32 bits")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&config.seed().to_le_bytes());
    for c in 0..config.channels() {
        for v in set.channel(c) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format { path: self.label.to_string(), offset: offset as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a file image; `label` names the source in error messages.
pub fn decode_mrcs(bytes: &[u8], label: &str) -> Result<(SensingConfig, MeasurementSet)> {
    let mut cur = Cursor { bytes, pos: 0, label };
    if cur.take(4, "magic")? != MAGIC {
        return Err(cur.fail(0, "bad magic, expected MRCS"));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(cur.fail(4, format!("unsupported version {version}")));
    }
    let channels = cur.u16("channels")? as usize;
    let m = cur.u32("m")? as usize;
    let num = cur.u32("beta numerator")?;
    let den = cur.u32("beta denominator")?;
    let k = cur.u32("k")? as usize;
    let n = cur.u32("N")? as usize;
    let stored = cur.u32("stored length")? as usize;
    let seed = cur.u64("seed")?;
    let config = Beta::new(num, den)
        .and_then(|beta| SensingConfig::new(m, beta, k, n, channels, seed))
        .map_err(|e| cur.fail(6, format!("invalid sensing header: {e}")))?;
    if stored > config.final_dim() {
        return Err(cur.fail(28, format!("stored length {stored} exceeds final stage dimension {}", config.final_dim())));
    }
    let side = config
        .image_side()
        .ok_or_else(|| cur.fail(24, format!("N = {n} is not a square image size")))?;
    let mut vectors = Vec::with_capacity(channels);
    for c in 0..channels {
        let raw = cur.take(4 * stored, &format!("channel {c} measurements"))?;
        vectors.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect());
    }
    if cur.pos != bytes.len() {
        return Err(cur.fail(cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let set = MeasurementSet::from_channels(config.stage_dims().to_vec(), (channels, side, side), vectors)?;
    Ok((config, set))
}

pub fn write_mrcs(path: &Path, config: &SensingConfig, set: &MeasurementSet) -> Result<()> {
    let bytes = encode_mrcs(config, set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mrcs(path: &Path) -> Result<(SensingConfig, MeasurementSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mrcs(&bytes, &path.display().to_string())
}
