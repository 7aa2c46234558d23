//! Parameter checkpoint file.
//!
//! Little-endian layout: 8-byte magic `OFRLQF01`; descriptor block (u8
//! architecture, u8 topology, u8 activation, u8 encoding tag, u32 heads, u32
//! states, u32 actions, f64 tabular init scale, u32 hidden layer count, u32
//! per hidden width); u64 parameter count; f64 parameters; trailing CRC32 of
//! everything before it.

use std::fs;
use std::path::Path;

use crate::env::ObsEncoding;

use super::{Activation, Architecture, EnsembleSpec, QEnsemble, QFuncError, Topology};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OFRLQF01";

fn err(msg: impl Into<String>) -> QFuncError {
    QFuncError::Checkpoint(msg.into())
}

pub(crate) fn to_bytes(q: &QEnsemble) -> Vec<u8> {
    let s = q.spec();
    let mut out = Vec::with_capacity(64 + 8 * q.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(match s.architecture {
        Architecture::Tabular => 0,
        Architecture::Linear => 1,
        Architecture::Mlp => 2,
    });
    out.push(match s.topology {
        Topology::MultiHead => 0,
        Topology::Separate => 1,
    });
    out.push(match s.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.push(s.encoding.tag());
    for v in [s.heads, s.num_states, s.num_actions] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&s.init_scale.to_le_bytes());
    out.extend_from_slice(&(s.hidden.len() as u32).to_le_bytes());
    for &w in &s.hidden {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(q.num_params() as u64).to_le_bytes());
    for p in q.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QFuncError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, QFuncError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, QFuncError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, QFuncError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, QFuncError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<QEnsemble, QFuncError> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(err("checksum mismatch"));
    }
    let mut c = Cursor { bytes: body, pos: 8 };
    let architecture = match c.u8()? {
        0 => Architecture::Tabular,
        1 => Architecture::Linear,
        2 => Architecture::Mlp,
        t => return Err(err(format!("unknown architecture tag {t}"))),
    };
    let topology = match c.u8()? {
        0 => Topology::MultiHead,
        1 => Topology::Separate,
        t => return Err(err(format!("unknown topology tag {t}"))),
    };
    let activation = match c.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        t => return Err(err(format!("unknown activation tag {t}"))),
    };
    let tag = c.u8()?;
    let encoding = ObsEncoding::from_tag(tag).ok_or_else(|| err(format!("unknown encoding tag {tag}")))?;
    let heads = c.u32()? as usize;
    let num_states = c.u32()? as usize;
    let num_actions = c.u32()? as usize;
    let init_scale = c.f64()?;
    let layers = c.u32()? as usize;
    if layers > 64 {
        return Err(err("too many hidden layers"));
    }
    let hidden = (0..layers).map(|_| c.u32().map(|w| w as usize)).collect::<Result<Vec<_>, _>>()?;
    let spec = EnsembleSpec {
        architecture,
        topology,
        heads,
        num_states,
        num_actions,
        encoding,
        hidden,
        activation,
        init_scale,
    };
    let count = c.u64()? as usize;
    let expected = QEnsemble::zeros(spec.clone())?.num_params();
    if count != expected || body.len() - c.pos != count * 8 {
        return Err(err("parameter count does not match descriptor"));
    }
    let params = (0..count).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
    QEnsemble::from_params(spec, params)
}

pub fn save_checkpoint(q: &QEnsemble, path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, to_bytes(q))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<QEnsemble, crate::Error> {
    let bytes = fs::read(path)?;
    Ok(from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn round_trip_and_corruption() {
        let spec = EnsembleSpec {
            architecture: Architecture::Mlp,
            topology: Topology::Separate,
            heads: 3,
            num_states: 6,
            num_actions: 4,
            encoding: ObsEncoding::Index,
            hidden: vec![5, 7],
            activation: Activation::Tanh,
            init_scale: 0.0,
        };
        let q = QEnsemble::new(spec, &mut stream(1, Stream::Init)).unwrap();
        let bytes = to_bytes(&q);
        assert_eq!(from_bytes(&bytes).unwrap(), q);
        let mut bad = bytes.clone();
        bad[40] ^= 0x10;
        assert!(from_bytes(&bad).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        save_checkpoint(&q, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), q);
    }
}
