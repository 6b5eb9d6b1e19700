//! Binary checkpoint format.
//!
//! ```text
//! "KRMT"            magic
//! u16               format version
//! u32 x 6, f64      vocab_size d_model n_layers n_heads d_ff max_len dropout
//! u32               tensor count
//! per tensor:       u32 name length, name bytes, u32 rank, u32 dims..., f64 values
//! ```
//! All integers and reals are little-endian.

use std::path::Path;

use super::config::ScorerConfig;
use super::layout::Layout;
use super::params::Parameters;
use crate::error::{CheckpointErrorKind as Kind, Error, Result};

pub const MAGIC: &[u8; 4] = b"KRMT";
pub const VERSION: u16 = 1;

fn err(kind: Kind, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        kind,
        detail: detail.into(),
    }
}

pub fn to_bytes(params: &Parameters) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(64 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    let tensors = params.layout().tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &params.as_slice()[t.range()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(err(
                Kind::Truncated,
                format!("needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Parameters> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4).map_err(|_| err(Kind::BadMagic, "file shorter than magic"))?;
    if magic != MAGIC {
        return Err(err(Kind::BadMagic, format!("found {magic:?}")));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(err(Kind::Version, format!("file version {version}, supported {VERSION}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let cfg = ScorerConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        max_len: dims[5],
        dropout: r.f64()?,
    };
    cfg.validate()?;
    let layout = Layout::new(&cfg);
    let count = r.u32()? as usize;
    if count != layout.tensors().len() {
        return Err(err(
            Kind::ShapeMismatch,
            format!("{count} tensors, config implies {}", layout.tensors().len()),
        ));
    }
    let mut data = vec![0.0; layout.num_params()];
    for spec in layout.tensors() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| err(Kind::ShapeMismatch, "tensor name is not UTF-8"))?;
        if name != spec.name {
            return Err(err(Kind::ShapeMismatch, format!("expected tensor {}, found {name}", spec.name)));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != spec.shape {
            return Err(err(
                Kind::ShapeMismatch,
                format!("{name}: shape {shape:?}, expected {:?}", spec.shape),
            ));
        }
        for v in &mut data[spec.range()] {
            *v = r.f64()?;
        }
    }
    if r.pos != buf.len() {
        return Err(err(Kind::ShapeMismatch, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Parameters::from_parts(cfg, data)
}

pub fn save_checkpoint(params: &Parameters, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Parameters, ScorerConfig)> {
    let buf = std::fs::read(path)?;
    let p = from_bytes(&buf)?;
    let cfg = p.config().clone();
    Ok((p, cfg))
}

/// Loads a checkpoint and requires its model shape to equal `expected`
/// (dropout is a training setting and may differ).
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ScorerConfig) -> Result<Parameters> {
    let (p, cfg) = load_checkpoint(path)?;
    let same = ScorerConfig {
        dropout: expected.dropout,
        ..cfg.clone()
    };
    if &same != expected {
        return Err(err(
            Kind::ShapeMismatch,
            format!("checkpoint config {cfg:?} differs from expected {expected:?}"),
        ));
    }
    Ok(p)
}
