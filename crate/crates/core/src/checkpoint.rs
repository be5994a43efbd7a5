//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "TLMCKPT\0"
//! version    u32
//! config     u64 length + UTF-8 `key=value` lines
//! count      u32 number of parameter blobs
//! blob*      u32 name length + name, u32 rank, u64 dims…, f64 data…
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerLM};

pub const MAGIC: &[u8; 8] = b"TLMCKPT\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &TransformerLM, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = model.config().to_string();
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    let params = model.parameters();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &TransformerLM, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::checkpoint(field, "file truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let n = self.u64(field)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::checkpoint(field, format!("implausible length {n}")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TransformerLM> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if rd.take(8, "magic")? != MAGIC {
        return Err(Error::checkpoint("magic", "not a checkpoint file"));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::checkpoint(
            "version",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let cfg_len = rd.len("config")?;
    let cfg_text = std::str::from_utf8(rd.take(cfg_len, "config")?)
        .map_err(|_| Error::checkpoint("config", "not UTF-8"))?;
    let config: ModelConfig = cfg_text.parse().map_err(|e| match e {
        Error::Config(msg) => Error::checkpoint("config", msg),
        other => other,
    })?;
    let mut model = TransformerLM::new(config, 0)?;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let count = rd.u32("count")? as usize;
    if count != names.len() {
        return Err(Error::checkpoint(
            "count",
            format!("file has {count} parameters, config implies {}", names.len()),
        ));
    }
    for (expected, param) in names.iter().zip(model.parameters_mut()) {
        let name_len = rd.u32(expected)? as usize;
        let name = rd.take(name_len, expected)?;
        if name != expected.as_bytes() {
            return Err(Error::checkpoint(
                expected.as_str(),
                format!("found `{}` in its place", String::from_utf8_lossy(name)),
            ));
        }
        let rank = rd.u32(expected)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(rd.len(expected)?);
        }
        if shape != param.shape() {
            return Err(Error::checkpoint(
                expected.as_str(),
                format!("shape {shape:?}, config implies {:?}", param.shape()),
            ));
        }
        let raw = rd.take(param.numel() * 8, expected)?;
        for (dst, chunk) in param.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if rd.pos != bytes.len() {
        return Err(Error::checkpoint(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - rd.pos),
        ));
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerLM> {
    let file = fs::File::open(path)?;
    read_checkpoint(io::BufReader::new(file))
}

/// Loads a checkpoint and checks its header against `expected`, naming the
/// first differing field.
pub fn load_checkpoint_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<TransformerLM> {
    let model = load_checkpoint(path)?;
    if let Some(field) = model.config().first_difference(expected) {
        return Err(Error::checkpoint(
            field,
            "checkpoint header disagrees with the requested configuration",
        ));
    }
    Ok(model)
}
