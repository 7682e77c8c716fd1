// Binary parameter checkpoint.
//
// Layout (little endian):
//   magic "HTCKPT" | u16 version | u32 meta_len | meta (utf-8)
//   u64 count | count x { u32 name_len | name | u32 ndim | ndim x u64 | f64 payload }

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Result, Tensor, TensorError};

const MAGIC: &[u8; 6] = b"HTCKPT";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata, typically the serialized model config.
    pub meta: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: impl Into<String>) -> Self {
        Checkpoint {
            meta: meta.into(),
            entries: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false)))
                .collect(),
        }
    }
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    let mut put = |b: &[u8]| w.write_all(b).map_err(io_err);
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(ck.meta.len() as u32).to_le_bytes())?;
    put(ck.meta.as_bytes())?;
    put(&(ck.entries.len() as u64).to_le_bytes())?;
    for (name, t) in &ck.entries {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            put(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            put(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            TensorError::Checkpoint(format!("truncated at byte {}: {e}", self.pos))
        })?;
        self.pos += n as u64;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| TensorError::Checkpoint(format!("invalid utf-8 near byte {}", self.pos)))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut rd = Reader { inner: r, pos: 0 };
    if rd.bytes(MAGIC.len())? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = rd.u16()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta_len = rd.u32()? as usize;
    let meta = rd.string(meta_len)?;
    let count = rd.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = rd.u32()? as usize;
        let name = rd.string(name_len)?;
        let ndim = rd.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| rd.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = rd.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { meta, entries })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let f = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, ck)?;
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(io_err)?;
    read_checkpoint(BufReader::new(f))
}
