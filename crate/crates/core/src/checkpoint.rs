//! Self-describing parameter archives and checkpoint averaging.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LANAT1"
//! u32 config length, config JSON bytes
//! u32 provenance entries, each u32 length + UTF-8 bytes
//! u32 parameter count
//! per parameter: u32 name length, name bytes, u32 rank, rank × u64 dims
//! every parameter's f64 payload, row-major, in the order above
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LaNat, LaNatConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"LANAT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: LaNatConfig,
    /// Training stages that produced the parameters, in order.
    pub provenance: Vec<String>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &LaNat, provenance: Vec<String>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.as_ref().clone()))
            .collect();
        Self {
            config: model.config().clone(),
            provenance,
            params,
        }
    }

    /// Copies the parameters into `model`, which must share the config.
    pub fn restore_into(&self, model: &mut LaNat) -> Result<()> {
        if model.config() != &self.config {
            return Err(Error::Format("checkpoint config does not match the model".into()));
        }
        let store = model.params();
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for ((name, value), p) in self.params.iter().zip(store.iter()) {
            if name != &p.name || value.shape() != p.value.shape() {
                return Err(Error::Format(format!("parameter {name} does not match model parameter {}", p.name)));
            }
        }
        model.params_mut().assign(self.params.iter().map(|(_, t)| t.clone()).collect())
    }

    /// Builds a fresh model from the stored config and loads the parameters.
    pub fn to_model(&self) -> Result<LaNat> {
        let mut model = LaNat::new(self.config.clone(), 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        put_bytes(&mut out, &config);
        put_u32(&mut out, self.provenance.len());
        for p in &self.provenance {
            put_bytes(&mut out, p.as_bytes());
        }
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let config = serde_json::from_slice(r.chunk()?).map_err(|e| Error::Format(format!("config: {e}")))?;
        let provenance = (0..r.u32()?)
            .map(|_| r.string())
            .collect::<Result<Vec<_>>>()?;
        let headers = (0..r.u32()?)
            .map(|_| {
                let name = r.string()?;
                let shape = (0..r.u32()?).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                Ok((name, shape))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut params = Vec::with_capacity(headers.len());
        for (name, shape) in headers {
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self {
            config,
            provenance,
            params,
        })
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Elementwise mean of every parameter. All checkpoints must share config
/// and parameter layout; provenance is taken from the last one.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let (last, rest) = checkpoints
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("no checkpoints to average".into()))?;
    let first = &checkpoints[0];
    for c in rest.iter().chain([last]) {
        if c.config != first.config {
            return Err(Error::Format("checkpoint configs differ".into()));
        }
        let same_layout = c.params.len() == first.params.len()
            && c.params.iter().zip(&first.params).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same_layout {
            return Err(Error::Format("checkpoint parameter layouts differ".into()));
        }
    }
    let k = checkpoints.len() as f64;
    let params = first
        .params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut sum = vec![0.0; t.numel()];
            for c in checkpoints {
                for (s, v) in sum.iter_mut().zip(c.params[i].1.data()) {
                    *s += v;
                }
            }
            let data = sum.into_iter().map(|s| s / k).collect();
            Ok((name.clone(), Tensor::new(t.shape(), data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        config: first.config.clone(),
        provenance: last.provenance.clone(),
        params,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("count fits in u32").to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("dimension overflows usize".into()))
    }

    fn chunk(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.chunk()?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 name".into()))
    }
}
