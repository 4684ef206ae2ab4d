//! Binary model and tensor files.
//!
//! Model container, all integers little-endian:
//!
//! ```text
//! "SDL1" | u32 version | u32 len, spec JSON | u32 param count |
//! per param: u32 len, name | u8 kind | u32 ndim, u32 dims... | u64 count, f64 data...
//! ```
//!
//! Tensor file: `"SDT1" | u32 version | u64 x 5 dims (T, N, C, H, W) | f64 data...`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{build_network, Network, NetworkSpec};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{RealTensor, Shape};

pub const MODEL_MAGIC: [u8; 4] = *b"SDL1";
pub const TENSOR_MAGIC: [u8; 4] = *b"SDT1";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME: u32 = 1 << 16;
const MAX_SPEC: u32 = 1 << 24;
const MAX_NDIM: u32 = 8;
const READ_CHUNK: usize = 1 << 16;

fn read_err(what: &str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("file truncated while reading {what}"))
    } else {
        Error::Format(format!("read failed at {what}: {e}"))
    }
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn write_err(e: std::io::Error) -> Error {
    Error::Format(format!("write failed: {e}"))
}

fn check_header(r: &mut impl Read, magic: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(|e| read_err("magic bytes", e))?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic bytes: expected {:?}, found {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&found)
        )));
    }
    let version = r.read_u32::<LE>().map_err(|e| read_err("version", e))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f64>> {
    // Grow with the data actually present so a corrupt count cannot force a
    // huge allocation.
    let mut out = Vec::with_capacity(count.min(READ_CHUNK));
    while out.len() < count {
        let n = (count - out.len()).min(READ_CHUNK);
        let start = out.len();
        out.resize(start + n, 0.0);
        r.read_f64_into::<LE>(&mut out[start..]).map_err(|e| read_err(what, e))?;
    }
    Ok(out)
}

fn read_string(r: &mut impl Read, max: u32, what: &str) -> Result<String> {
    let len = r.read_u32::<LE>().map_err(|e| read_err(what, e))?;
    if len > max {
        return Err(Error::Format(format!("{what} length {len} exceeds {max}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|e| read_err(what, e))?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Format("string too long".into()))?;
    w.write_u32::<LE>(len).map_err(write_err)?;
    w.write_all(bytes).map_err(write_err)
}

pub fn write_model(w: &mut impl Write, spec: &NetworkSpec, store: &ParamStore) -> Result<()> {
    let json = serde_json::to_vec(spec).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&MODEL_MAGIC).map_err(write_err)?;
    w.write_u32::<LE>(FORMAT_VERSION).map_err(write_err)?;
    write_bytes(w, &json)?;
    w.write_u32::<LE>(store.len() as u32).map_err(write_err)?;
    for (_, p) in store.iter() {
        write_bytes(w, p.name.as_bytes())?;
        w.write_u8(match p.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        })
        .map_err(write_err)?;
        w.write_u32::<LE>(p.dims.len() as u32).map_err(write_err)?;
        for &d in &p.dims {
            w.write_u32::<LE>(d as u32).map_err(write_err)?;
        }
        w.write_u64::<LE>(p.data.len() as u64).map_err(write_err)?;
        for &v in &p.data {
            w.write_f64::<LE>(v).map_err(write_err)?;
        }
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<(NetworkSpec, ParamStore)> {
    check_header(r, MODEL_MAGIC)?;
    let json = read_string(r, MAX_SPEC, "network spec")?;
    let spec: NetworkSpec =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("invalid network spec: {e}")))?;
    let count = r.read_u32::<LE>().map_err(|e| read_err("parameter count", e))?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name = read_string(r, MAX_NAME, "parameter name")?;
        let kind = match r.read_u8().map_err(|e| read_err("parameter kind", e))? {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Format(format!("parameter {i} ({name}) has unknown kind {k}"))),
        };
        let ndim = r.read_u32::<LE>().map_err(|e| read_err("parameter rank", e))?;
        if ndim > MAX_NDIM {
            return Err(Error::Format(format!("parameter {name} has rank {ndim}")));
        }
        let dims = (0..ndim)
            .map(|_| r.read_u32::<LE>().map(|d| d as usize).map_err(|e| read_err("parameter dims", e)))
            .collect::<Result<Vec<_>>>()?;
        let n = r.read_u64::<LE>().map_err(|e| read_err("parameter length", e))?;
        let expect = dims.iter().product::<usize>();
        if n != expect as u64 {
            return Err(Error::Format(format!(
                "parameter {name}: {n} values for dims {dims:?}"
            )));
        }
        let data = read_f64s(r, expect, "parameter data")?;
        store.add(name, dims, data, kind);
    }
    Ok((spec, store))
}

pub fn save_model(path: impl AsRef<Path>, spec: &NetworkSpec, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_model(&mut w, spec, store)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a model file and rebuilds the network it describes.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Network, ParamStore)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let (spec, saved) = read_model(&mut BufReader::new(f)).map_err(|e| in_file(path, e))?;
    // Initial values are overwritten by the loaded parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (net, mut store) = build_network(&spec, &mut rng)?;
    store.load_from(&saved)?;
    Ok((net, store))
}

pub fn write_tensor(w: &mut impl Write, x: &RealTensor) -> Result<()> {
    w.write_all(&TENSOR_MAGIC).map_err(write_err)?;
    w.write_u32::<LE>(FORMAT_VERSION).map_err(write_err)?;
    for d in x.shape().dims() {
        w.write_u64::<LE>(d as u64).map_err(write_err)?;
    }
    for &v in x.data() {
        w.write_f64::<LE>(v).map_err(write_err)?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<RealTensor> {
    check_header(r, TENSOR_MAGIC)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        let v = r.read_u64::<LE>().map_err(|e| read_err("tensor dims", e))?;
        *d = usize::try_from(v).map_err(|_| Error::Format(format!("tensor dim {v} too large")))?;
    }
    let [t, n, c, h, w] = dims;
    let shape = Shape::batched(t, n, c, h, w);
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor dims {dims:?} overflow")))?;
    let data = read_f64s(r, count, "tensor data")?;
    RealTensor::from_vec(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, x: &RealTensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, x)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<RealTensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(f)).map_err(|e| in_file(path, e))
}
