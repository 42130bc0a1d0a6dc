//! Flat binary model file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MGATEMDL"
//! 8       4     format version (u32, currently 1)
//! 12      4     layer count N (u32)
//! 16      4*N   layer dims (u32 each)
//! ..      8     dropout_rate (f64)
//! ..      --    per affine layer l in 0..N-1:
//!                 weights, row-major, dims[l+1] * dims[l] f64
//!                 biases, dims[l+1] f64
//! ```
//!
//! The reader rejects wrong magic, unknown versions, implausible shapes, and
//! trailing bytes. Parameters round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"MGATEMDL";
pub const FORMAT_VERSION: u32 = 1;

/// Guard against absurd allocations from corrupt headers.
const MAX_LAYERS: u32 = 64;
const MAX_DIM: u32 = 1_000_000;

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::format(format!("{}: cannot create: {e}", path.display())))?;
    let mut writer = BufWriter::new(file);
    write_to(model, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let file = File::open(path)
        .map_err(|e| Error::format(format!("{}: cannot open: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let model = read_from(&mut reader)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Ok(model)
}

pub fn write_to(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let dims = model.layer_dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    w.write_all(&model.dropout_rate().to_le_bytes())?;
    for l in 0..dims.len() - 1 {
        for v in model.weights()[l].data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &model.biases()[l] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("bad magic: not a model file"));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported model format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let n_layers = read_u32(r)?;
    if !(2..=MAX_LAYERS).contains(&n_layers) {
        return Err(Error::format(format!("implausible layer count {n_layers}")));
    }
    let mut dims = Vec::with_capacity(n_layers as usize);
    for _ in 0..n_layers {
        let d = read_u32(r)?;
        if d == 0 || d > MAX_DIM {
            return Err(Error::format(format!("implausible layer dimension {d}")));
        }
        dims.push(d as usize);
    }
    let dropout = read_f64(r)?;
    if !(dropout.is_finite() && (0.0..1.0).contains(&dropout)) {
        return Err(Error::format(format!("implausible dropout rate {dropout}")));
    }

    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (rows, cols) = (dims[l + 1], dims[l]);
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = read_f64(r)?;
        }
        weights.push(m);
        let mut b = vec![0.0; rows];
        for v in b.iter_mut() {
            *v = read_f64(r)?;
        }
        biases.push(b);
    }

    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => return Err(Error::format("trailing bytes after model parameters")),
    }

    Model::from_parts(dims, weights, biases, dropout)
        .map_err(|e| Error::format(format!("inconsistent model file: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
