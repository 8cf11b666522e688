//! OFGR binary grid container.
//!
//! Layout (little-endian):
//!
//! | bytes | field                                              |
//! |-------|----------------------------------------------------|
//! | 4     | magic `"OFGR"`                                     |
//! | 2     | format version, u16 = 1                            |
//! | 16    | u32 H, W, C, T                                     |
//! | 1     | dtype code, u8 = 0 (f32)                           |
//! | 3     | reserved, zero                                     |
//! | 40    | f64 cell_size_m, origin_x, origin_y, rotation, 0.0 |
//! | ...   | T*H*W*C f32, row-major, channel-minor              |
//!
//! Channel order for flow tensors is (dx, dy): column then row displacement.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec};

pub const MAGIC: &[u8; 4] = b"OFGR";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 4 + 2 + 16 + 1 + 3 + 40;

/// Writes `grids` as one tensor with T = `grids.len()` time slices.
pub fn write_grids<W: Write>(mut out: W, grids: &[&Grid]) -> Result<()> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Format("cannot write an empty grid sequence".into()))?;
    let spec = *first.spec();
    let channels = first.channels();
    for g in grids {
        spec.ensure_same(g.spec())?;
        if g.channels() != channels {
            return Err(Error::ShapeMismatch(format!(
                "channel count {} differs from {}",
                g.channels(),
                channels
            )));
        }
    }

    let mut buf = Vec::with_capacity(HEADER_LEN + grids.len() * first.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [spec.height_cells, spec.width_cells, channels, grids.len()] {
        let dim = u32::try_from(dim).map_err(|_| Error::Format(format!("dimension {dim} exceeds u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&[0u8; 3]);
    for v in [spec.cell_size_m, spec.origin[0], spec.origin[1], spec.rotation_rad, 0.0] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for g in grids {
        for &v in g.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<ofgr stream>", e))
}

pub fn read_grids<R: Read>(mut input: R) -> Result<Vec<Grid>> {
    let mut header = [0u8; HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected OFGR".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let u32_at = |off: usize| u32::from_le_bytes(header[off..off + 4].try_into().unwrap()) as usize;
    let (h, w, c, t) = (u32_at(6), u32_at(10), u32_at(14), u32_at(18));
    let dtype = header[22];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let f64_at = |off: usize| f64::from_le_bytes(header[off..off + 8].try_into().unwrap());
    let spec = GridSpec {
        height_cells: h,
        width_cells: w,
        cell_size_m: f64_at(26),
        origin: [f64_at(34), f64_at(42)],
        rotation_rad: f64_at(50),
    };
    spec.validate()?;
    if c == 0 || t == 0 {
        return Err(Error::Format(format!("empty tensor: C={c}, T={t}")));
    }

    let per_slice = h * w * c;
    let mut raw = vec![0u8; per_slice * 4];
    let mut grids = Vec::with_capacity(t);
    for slice in 0..t {
        input
            .read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated data in slice {slice}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        grids.push(Grid::from_vec(spec, c, data)?);
    }
    Ok(grids)
}

pub fn save_grids(path: &Path, grids: &[&Grid]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_grids(&mut out, grids).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_grids(path: &Path) -> Result<Vec<Grid>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_grids(BufReader::new(file))
}
