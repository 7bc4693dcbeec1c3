//! `MFF1` binary field files.
//!
//! Layout: the magic bytes `MFF1`, five little-endian `u32` header words
//! `(m, N, degree, value-shape code, d)`, then the payload as little-endian
//! `f64` in `(node, form component, value entry)` order. Exterior nodes are
//! written as zeros. The grid shape is not recorded; readers supply the domain.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::domain::GridDomain;
use super::field::{Field, ValueShape};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFF1";

pub fn write_field<W: Write>(mut w: W, field: &Field) -> Result<()> {
    let dom = field.domain();
    let (code, d) = field.shape().code();
    w.write_all(MAGIC)?;
    for word in [
        dom.dim() as u32,
        dom.resolution() as u32,
        field.degree() as u32,
        code,
        d,
    ] {
        w.write_all(&word.to_le_bytes())?;
    }
    let stride = field.stride();
    for p in 0..dom.num_nodes() {
        let valid = dom.is_valid(p);
        for &v in field.node(p) {
            let v = if valid { v } else { 0.0 };
            w.write_all(&v.to_le_bytes())?;
        }
        debug_assert_eq!(field.node(p).len(), stride);
    }
    Ok(())
}

pub fn read_field<R: Read>(mut r: R, domain: &Arc<GridDomain>) -> Result<Field> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut header = [0u32; 5];
    for word in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *word = u32::from_le_bytes(b);
    }
    let [m, n, degree, code, d] = header;
    if m as usize != domain.dim() || n as usize != domain.resolution() {
        return Err(Error::Format(format!(
            "file grid m={m} N={n} does not match domain m={} N={}",
            domain.dim(),
            domain.resolution()
        )));
    }
    let shape = ValueShape::from_code(code, d)?;
    if code == 0 && d != 1 {
        return Err(Error::Format(format!(
            "scalar fields must record d = 1, got {d}"
        )));
    }
    let template = Field::zeros(domain, degree as usize, shape)?;
    let mut data = vec![0.0; template.data().len()];
    let mut b = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Field::from_raw(domain, degree as usize, shape, data)
}

pub fn save(path: impl AsRef<Path>, field: &Field) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_field(&mut w, field)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>, domain: &Arc<GridDomain>) -> Result<Field> {
    let f = std::fs::File::open(path)?;
    read_field(std::io::BufReader::new(f), domain)
}
