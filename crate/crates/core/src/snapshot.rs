//! Bit-exact field snapshot format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "PSIF"                      magic, 4 bytes
//! u16  version                (= 1)
//! u16  d                      spatial dimension
//! u16  m                      system dimension
//! u32  n_slices
//! u32  nodes_per_axis[d]
//! f64  slice_times[n_slices]
//! f64  axis_coords[sum(nodes_per_axis)]
//! f64  values[n_slices * nodes * m]        slice-major, node, component
//! u32  n_gradients (0 or n_slices * nodes * d * m)
//! f64  gradients[n_gradients]
//! u32  n_stderr    (0 or n_slices * nodes * m)
//! f64  stderr[n_stderr]
//! u32  crc32 of everything above
//! ```
//!
//! The Monte Carlo field and the finite-difference solution both serialize
//! to this shape, so the two backends can be diffed file-to-file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fd::FdSolution;
use crate::fk::PsiField;
use crate::lattice::SpaceGrid;

pub const MAGIC: &[u8; 4] = b"PSIF";
pub const VERSION: u16 = 1;

/// In-memory form of a snapshot file.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub dim: usize,
    pub m: usize,
    pub slice_times: Vec<f64>,
    pub nodes_per_axis: Vec<usize>,
    pub axis_coords: Vec<f64>,
    pub values: Vec<f64>,
    pub gradients: Option<Vec<f64>>,
    pub stderr: Option<Vec<f64>>,
}

fn axis_coords(space: &SpaceGrid) -> Vec<f64> {
    let mut out = Vec::with_capacity(space.nodes_per_axis.iter().sum());
    for &n in &space.nodes_per_axis {
        for i in 0..n {
            out.push(i as f64 / n as f64);
        }
    }
    out
}

impl Snapshot {
    pub fn from_psi(field: &PsiField) -> Snapshot {
        Snapshot {
            dim: field.space.dim,
            m: field.m,
            slice_times: field.slice_times.clone(),
            nodes_per_axis: field.space.nodes_per_axis.clone(),
            axis_coords: axis_coords(&field.space),
            values: field.values.clone(),
            gradients: field.gradients.clone(),
            stderr: Some(field.stderr.clone()),
        }
    }

    pub fn from_fd(sol: &FdSolution) -> Snapshot {
        Snapshot {
            dim: sol.space.dim,
            m: sol.m,
            slice_times: sol.grid.slice_times(),
            nodes_per_axis: sol.space.nodes_per_axis.clone(),
            axis_coords: axis_coords(&sol.space),
            values: sol.values.clone(),
            gradients: None,
            stderr: None,
        }
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes_per_axis.iter().product()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u16).to_le_bytes());
        buf.extend_from_slice(&(self.m as u16).to_le_bytes());
        buf.extend_from_slice(&(self.slice_times.len() as u32).to_le_bytes());
        for &n in &self.nodes_per_axis {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for &t in &self.slice_times {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for &c in &self.axis_coords {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for &v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let grads = self.gradients.as_deref().unwrap_or(&[]);
        buf.extend_from_slice(&(grads.len() as u32).to_le_bytes());
        for &g in grads {
            buf.extend_from_slice(&g.to_le_bytes());
        }
        let errs = self.stderr.as_deref().unwrap_or(&[]);
        buf.extend_from_slice(&(errs.len() as u32).to_le_bytes());
        for &e in errs {
            buf.extend_from_slice(&e.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Snapshot> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Snapshot(format!("bad magic {magic:?}")));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u16()? as usize;
        let m = r.u16()? as usize;
        if dim == 0 || dim > 8 || m == 0 {
            return Err(Error::Snapshot(format!("implausible dims d={dim}, m={m}")));
        }
        let n_slices = r.u32()? as usize;
        let mut nodes_per_axis = Vec::with_capacity(dim);
        for _ in 0..dim {
            nodes_per_axis.push(r.u32()? as usize);
        }
        let nodes: usize = nodes_per_axis.iter().product();
        let slice_times = r.f64s(n_slices)?;
        let axis_coords = r.f64s(nodes_per_axis.iter().sum())?;
        let values = r.f64s(n_slices * nodes * m)?;
        let n_grad = r.u32()? as usize;
        if n_grad != 0 && n_grad != n_slices * nodes * dim * m {
            return Err(Error::Snapshot(format!("gradient block of {n_grad} elements")));
        }
        let gradients = if n_grad == 0 { None } else { Some(r.f64s(n_grad)?) };
        let n_err = r.u32()? as usize;
        if n_err != 0 && n_err != n_slices * nodes * m {
            return Err(Error::Snapshot(format!("stderr block of {n_err} elements")));
        }
        let stderr = if n_err == 0 { None } else { Some(r.f64s(n_err)?) };
        let payload_len = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Snapshot(format!(
                "{} trailing bytes after CRC",
                bytes.len() - r.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..payload_len]);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        Ok(Snapshot {
            dim,
            m,
            slice_times,
            nodes_per_axis,
            axis_coords,
            values,
            gradients,
            stderr,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn read(path: &Path) -> Result<Snapshot> {
        Snapshot::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Snapshot(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
