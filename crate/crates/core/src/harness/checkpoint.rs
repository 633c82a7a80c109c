//! FILT checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "FILT"
//! version      u32
//! tensor_count u32
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8      1 = f32, 2 = f64
//!   ndim       u32
//!   dims       ndim × u64
//!   payload    product(dims) elements, row-major
//! ```
//!
//! Scalars are stored as one-element tensors of shape `[1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fisher::FisherFactors;
use crate::linalg::Matrix;
use crate::lora::LoraInit;

pub const MAGIC: &[u8; 4] = b"FILT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub dims: Vec<u64>,
    /// Values widened to f64; f32 tensors round on write.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn element_count(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Inserts or replaces a tensor, keeping first-insertion order.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        debug_assert_eq!(tensor.element_count(), tensor.data.len());
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name.to_string(), tensor)),
        }
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Matrix, dtype: DType) {
        self.insert(
            name,
            Tensor { dtype, dims: vec![m.rows() as u64, m.cols() as u64], data: m.as_slice().to_vec() },
        );
    }

    pub fn insert_vector(&mut self, name: &str, v: &[f64]) {
        self.insert(name, Tensor { dtype: DType::F64, dims: vec![v.len() as u64], data: v.to_vec() });
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.insert_vector(name, &[v]);
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name).ok_or_else(|| bad(Path::new(""), format!("missing tensor {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.require(name)?;
        if t.dims.len() != 2 {
            return Err(bad(Path::new(""), format!("{name} has {} dims, expected 2", t.dims.len())));
        }
        Matrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, t.data.clone())
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.require(name)?.data.clone())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        match t.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(bad(Path::new(""), format!("{name} is not a scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype as u8);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match t.dtype {
                DType::F64 => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Checkpoint::parse(bytes, Path::new("<memory>"))
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(bad(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(path, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad(path, "tensor name is not UTF-8"))?
                .to_string();
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| bad(path, format!("unknown dtype code {code}")))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
            let n = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad(path, "dims overflow"))? as usize;
            let width = if dtype == DType::F64 { 8 } else { 4 };
            let raw = r.take(n.checked_mul(width).ok_or_else(|| bad(path, "payload overflow"))?)?;
            let data = match dtype {
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            };
            ck.tensors.push((name, Tensor { dtype, dims, data }));
        }
        if r.pos != bytes.len() {
            return Err(bad(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::parse(&bytes, path).map_err(|e| match e {
            Error::Checkpoint { msg, .. } => bad(path, msg),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad(self.path, "truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn lora_checkpoint(init: &LoraInit) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.insert_matrix("A", &init.a, DType::F64);
    ck.insert_matrix("B", &init.b, DType::F64);
    ck.insert_matrix("W_res", &init.w_res, DType::F64);
    ck.insert_scalar("alpha", init.alpha);
    ck.insert_scalar("rank", init.rank() as f64);
    ck.insert_scalar("scale", init.scale);
    ck.insert_vector("indices", &init.indices.iter().map(|&i| i as f64).collect::<Vec<_>>());
    ck.insert_vector("sigma_sel", &init.sigma_sel);
    ck.insert_scalar("layer_id", init.layer_id as f64);
    ck
}

fn as_index(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(bad(Path::new(""), format!("{what} value {v} is not an index")))
    }
}

pub fn lora_from_checkpoint(ck: &Checkpoint) -> Result<LoraInit> {
    let a = ck.matrix("A")?;
    let rank = as_index(ck.scalar("rank")?, "rank")?;
    if rank != a.rows() {
        return Err(bad(Path::new(""), format!("rank {rank} disagrees with A having {} rows", a.rows())));
    }
    Ok(LoraInit {
        layer_id: as_index(ck.scalar("layer_id")?, "layer_id")?,
        indices: ck.vector("indices")?.into_iter().map(|v| as_index(v, "indices")).collect::<Result<_>>()?,
        sigma_sel: ck.vector("sigma_sel")?,
        a,
        b: ck.matrix("B")?,
        w_res: ck.matrix("W_res")?,
        scale: ck.scalar("scale")?,
        alpha: ck.scalar("alpha")?,
    })
}

/// Finalized `S_X`, `S_Y` plus counters.
pub fn factors_checkpoint(f: &FisherFactors) -> Result<Checkpoint> {
    let (sx, sy) = f.finalize()?;
    let mut ck = Checkpoint::new();
    ck.insert_matrix("S_X", &sx, DType::F64);
    ck.insert_matrix("S_Y", &sy, DType::F64);
    ck.insert_scalar("layer_id", f.layer_id as f64);
    ck.insert_scalar("batches_seen", f.batches_seen() as f64);
    ck.insert_scalar("columns_seen", f.columns_seen() as f64);
    Ok(ck)
}

/// Finalized factors read back from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredFactors {
    pub layer_id: usize,
    pub s_x: Matrix,
    pub s_y: Matrix,
    pub batches_seen: usize,
    pub columns_seen: usize,
}

pub fn factors_from_checkpoint(ck: &Checkpoint) -> Result<StoredFactors> {
    Ok(StoredFactors {
        layer_id: as_index(ck.scalar("layer_id")?, "layer_id")?,
        s_x: ck.matrix("S_X")?,
        s_y: ck.matrix("S_Y")?,
        batches_seen: as_index(ck.scalar("batches_seen")?, "batches_seen")?,
        columns_seen: as_index(ck.scalar("columns_seen")?, "columns_seen")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let mut ck = Checkpoint::new();
        ck.insert_scalar("a", 1.5);
        let bytes = ck.to_bytes();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"FILT");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'a');
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn f32_export_rounds() {
        let mut ck = Checkpoint::new();
        ck.insert_matrix("m", &Matrix::from_vec(1, 2, vec![0.1, 2.0]).unwrap(), DType::F32);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let t = back.tensor("m").unwrap();
        assert_eq!(t.dtype, DType::F32);
        assert_eq!(t.data, vec![0.1f32 as f64, 2.0]);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0").is_err());
        let mut ck = Checkpoint::new();
        ck.insert_vector("v", &[1.0, 2.0]);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad_dtype = bytes;
        bad_dtype[4 + 4 + 4 + 4 + 1] = 9;
        assert!(Checkpoint::from_bytes(&bad_dtype).is_err());
    }

    #[test]
    fn lora_round_trip() {
        let init = LoraInit {
            layer_id: 2,
            indices: vec![0, 5],
            sigma_sel: vec![0.25, 1.0],
            a: Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            b: Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap(),
            w_res: Matrix::from_vec(2, 3, vec![-1.0; 6]).unwrap(),
            scale: 4.0,
            alpha: 8.0,
        };
        let back = lora_from_checkpoint(&Checkpoint::from_bytes(&lora_checkpoint(&init).to_bytes()).unwrap()).unwrap();
        assert_eq!(back, init);
    }

    proptest! {
        #[test]
        fn f64_payloads_round_trip_bitwise(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 36),
            name in "[A-Za-z_][A-Za-z0-9_]{0,12}",
        ) {
            let data: Vec<f64> = seed.into_iter().take(rows * cols).collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let mut ck = Checkpoint::new();
            ck.insert_matrix(&name, &m, DType::F64);
            ck.insert_scalar("scalar", -0.0);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let got = back.matrix(&name).unwrap();
            for (a, b) in got.as_slice().iter().zip(m.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
