//! Dense row-major tensors and the `CTNS` binary format.
//!
//! All in-memory arithmetic runs at 64-bit. Files may carry either 32-bit
//! (dtype byte 0x01) or 64-bit (0x02) payloads; 32-bit is used for image
//! files produced by the synthetic generator.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CapsError;

pub const CTNS_MAGIC: [u8; 4] = *b"CTNS";
pub const CTNS_VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;
pub const DTYPE_F64: u8 = 0x02;

/// Dense multi-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, CapsError> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CapsError::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(CapsError::Shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, CapsError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut o = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            o = o * d + i;
        }
        o
    }

    pub fn write_ctns<W: Write>(&self, w: &mut W, dtype: u8) -> io::Result<()> {
        w.write_all(&CTNS_MAGIC)?;
        w.write_all(&[CTNS_VERSION, dtype, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match dtype {
            DTYPE_F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            DTYPE_F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            _ => return Err(io::Error::new(io::ErrorKind::InvalidInput, "bad dtype byte")),
        }
        Ok(())
    }

    pub fn read_ctns<R: Read>(r: &mut R) -> Result<Tensor, CapsError> {
        let mut head = [0u8; 7];
        r.read_exact(&mut head).map_err(|e| CapsError::Io(e.to_string()))?;
        if head[0..4] != CTNS_MAGIC {
            return Err(CapsError::Format("bad CTNS magic".into()));
        }
        if head[4] != CTNS_VERSION {
            return Err(CapsError::Format(format!("unsupported CTNS version {}", head[4])));
        }
        let dtype = head[5];
        let rank = head[6] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| CapsError::Io(e.to_string()))?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            DTYPE_F32 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf).map_err(|e| CapsError::Io(e.to_string()))?;
                for c in buf.chunks_exact(4) {
                    data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
            }
            DTYPE_F64 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf).map_err(|e| CapsError::Io(e.to_string()))?;
                for c in buf.chunks_exact(8) {
                    data.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
            d => return Err(CapsError::Format(format!("unknown CTNS dtype byte {d:#04x}"))),
        }
        Tensor::new(shape, data)
    }

    pub fn save_ctns(&self, path: &Path, dtype: u8) -> Result<(), CapsError> {
        let f = File::create(path).map_err(|e| CapsError::Io(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(f);
        self.write_ctns(&mut w, dtype).map_err(|e| CapsError::Io(e.to_string()))
    }

    pub fn load_ctns(path: &Path) -> Result<Tensor, CapsError> {
        let f = File::open(path).map_err(|e| CapsError::Io(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(f);
        Tensor::read_ctns(&mut r)
    }
}

/// Checkpoint container: a sequence of (u16 name length, UTF-8 name, CTNS blob)
/// records in write order.
pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<(), CapsError> {
    let f = File::create(path).map_err(|e| CapsError::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    for (name, t) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(CapsError::Format(format!("checkpoint name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())
            .map_err(|e| CapsError::Io(e.to_string()))?;
        w.write_all(bytes).map_err(|e| CapsError::Io(e.to_string()))?;
        t.write_ctns(&mut w, DTYPE_F64).map_err(|e| CapsError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CapsError> {
    let f = File::open(path).map_err(|e| CapsError::Io(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    let mut out = Vec::new();
    loop {
        let mut lb = [0u8; 2];
        match r.read_exact(&mut lb) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(CapsError::Io(e.to_string())),
        }
        let nlen = u16::from_le_bytes(lb) as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb).map_err(|e| CapsError::Io(e.to_string()))?;
        let name = String::from_utf8(nb).map_err(|_| CapsError::Format("non-UTF-8 checkpoint name".into()))?;
        let t = Tensor::read_ctns(&mut r)?;
        out.push((name, t));
    }
    Ok(out)
}
