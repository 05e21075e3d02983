//! Dense row-major `f64` tensors, named parameters and the MGTN binary
//! container.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Dense row-major tensor. A gradient buffer of identical shape is present
/// iff the tensor requires a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[rows.len(), cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix (first dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Attaches a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Copy of the values without a gradient buffer.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[2]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = self.data[r * n + c];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

/// Identifier of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value: value.with_grad(),
            frozen: false,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            frozen: true,
            ..Self::new(name, value)
        }
    }
}

/// Ordered collection of named parameters. Registration order is stable and
/// defines iteration order everywhere (optimizer, serialization).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, param: Parameter) -> ParamId {
        assert!(
            self.find(&param.name).is_none(),
            "duplicate parameter name {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

const MGTN_MAGIC: &[u8; 4] = b"MGTN";
const MGTN_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Encodes a tensor in the MGTN container as f64.
pub fn encode_mgtn(t: &Tensor) -> Vec<u8> {
    encode_mgtn_as(t, DType::F64)
}

pub fn encode_mgtn_as(t: &Tensor, dtype: DType) -> Vec<u8> {
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + width * t.len());
    out.extend_from_slice(MGTN_MAGIC);
    out.push(MGTN_VERSION);
    out.push(t.ndim() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype as u8);
    for &v in &t.data {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Decodes one MGTN record from the start of `bytes`, returning the tensor
/// and the number of bytes consumed.
pub fn decode_mgtn(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MGTN_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"MGTN\""),
        });
    }
    let version = cur.take(1)?[0];
    if version != MGTN_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let ndim = cur.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = cur.take(4)?;
        shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let dtype_off = cur.pos;
    let width = match cur.take(1)?[0] {
        0 => 4,
        1 => 8,
        other => {
            return Err(Error::Format {
                offset: dtype_off,
                msg: format!("unknown dtype code {other}"),
            })
        }
    };
    let n: usize = shape.iter().product();
    let payload = cur.take(n * width)?;
    let data = payload
        .chunks_exact(width)
        .map(|c| match width {
            4 => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
            _ => f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]),
        })
        .collect();
    Ok((Tensor::new(shape, data)?, cur.pos))
}

pub fn write_mgtn(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_mgtn(t))?;
    Ok(())
}

pub fn read_mgtn(path: &std::path::Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (t, used) = decode_mgtn(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format {
            offset: used,
            msg: "trailing bytes after tensor payload".into(),
        });
    }
    Ok(t)
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let t = Tensor::zeros(&[3, 2]).with_grad();
        assert!(t.requires_grad());
        assert_eq!(t.grad().unwrap().len(), 6);
    }

    #[test]
    fn mgtn_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode_mgtn(&t);
        assert_eq!(&b[..4], b"MGTN");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(b[14], 1);
        assert_eq!(b.len(), 15 + 16);
        let (back, used) = decode_mgtn(&b).unwrap();
        assert_eq!(used, b.len());
        assert_eq!(back, t);
    }

    #[test]
    fn mgtn_f32_payload_decodes() {
        let t = Tensor::new(vec![3], vec![0.5, 1.0, -4.0]).unwrap();
        let (back, _) = decode_mgtn(&encode_mgtn_as(&t, DType::F32)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn mgtn_rejects_bad_magic_and_truncation() {
        let mut b = encode_mgtn(&Tensor::zeros(&[2]));
        let short = &b[..b.len() - 3];
        match decode_mgtn(short) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, short.len()),
            other => panic!("expected format error, got {other:?}"),
        }
        b[0] = b'X';
        assert!(matches!(decode_mgtn(&b), Err(Error::Format { offset: 0, .. })));
    }
}
