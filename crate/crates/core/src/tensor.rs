//! Dense row-major `f64` tensors and the `EDT1` binary container.
//!
//! Layout of one `EDT1` blob (all integers little-endian):
//!
//! ```text
//! b"EDT1" | rank: u32 | dims: rank x u64 | payload: prod(dims) x f64
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{EdpaError, Result};

pub const EDT1_MAGIC: &[u8; 4] = b"EDT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(EdpaError::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EdpaError::InvalidShape {
                shape,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
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

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(EdpaError::ShapeMismatch {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(EdpaError::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a matrix".into(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(EdpaError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Appends this tensor as an `EDT1` blob.
    pub fn write_edt1(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(EDT1_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_edt1(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_edt1(&mut out);
        out
    }

    /// Decodes one `EDT1` blob starting at `bytes[0]`, returning the tensor
    /// and the number of bytes consumed. `base` is added to every offset
    /// reported in errors so callers reading from the middle of a file get
    /// file-absolute positions.
    pub fn read_edt1(bytes: &[u8], base: usize, context: &str) -> Result<(Self, usize)> {
        let fail =
            |offset: usize, msg: String| EdpaError::format(context, format!("at byte offset {}: {msg}", base + offset));
        if bytes.len() < 8 {
            return Err(fail(0, format!("header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != EDT1_MAGIC {
            return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dims_end = 8 + rank * 8;
        if bytes.len() < dims_end {
            return Err(fail(8, format!("dimension table truncated (rank {rank})")));
        }
        let mut shape = Vec::with_capacity(rank);
        for k in 0..rank {
            let at = 8 + 8 * k;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            if d == 0 {
                return Err(fail(at, "zero dimension".into()));
            }
            shape.push(d as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail(8, format!("dimensions {shape:?} overflow")))?;
        let payload = numel
            .checked_mul(8)
            .ok_or_else(|| fail(8, "payload size overflows".into()))?;
        let end = dims_end + payload;
        if bytes.len() < end {
            return Err(fail(
                dims_end,
                format!(
                    "payload truncated: expected {payload} bytes, found {}",
                    bytes.len() - dims_end
                ),
            ));
        }
        let data = bytes[dims_end..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((
            Self {
                shape,
                data,
                grad: None,
            },
            end,
        ))
    }

    /// Decodes a buffer holding exactly one blob.
    pub fn from_edt1(bytes: &[u8], context: &str) -> Result<Self> {
        let (t, used) = Self::read_edt1(bytes, 0, context)?;
        if used != bytes.len() {
            return Err(EdpaError::format(
                context,
                format!("{} trailing bytes after offset {used}", bytes.len() - used),
            ));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_edt1())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EdpaError::io(path, e))?;
        Self::from_edt1(&bytes, &path.display().to_string())
    }
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| EdpaError::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| EdpaError::io(path, e))?;
    f.write_all(bytes).map_err(|e| EdpaError::io(path, e))
}
