//! Dense row-major `f64` tensors.
//!
//! Every public operation either returns a tensor whose values are all finite
//! or an error. There are no views or strides; a tensor owns its buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Pointwise binary operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "new",
                detail: format!("shape {shape:?} must have positive dimensions"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "new",
                detail: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            });
        }
        check_finite("new", &data)?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                detail: format!("expected a 2-D tensor, got shape {s:?}"),
            }),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                detail: format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            });
        }
        Ok(())
    }

    fn from_op(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_finite(op, &data)?;
        Ok(Tensor { shape, data })
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("inner dimensions {k} and {k2} disagree"),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let src = &rhs.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Self::from_op("matmul", vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn elementwise(&self, rhs: &Tensor, op: Elementwise) -> Result<Tensor> {
        self.same_shape(rhs, "elementwise")?;
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |a, b| a + b,
            Elementwise::Sub => |a, b| a - b,
            Elementwise::Mul => |a, b| a * b,
        };
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_op("elementwise", self.shape.clone(), data)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, Elementwise::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, Elementwise::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, Elementwise::Mul)
    }

    /// `mul * e + add` for every element `e`.
    pub fn scalar_affine(&self, mul: f64, add: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&e| mul * e + add).collect();
        Self::from_op("scalar_affine", self.shape.clone(), data)
    }

    /// Adds a length-`cols` vector to every row of a 2-D tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_row")?;
        if row.len() != c {
            return Err(Error::Dimension {
                op: "add_row",
                detail: format!("row of length {} for width {c}", row.len()),
            });
        }
        let mut data = self.data.clone();
        for i in 0..r {
            for (d, &b) in data[i * c..(i + 1) * c].iter_mut().zip(&row.data) {
                *d += b;
            }
        }
        Self::from_op("add_row", self.shape.clone(), data)
    }

    /// Multiplies every row of a 2-D tensor by a length-`cols` vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("mul_row")?;
        if row.len() != c {
            return Err(Error::Dimension {
                op: "mul_row",
                detail: format!("row of length {} for width {c}", row.len()),
            });
        }
        let mut data = self.data.clone();
        for i in 0..r {
            for (d, &b) in data[i * c..(i + 1) * c].iter_mut().zip(&row.data) {
                *d *= b;
            }
        }
        Self::from_op("mul_row", self.shape.clone(), data)
    }

    /// Per-row normalization to zero mean and unit variance, with `1e-6`
    /// added to the variance.
    pub fn layer_norm(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("layer_norm")?;
        if c < 2 {
            return Err(Error::Dimension {
                op: "layer_norm",
                detail: "rows need at least two columns".into(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
        Self::from_op("layer_norm", self.shape.clone(), data)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_rows")?;
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        Self::from_op("softmax_rows", self.shape.clone(), data)
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    ///
    /// The tanh form avoids depending on an `erf` implementation, which is not
    /// in `std` and varies between platform libms.
    pub fn gelu(&self) -> Result<Tensor> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let data = self
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh()))
            .collect();
        Self::from_op("gelu", self.shape.clone(), data)
    }

    /// Copies columns `[start, start + width)` of a 2-D tensor.
    pub fn columns(&self, start: usize, width: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("columns")?;
        if width == 0 || start + width > c {
            return Err(Error::Dimension {
                op: "columns",
                detail: format!("range {start}..{} outside width {c}", start + width),
            });
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Ok(Tensor {
            shape: vec![r, width],
            data,
        })
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_columns(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Dimension {
            op: "concat_columns",
            detail: "no parts".into(),
        })?;
        let (r, _) = first.dims2("concat_columns")?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2("concat_columns")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_columns",
                    detail: format!("row counts {r} and {pr} differ"),
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[i * pc..(i + 1) * pc]);
            }
        }
        Ok(Tensor {
            shape: vec![r, total],
            data,
        })
    }

    /// Mean of `|a_i - b_i|`.
    pub fn mean_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "mean_abs_diff")?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// `||a - b||_2 / ||b||_2`; zero when both are zero.
    pub fn relative_l2(&self, reference: &Tensor) -> Result<f64> {
        self.same_shape(reference, "relative_l2")?;
        let num: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = reference.data.iter().map(|b| b * b).sum();
        if den == 0.0 {
            return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
        }
        Ok((num / den).sqrt())
    }

    /// Raw little-endian `f64` payload, no header.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Decodes a little-endian `f64` blob against an externally supplied shape.
    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor> {
        let expected = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Dimension {
                op: "from_le_bytes",
                detail: format!("shape {shape:?} overflows"),
            })?;
        if bytes.len() != expected {
            return Err(Error::Dimension {
                op: "from_le_bytes",
                detail: format!(
                    "expected {expected} bytes for shape {shape:?}, got {}",
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Mean over all elements of `|a_i| + |b_i|`.
///
/// This is the Frobenius inner product with an all-ones matrix divided by its
/// element count, computed without building that matrix.
pub fn mean_abs_sum(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "mean_abs_sum")?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x.abs() + y.abs())
        .sum();
    Ok(s / a.data.len() as f64)
}
