//! Dense row-major arrays and the forward math shared by the tape and by
//! graph-free inference paths.
//!
//! Everything is double precision. Shapes are checked on entry; a mismatch
//! reports both offending shapes.

use super::GradError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, GradError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GradError::BadShape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Array { shape: shape.to_vec(), data })
    }

    pub fn scalar(x: f64) -> Self {
        Array { shape: vec![1], data: vec![x] }
    }

    /// Row vector [1, n].
    pub fn row(data: Vec<f64>) -> Self {
        Array { shape: vec![1, data.len()], data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a matrix; a 1-D array counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on shape {:?}", self.shape),
        }
    }

    /// Columns of a matrix; a 1-D array is one row of its length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on shape {:?}", self.shape),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

fn check_same_shape(op: &str, a: &Array, b: &Array) -> Result<(), GradError> {
    if a.shape != b.shape {
        return Err(GradError::ShapeMismatch {
            op: op.to_string(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

pub fn matmul(a: &Array, b: &Array) -> Result<Array, GradError> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(GradError::ShapeMismatch {
            op: "matmul".to_string(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    // ikj order: streams over b rows, vectorizes the inner j loop.
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (x, brow) in arow.iter().zip(b.data.chunks_exact(n)) {
            if *x != 0.0 {
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
    }
    Array::from_vec(&[m, n], out)
}

pub fn transpose(a: &Array) -> Array {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Array::from_vec(&[n, m], out).expect("transpose shape")
}

pub fn add(a: &Array, b: &Array) -> Result<Array, GradError> {
    check_same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Array::from_vec(&a.shape, data)
}

pub fn sub(a: &Array, b: &Array) -> Result<Array, GradError> {
    check_same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Array::from_vec(&a.shape, data)
}

pub fn mul(a: &Array, b: &Array) -> Result<Array, GradError> {
    check_same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Array::from_vec(&a.shape, data)
}

pub fn scale(a: &Array, c: f64) -> Array {
    let data = a.data.iter().map(|x| x * c).collect();
    Array::from_vec(&a.shape, data).expect("scale shape")
}

/// Add a [n] or [1, n] bias row to every row of a [m, n] matrix.
pub fn add_bias(a: &Array, bias: &Array) -> Result<Array, GradError> {
    let n = a.cols();
    if bias.len() != n {
        return Err(GradError::ShapeMismatch {
            op: "add_bias".to_string(),
            lhs: a.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut data = a.data.clone();
    for row in data.chunks_exact_mut(n) {
        for (x, b) in row.iter_mut().zip(&bias.data) {
            *x += b;
        }
    }
    Array::from_vec(&a.shape, data)
}

pub fn concat_cols(parts: &[&Array]) -> Result<Array, GradError> {
    assert!(!parts.is_empty());
    let m = parts[0].rows();
    for p in parts {
        if p.rows() != m {
            return Err(GradError::ShapeMismatch {
                op: "concat_cols".to_string(),
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row_slice(i));
        }
    }
    Array::from_vec(&[m, total], data)
}

pub fn concat_rows(parts: &[&Array]) -> Result<Array, GradError> {
    assert!(!parts.is_empty());
    let n = parts[0].cols();
    for p in parts {
        if p.cols() != n {
            return Err(GradError::ShapeMismatch {
                op: "concat_rows".to_string(),
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(total * n);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Array::from_vec(&[total, n], data)
}

pub fn slice_cols(a: &Array, start: usize, len: usize) -> Result<Array, GradError> {
    let (m, n) = (a.rows(), a.cols());
    if start + len > n {
        return Err(GradError::BadShape(format!(
            "slice_cols {start}..{} out of {n} columns",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(m * len);
    for i in 0..m {
        data.extend_from_slice(&a.data[i * n + start..i * n + start + len]);
    }
    Array::from_vec(&[m, len], data)
}

pub fn slice_rows(a: &Array, start: usize, len: usize) -> Result<Array, GradError> {
    let (m, n) = (a.rows(), a.cols());
    if start + len > m {
        return Err(GradError::BadShape(format!(
            "slice_rows {start}..{} out of {m} rows",
            start + len
        )));
    }
    let data = a.data[start * n..(start + len) * n].to_vec();
    Array::from_vec(&[len, n], data)
}

/// Reorder rows so that output row i is input row perm[i].
pub fn permute_rows(a: &Array, perm: &[usize]) -> Result<Array, GradError> {
    let (m, n) = (a.rows(), a.cols());
    if !is_permutation(perm, m) {
        return Err(GradError::BadShape(format!(
            "permute_rows: {perm:?} is not a permutation of 0..{m}"
        )));
    }
    let mut data = Vec::with_capacity(m * n);
    for &src in perm {
        data.extend_from_slice(a.row_slice(src));
    }
    Array::from_vec(&[m, n], data)
}

pub fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

pub fn gather_rows(a: &Array, idx: &[usize]) -> Result<Array, GradError> {
    let (m, n) = (a.rows(), a.cols());
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        if i >= m {
            return Err(GradError::BadShape(format!("gather_rows index {i} out of {m} rows")));
        }
        data.extend_from_slice(a.row_slice(i));
    }
    Array::from_vec(&[idx.len(), n], data)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Array) -> Array {
    let n = a.cols();
    let mut data = a.data.clone();
    for row in data.chunks_exact_mut(n) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Array::from_vec(&a.shape, data).expect("softmax shape")
}

/// Row-wise layer norm with affine output. Zero-variance rows map to the bias.
pub fn layer_norm(a: &Array, gain: &Array, bias: &Array, eps: f64) -> Result<Array, GradError> {
    let n = a.cols();
    if gain.len() != n || bias.len() != n {
        return Err(GradError::ShapeMismatch {
            op: "layer_norm".to_string(),
            lhs: a.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut data = a.data.clone();
    for row in data.chunks_exact_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (x, (g, b)) in row.iter_mut().zip(gain.data.iter().zip(&bias.data)) {
            *x = (*x - mean) * inv * g + b;
        }
    }
    Array::from_vec(&a.shape, data)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_deriv_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(a: &Array) -> Array {
    let data = a.data.iter().map(|&x| gelu_scalar(x)).collect();
    Array::from_vec(&a.shape, data).expect("gelu shape")
}

pub fn silu_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_deriv_scalar(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(a: &Array) -> Array {
    let data = a.data.iter().map(|&x| silu_scalar(x)).collect();
    Array::from_vec(&a.shape, data).expect("silu shape")
}

pub fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    let data = a.data.iter().map(|&x| f(x)).collect();
    Array::from_vec(&a.shape, data).expect("map shape")
}

pub fn clamp(a: &Array, lo: f64, hi: f64) -> Array {
    map(a, |x| x.clamp(lo, hi))
}

pub fn sum(a: &Array) -> Array {
    Array::scalar(a.data.iter().sum())
}

pub fn mean(a: &Array) -> Array {
    Array::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
}
