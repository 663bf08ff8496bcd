//! Dense f64 tensors with hand-derived reverse-mode adjoints.
//!
//! A [`Tensor`] is a row-major `Vec<f64>` plus its dimensions. Values are
//! treated as immutable after construction: every op returns a fresh tensor,
//! which keeps saved intermediates valid for the backward pass. Each forward
//! op `f` has a matching `f_vjp` computing the vector-Jacobian product (the
//! cotangent of the inputs given the cotangent of the output), and an
//! `f_adjoint` wrapper bundling the forward value with that pullback.

use thiserror::Error;

/// Shape and construction failures. Every variant names the offending
/// dimensions so the message pinpoints the mismatch.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("{op}: dimension mismatch, left {left:?} vs right {right:?}")]
    Mismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: dims {dims:?} hold {expected} elements, got {got}")]
    ElementCount {
        op: &'static str,
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got dims {dims:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        dims: Vec<usize>,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
}

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` holds exactly the number of
    /// elements `dims` describe.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor, ShapeError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(ShapeError::ElementCount {
                op: "new",
                dims,
                expected,
                got: data.len(),
            });
        }
        // no finiteness guard here: diverging training runs legitimately
        // produce non-finite values that the caller detects at the loss
        Ok(Tensor { dims, data })
    }

    /// Like [`Tensor::new`] but rejects NaN and infinities, for data that
    /// crosses a trust boundary (files, user input).
    pub fn new_checked(dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor, ShapeError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(ShapeError::NonFinite {
                op: "new_checked",
                index,
            });
        }
        Tensor::new(dims, data)
    }

    pub fn zeros(dims: Vec<usize>) -> Tensor {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    /// Rank-2 convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor, ShapeError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Rank-1 tensor owning `data`.
    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    /// Tensor of independent draws from N(0, std^2).
    pub fn normal(dims: Vec<usize>, rng: &mut crate::rng::Rng, std: f64) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.dims[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.dims[1]
    }

    /// Element (i, j) of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j]
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.dims[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a fresh tensor of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data under new dims; element count must match.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Tensor, ShapeError> {
        let expected: usize = dims.iter().product();
        if expected != self.data.len() {
            return Err(ShapeError::ElementCount {
                op: "reshape",
                dims,
                expected,
                got: self.data.len(),
            });
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }
}

/// Largest elementwise absolute difference; shapes must already agree.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims(), "max_abs_diff: shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn ensure_rank2(op: &'static str, t: &Tensor) -> Result<(), ShapeError> {
    if t.rank() != 2 {
        return Err(ShapeError::Rank {
            op,
            expected: 2,
            dims: t.dims.clone(),
        });
    }
    Ok(())
}

fn ensure_same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), ShapeError> {
    if a.dims != b.dims {
        return Err(ShapeError::Mismatch {
            op,
            left: a.dims.clone(),
            right: b.dims.clone(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_same_dims("add", a, b)?;
    Ok(Tensor {
        dims: a.dims.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_same_dims("sub", a, b)?;
    Ok(Tensor {
        dims: a.dims.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_same_dims("hadamard", a, b)?;
    Ok(Tensor {
        dims: a.dims.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    x.map(|v| c * v)
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// d/dx sigmoid from the forward output: dx = dy * y * (1 - y).
pub fn sigmoid_vjp(y: &Tensor, d_y: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_same_dims("sigmoid_vjp", y, d_y)?;
    Ok(Tensor {
        dims: y.dims.clone(),
        data: y
            .data
            .iter()
            .zip(&d_y.data)
            .map(|(&v, &d)| d * v * (1.0 - v))
            .collect(),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// ReLU pullback; the subgradient at exactly zero is taken as zero.
pub fn relu_vjp(x: &Tensor, d_y: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_same_dims("relu_vjp", x, d_y)?;
    Ok(Tensor {
        dims: x.dims.clone(),
        data: x
            .data
            .iter()
            .zip(&d_y.data)
            .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_rank2("matmul", a)?;
    ensure_rank2("matmul", b)?;
    let (m, k) = (a.dims[0], a.dims[1]);
    let (k2, n) = (b.dims[0], b.dims[1]);
    if k != k2 {
        return Err(ShapeError::Mismatch {
            op: "matmul",
            left: a.dims.clone(),
            right: b.dims.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Pullback of C = A·B: dA = dC·B^T, dB = A^T·dC.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, d_c: &Tensor) -> Result<(Tensor, Tensor), ShapeError> {
    let (m, k) = (a.dims[0], a.dims[1]);
    let n = b.dims[1];
    if d_c.dims != [m, n] {
        return Err(ShapeError::Mismatch {
            op: "matmul_vjp",
            left: vec![m, n],
            right: d_c.dims.clone(),
        });
    }
    let mut d_a = vec![0.0; m * k];
    let mut d_b = vec![0.0; k * n];
    for i in 0..m {
        let drow = &d_c.data[i * n..(i + 1) * n];
        for p in 0..k {
            // dA[i,p] = sum_j dC[i,j] * B[p,j]
            let brow = &b.data[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += drow[j] * brow[j];
            }
            d_a[i * k + p] = acc;
            // dB[p,j] += A[i,p] * dC[i,j]
            let aip = a.data[i * k + p];
            let dbrow = &mut d_b[p * n..(p + 1) * n];
            for j in 0..n {
                dbrow[j] += aip * drow[j];
            }
        }
    }
    Ok((
        Tensor::new(vec![m, k], d_a)?,
        Tensor::new(vec![k, n], d_b)?,
    ))
}

pub fn transpose(x: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_rank2("transpose", x)?;
    let (m, n) = (x.dims[0], x.dims[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

// ---------------------------------------------------------------------------
// softmax and pooling
// ---------------------------------------------------------------------------

/// Softmax applied independently to each row of a rank-2 tensor, with the
/// usual max-shift so large magnitudes cannot overflow.
pub fn row_softmax(x: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_rank2("row_softmax", x)?;
    let (m, n) = (x.dims[0], x.dims[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let hi = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let orow = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            let e = (row[j] - hi).exp();
            orow[j] = e;
            total += e;
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Pullback of row softmax from its forward output:
/// dx_j = y_j * (dy_j - sum_k y_k dy_k), row by row.
pub fn row_softmax_vjp(y: &Tensor, d_y: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_same_dims("row_softmax_vjp", y, d_y)?;
    let (m, n) = (y.dims[0], y.dims[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let yrow = &y.data[i * n..(i + 1) * n];
        let drow = &d_y.data[i * n..(i + 1) * n];
        let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = yrow[j] * (drow[j] - dot);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Per-row mean of a rank-2 tensor: z_i = (1/C) * sum_c x[i,c].
pub fn channel_mean(x: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_rank2("channel_mean", x)?;
    let (m, n) = (x.dims[0], x.dims[1]);
    let data = (0..m)
        .map(|i| x.data[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    Tensor::new(vec![m], data)
}

/// Pullback of channel_mean: broadcast dz_i / C across row i.
pub fn channel_mean_vjp(rows: usize, cols: usize, d_z: &Tensor) -> Result<Tensor, ShapeError> {
    if d_z.dims != [rows] {
        return Err(ShapeError::Mismatch {
            op: "channel_mean_vjp",
            left: vec![rows],
            right: d_z.dims.clone(),
        });
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let g = d_z.data[i] / cols as f64;
        for v in &mut out[i * cols..(i + 1) * cols] {
            *v = g;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

/// Stacks the rows of `b` under the rows of `a`; column counts must match.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    ensure_rank2("concat_rows", a)?;
    ensure_rank2("concat_rows", b)?;
    if a.dims[1] != b.dims[1] {
        return Err(ShapeError::Mismatch {
            op: "concat_rows",
            left: a.dims.clone(),
            right: b.dims.clone(),
        });
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor::new(vec![a.dims[0] + b.dims[0], a.dims[1]], data)
}

/// Splits a rank-2 tensor into its first `top_rows` rows and the rest;
/// inverse of [`concat_rows`].
pub fn split_rows(x: &Tensor, top_rows: usize) -> Result<(Tensor, Tensor), ShapeError> {
    ensure_rank2("split_rows", x)?;
    let (m, n) = (x.dims[0], x.dims[1]);
    if top_rows > m {
        return Err(ShapeError::Mismatch {
            op: "split_rows",
            left: vec![top_rows],
            right: x.dims.clone(),
        });
    }
    let a = Tensor::new(vec![top_rows, n], x.data[..top_rows * n].to_vec())?;
    let b = Tensor::new(vec![m - top_rows, n], x.data[top_rows * n..].to_vec())?;
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// adjoint wrapper
// ---------------------------------------------------------------------------

/// A forward value paired with its reverse-mode pullback. The pullback is
/// linear in the output cotangent and never mutates the forward value.
pub struct Adjoint<G> {
    value: Tensor,
    pullback: Box<dyn Fn(&Tensor) -> G>,
}

impl<G> Adjoint<G> {
    pub fn new(value: Tensor, pullback: impl Fn(&Tensor) -> G + 'static) -> Self {
        Adjoint {
            value,
            pullback: Box::new(pullback),
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    /// Applies the pullback; the cotangent must have the forward value's
    /// shape.
    pub fn pullback(&self, cotangent: &Tensor) -> Result<G, ShapeError> {
        if cotangent.dims() != self.value.dims() {
            return Err(ShapeError::Mismatch {
                op: "pullback",
                left: self.value.dims.clone(),
                right: cotangent.dims().to_vec(),
            });
        }
        Ok((self.pullback)(cotangent))
    }
}

pub fn matmul_adjoint(a: &Tensor, b: &Tensor) -> Result<Adjoint<(Tensor, Tensor)>, ShapeError> {
    let value = matmul(a, b)?;
    let (a, b) = (a.clone(), b.clone());
    Ok(Adjoint::new(value, move |d| {
        matmul_vjp(&a, &b, d).expect("cotangent shape checked by pullback")
    }))
}

pub fn sigmoid_adjoint(x: &Tensor) -> Adjoint<Tensor> {
    let y = sigmoid(x);
    let saved = y.clone();
    Adjoint::new(y, move |d| {
        sigmoid_vjp(&saved, d).expect("cotangent shape checked by pullback")
    })
}

pub fn relu_adjoint(x: &Tensor) -> Adjoint<Tensor> {
    let y = relu(x);
    let x = x.clone();
    Adjoint::new(y, move |d| {
        relu_vjp(&x, d).expect("cotangent shape checked by pullback")
    })
}

pub fn row_softmax_adjoint(x: &Tensor) -> Result<Adjoint<Tensor>, ShapeError> {
    let y = row_softmax(x)?;
    let saved = y.clone();
    Ok(Adjoint::new(y, move |d| {
        row_softmax_vjp(&saved, d).expect("cotangent shape checked by pullback")
    }))
}

pub fn channel_mean_adjoint(x: &Tensor) -> Result<Adjoint<Tensor>, ShapeError> {
    let value = channel_mean(x)?;
    let (rows, cols) = (x.dims[0], x.dims[1]);
    Ok(Adjoint::new(value, move |d| {
        channel_mean_vjp(rows, cols, d).expect("cotangent shape checked by pullback")
    }))
}

pub fn scale_adjoint(x: &Tensor, c: f64) -> Adjoint<Tensor> {
    Adjoint::new(scale(x, c), move |d| scale(d, c))
}

pub fn add_adjoint(a: &Tensor, b: &Tensor) -> Result<Adjoint<(Tensor, Tensor)>, ShapeError> {
    let value = add(a, b)?;
    Ok(Adjoint::new(value, |d| (d.clone(), d.clone())))
}

pub fn concat_rows_adjoint(
    a: &Tensor,
    b: &Tensor,
) -> Result<Adjoint<(Tensor, Tensor)>, ShapeError> {
    let value = concat_rows(a, b)?;
    let top = a.dims[0];
    Ok(Adjoint::new(value, move |d| {
        split_rows(d, top).expect("cotangent shape checked by pullback")
    }))
}

pub fn reshape_adjoint(x: &Tensor, dims: Vec<usize>) -> Result<Adjoint<Tensor>, ShapeError> {
    let value = x.reshape(dims)?;
    let original = x.dims.clone();
    Ok(Adjoint::new(value, move |d| {
        d.reshape(original.clone())
            .expect("cotangent shape checked by pullback")
    }))
}
