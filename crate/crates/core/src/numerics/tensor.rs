//! Dense row-major `f64` tensors and the forward kernels shared by the
//! eager API and the autodiff tape.

use std::fmt;
use std::sync::Arc;

use super::NumericsError;

/// Dense n-dimensional array of `f64` in row-major order.
///
/// The buffer is reference counted so that binding parameters onto a tape
/// does not copy them; mutation goes through [`Tensor::data_mut`], which
/// clones only when the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    /// Builds a tensor whose data is known to be finite and sized correctly.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::shape("from_rows", "ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Returns `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NumericsError::shape(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(NumericsError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self, NumericsError> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(NumericsError::shape(
                "matmul",
                format!("[{m},{k}] x [{k2},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self, NumericsError> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self, NumericsError> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + len > c {
            return Err(NumericsError::shape(
                "slice_cols",
                format!("cols {start}..{} of {c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Self::from_parts(vec![r, len], out))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self, NumericsError> {
        let lead = *self.shape.first().unwrap_or(&0);
        if start + len > lead {
            return Err(NumericsError::shape(
                "slice_rows",
                format!("rows {start}..{} of {lead}", start + len),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self::from_parts(
            shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        ))
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self, NumericsError> {
        let rows = match parts.first() {
            Some(t) => t.dims2("concat_cols")?.0,
            None => return Err(NumericsError::shape("concat_cols", "no inputs".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(NumericsError::shape("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Self::from_parts(vec![rows, total], out))
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::shape("concat_rows", "no inputs".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(NumericsError::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            lead += p.shape[0];
            out.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self::from_parts(shape, out))
    }

    /// Adds a length-`c` row vector (shape `[c]` or `[1, c]`) to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Self, NumericsError> {
        let c = self.last_dim();
        if row.numel() != c {
            return Err(NumericsError::shape(
                "add_row",
                format!("row of {} for last dim {c}", row.numel()),
            ));
        }
        let mut out = self.data.to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(row.data.iter()) {
                *o += b;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Self {
        let c = self.last_dim();
        let mut out = self.data.to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Self::from_parts(self.shape.clone(), out)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `out += a[m,k] * b[k,n]` with an i-k-j loop so the inner loop is contiguous.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k,m]^T * b[k,n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Saved statistics of a normalization pass: normalized values and the
/// reciprocal standard deviation of every normalization group.
pub(crate) struct NormStats {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Standardizes contiguous groups of `group` elements.
pub(crate) fn normalize_groups(data: &[f64], group: usize, eps: f64) -> NormStats {
    let mut xhat = vec![0.0; data.len()];
    let mut inv_std = Vec::with_capacity(data.len() / group);
    for (chunk, out) in data.chunks(group).zip(xhat.chunks_mut(group)) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = (v - mean) * r;
        }
        inv_std.push(r);
    }
    NormStats { xhat, inv_std }
}

/// Layer normalization over the last axis with affine `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
    let c = x.last_dim();
    if gamma.numel() != c || beta.numel() != c {
        return Err(NumericsError::shape(
            "layer_norm",
            format!("gamma/beta of {}/{} for last dim {c}", gamma.numel(), beta.numel()),
        ));
    }
    if eps <= 0.0 {
        return Err(NumericsError::Config("layer_norm eps must be positive".into()));
    }
    let stats = normalize_groups(x.data(), c, eps);
    let mut out = stats.xhat;
    for row in out.chunks_mut(c) {
        for ((o, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Group normalization of each row of `x[n, c]` into `groups` channel groups,
/// without a learned affine.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor, NumericsError> {
    let c = x.last_dim();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(NumericsError::Config(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if eps <= 0.0 {
        return Err(NumericsError::Config("group_norm eps must be positive".into()));
    }
    let stats = normalize_groups(x.data(), c / groups, eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), stats.xhat))
}

/// Standard sinusoidal table `[rows, dim]`: even columns `sin(p / 10000^(2i/dim))`,
/// odd columns the matching cosine.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; rows * dim];
    for p in 0..rows {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data[p * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![rows, dim], data)
}

/// Multi-head scaled dot-product attention without projections:
/// per head `softmax(Q_h K_h^T / sqrt(d/heads)) V_h`, heads concatenated.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor, NumericsError> {
    let (nq, d) = q.dims2("attention")?;
    let (nk, dk) = k.dims2("attention")?;
    let (nv, dv) = v.dims2("attention")?;
    if d != dk || nk != nv {
        return Err(NumericsError::shape(
            "attention",
            format!("Q[{nq},{d}] K[{nk},{dk}] V[{nv},{dv}]"),
        ));
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(NumericsError::shape(
            "attention",
            format!("dims {d}/{dv} not divisible by {heads} heads"),
        ));
    }
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dvh, dvh)?;
        let mut scores = vec![0.0; nq * nk];
        matmul_nt_into(qh.data(), kh.data(), &mut scores, nq, dh, nk);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        let weights = Tensor::from_parts(vec![nq, nk], scores).softmax_last();
        parts.push(weights.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_cols(&refs)?.ensure_finite("attention")
}
