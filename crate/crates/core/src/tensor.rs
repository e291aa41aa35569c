//! Dense row-major tensors and the instrumented kernels the layer modules are built from.
//!
//! Rank-2 tensors hold per-request (context) data, rank-3 tensors hold per-candidate
//! (target) data with the candidate axis outermost. Every kernel that performs
//! multiply-accumulates charges them to a caller-owned [`FlopCounter`]; bias adds,
//! Hadamard products, residual adds and exponentials are not counted.
//!
//! Matrix kernels accumulate each output element in ascending order of the reduction
//! index, starting from the initial output value. That is the same order a naive
//! `k`-innermost triple loop uses, so results compare bitwise against one.

use rand::Rng;

use crate::error::{Error, Result};

/// Multiply-accumulate counter threaded through every kernel.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounter {
    macs: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    #[inline]
    pub fn add(&mut self, macs: u64) {
        self.macs += macs;
    }

    /// Clears the count. Call between forward passes, never inside one.
    pub fn reset(&mut self) {
        self.macs = 0;
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(Error::DataLength {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Per-request matrix, `rows × cols`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank2Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Rank2Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_len(&[rows, cols], data.len())?;
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A `1 × len` row vector.
    pub fn row_vector(data: Vec<f32>) -> Self {
        let cols = data.len();
        Self::from_parts(1, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::mismatch("from_rows", &[cols], &[bad.len()]));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        scale: f32,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-1.0f32..1.0) * scale)
            .collect();
        Self::from_parts(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::OutOfRange {
                what: "row range end",
                index: end.max(start),
                max: self.rows,
            });
        }
        Ok(Self::from_parts(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        ))
    }

    /// Columns `start..end` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(Error::OutOfRange {
                what: "column range end",
                index: end.max(start),
                max: self.cols,
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Self::from_parts(self.rows, width, data))
    }

    /// Stacks `self` on top of `other` (row concatenation).
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols && !self.is_empty() && !other.is_empty() {
            return Err(Error::mismatch("vstack", &self.shape(), &other.shape()));
        }
        let cols = if self.is_empty() { other.cols } else { self.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self::from_parts(self.rows + other.rows, cols, data))
    }

    /// Places `other` to the right of `self` (column concatenation).
    pub fn hstack(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::mismatch("hstack", &self.shape(), &other.shape()));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self::from_parts(self.rows, cols, data))
    }

    /// Reinterprets the data as a single `1 × rows·cols` row.
    pub fn flatten(self) -> Self {
        let cols = self.data.len();
        Self::from_parts(1, cols, self.data)
    }
}

/// Per-candidate stack of `n` matrices, each `rows × cols`; candidate axis outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank3Tensor {
    n: usize,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Rank3Tensor {
    pub fn new(n: usize, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_len(&[n, rows, cols], data.len())?;
        check_finite(&data)?;
        Ok(Self {
            n,
            rows,
            cols,
            data,
        })
    }

    pub(crate) fn from_parts(n: usize, rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(n * rows * cols, data.len());
        Self {
            n,
            rows,
            cols,
            data,
        }
    }

    pub fn zeros(n: usize, rows: usize, cols: usize) -> Self {
        Self::from_parts(n, rows, cols, vec![0.0; n * rows * cols])
    }

    pub fn random_uniform<R: Rng + ?Sized>(
        n: usize,
        rows: usize,
        cols: usize,
        scale: f32,
        rng: &mut R,
    ) -> Self {
        let data = (0..n * rows * cols)
            .map(|_| rng.gen_range(-1.0f32..1.0) * scale)
            .collect();
        Self::from_parts(n, rows, cols, data)
    }

    /// Stacks equally shaped matrices along a new candidate axis.
    pub fn from_slices(slices: &[Rank2Tensor]) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::EmptyBatch);
        };
        let (rows, cols) = (first.rows, first.cols);
        let mut data = Vec::with_capacity(slices.len() * rows * cols);
        for s in slices {
            if s.shape() != first.shape() {
                return Err(Error::mismatch("from_slices", &first.shape(), &s.shape()));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Self::from_parts(slices.len(), rows, cols, data))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n, self.rows, self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn slice_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Flat data of candidate `j`.
    pub fn slice(&self, j: usize) -> &[f32] {
        let len = self.slice_len();
        &self.data[j * len..(j + 1) * len]
    }

    pub fn slice_mut(&mut self, j: usize) -> &mut [f32] {
        let len = self.slice_len();
        &mut self.data[j * len..(j + 1) * len]
    }

    /// Candidate `j` as an owned matrix.
    pub fn candidate(&self, j: usize) -> Rank2Tensor {
        Rank2Tensor::from_parts(self.rows, self.cols, self.slice(j).to_vec())
    }

    pub fn candidates(&self) -> impl Iterator<Item = Rank2Tensor> + '_ {
        (0..self.n).map(|j| self.candidate(j))
    }

    pub fn get(&self, j: usize, row: usize, col: usize) -> f32 {
        self.data[(j * self.rows + row) * self.cols + col]
    }

    /// Same data viewed with a different per-candidate shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.slice_len() {
            return Err(Error::mismatch(
                "reshape",
                &self.shape(),
                &[self.n, rows, cols],
            ));
        }
        Ok(Self::from_parts(self.n, rows, cols, self.data))
    }

    /// Every candidate flattened into a single `1 × rows·cols` row.
    pub fn flatten_candidates(self) -> Self {
        let cols = self.slice_len();
        Self::from_parts(self.n, 1, cols, self.data)
    }

    /// Reorders candidates so that output slice `i` is input slice `perm[i]`.
    pub fn permute_candidates(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::mismatch("permute_candidates", &[self.n], &[perm.len()]));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &j in perm {
            if j >= self.n {
                return Err(Error::OutOfRange {
                    what: "candidate index",
                    index: j,
                    max: self.n.saturating_sub(1),
                });
            }
            data.extend_from_slice(self.slice(j));
        }
        Ok(Self::from_parts(self.n, self.rows, self.cols, data))
    }

    /// Candidates `j..j+1` as a one-candidate tensor.
    pub fn select(&self, j: usize) -> Self {
        Self::from_parts(1, self.rows, self.cols, self.slice(j).to_vec())
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, i-k-j order.
#[inline]
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`; each element continues from its current value.
#[inline]
pub(crate) fn gemm_bt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = out[i * n + j];
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
}

#[inline]
pub(crate) fn dot_raw(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Rank2Tensor, b: &Rank2Tensor, counter: &mut FlopCounter) -> Result<Rank2Tensor> {
    if a.cols != b.rows {
        return Err(Error::mismatch("matmul", &a.shape(), &b.shape()));
    }
    let mut out = Rank2Tensor::zeros(a.rows, b.cols);
    gemm_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    counter.add((a.rows * a.cols * b.cols) as u64);
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt(
    a: &Rank2Tensor,
    b: &Rank2Tensor,
    counter: &mut FlopCounter,
) -> Result<Rank2Tensor> {
    if a.cols != b.cols {
        return Err(Error::mismatch("matmul_bt", &a.shape(), &b.shape()));
    }
    let mut out = Rank2Tensor::zeros(a.rows, b.rows);
    gemm_bt_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.rows);
    counter.add((a.rows * a.cols * b.rows) as u64);
    Ok(out)
}

/// Length-`D` dot product; costs `D` MACs.
pub fn dot(a: &[f32], b: &[f32], counter: &mut FlopCounter) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::mismatch("dot", &[a.len()], &[b.len()]));
    }
    counter.add(a.len() as u64);
    Ok(dot_raw(a, b))
}

/// Applies the linear map `w` (`out × in`) to every row vector of every candidate:
/// `y_j = x_j · wᵀ`.
pub fn batched_apply(
    w: &Rank2Tensor,
    x: &Rank3Tensor,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    let mut out = Rank3Tensor::zeros(x.n, x.rows, w.rows);
    batched_apply_acc(w, x, &mut out, counter)?;
    Ok(out)
}

/// [`batched_apply`] accumulating into `out`, continuing each element's running sum.
pub fn batched_apply_acc(
    w: &Rank2Tensor,
    x: &Rank3Tensor,
    out: &mut Rank3Tensor,
    counter: &mut FlopCounter,
) -> Result<()> {
    if w.cols != x.cols {
        return Err(Error::mismatch("batched_apply", &w.shape(), &x.shape()));
    }
    if out.shape() != [x.n, x.rows, w.rows] {
        return Err(Error::mismatch("batched_apply", &[x.n, x.rows, w.rows], &out.shape()));
    }
    gemm_bt_acc(&x.data, &w.data, &mut out.data, x.n * x.rows, x.cols, w.rows);
    counter.add((x.n * x.rows * w.rows * w.cols) as u64);
    Ok(())
}

/// Right-multiplies every candidate slice by `w` (`in × out`): `y_j = x_j · w`.
pub fn batched_matmul(
    x: &Rank3Tensor,
    w: &Rank2Tensor,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    let mut out = Rank3Tensor::zeros(x.n, x.rows, w.cols);
    batched_matmul_acc(x, w, &mut out, counter)?;
    Ok(out)
}

/// [`batched_matmul`] accumulating into `out`.
pub fn batched_matmul_acc(
    x: &Rank3Tensor,
    w: &Rank2Tensor,
    out: &mut Rank3Tensor,
    counter: &mut FlopCounter,
) -> Result<()> {
    if x.cols != w.rows {
        return Err(Error::mismatch("batched_matmul", &x.shape(), &w.shape()));
    }
    if out.shape() != [x.n, x.rows, w.cols] {
        return Err(Error::mismatch("batched_matmul", &[x.n, x.rows, w.cols], &out.shape()));
    }
    gemm_acc(&x.data, &w.data, &mut out.data, x.n * x.rows, x.cols, w.cols);
    counter.add((x.n * x.rows * x.cols * w.cols) as u64);
    Ok(())
}

/// Explicit late broadcast: `n` copies of `x` along a new candidate axis. Not counted.
pub fn broadcast(x: &Rank2Tensor, n: usize) -> Result<Rank3Tensor> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut data = Vec::with_capacity(n * x.data.len());
    for _ in 0..n {
        data.extend_from_slice(&x.data);
    }
    Ok(Rank3Tensor::from_parts(n, x.rows, x.cols, data))
}

/// Elementwise product of two equally shaped rank-3 tensors.
pub fn hadamard(a: &Rank3Tensor, b: &Rank3Tensor) -> Result<Rank3Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch("hadamard", &a.shape(), &b.shape()));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Rank3Tensor::from_parts(a.n, a.rows, a.cols, data))
}

/// Elementwise product of every candidate slice with the shared matrix `b`.
pub fn hadamard_broadcast(a: &Rank3Tensor, b: &Rank2Tensor) -> Result<Rank3Tensor> {
    if [a.rows, a.cols] != b.shape() {
        return Err(Error::mismatch("hadamard_broadcast", &a.shape(), &b.shape()));
    }
    let len = b.data.len();
    let mut data = a.data.clone();
    if len > 0 {
        for chunk in data.chunks_exact_mut(len) {
            for (x, y) in chunk.iter_mut().zip(&b.data) {
                *x *= y;
            }
        }
    }
    Ok(Rank3Tensor::from_parts(a.n, a.rows, a.cols, data))
}

/// Adds the shared matrix `b` to every candidate slice in place.
pub fn add_broadcast_inplace(a: &mut Rank3Tensor, b: &Rank2Tensor) -> Result<()> {
    if [a.rows, a.cols] != b.shape() {
        return Err(Error::mismatch("add_broadcast", &a.shape(), &b.shape()));
    }
    let len = b.data.len();
    if len > 0 {
        for chunk in a.data.chunks_exact_mut(len) {
            for (x, y) in chunk.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }
    Ok(())
}

/// Per-candidate row concatenation: slice `j` of the result is `[a_j; b_j]`.
pub fn concat_rows(a: &Rank3Tensor, b: &Rank3Tensor) -> Result<Rank3Tensor> {
    if a.n != b.n || (a.cols != b.cols && a.rows > 0 && b.rows > 0) {
        return Err(Error::mismatch("concat_rows", &a.shape(), &b.shape()));
    }
    let cols = if a.rows > 0 { a.cols } else { b.cols };
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for j in 0..a.n {
        data.extend_from_slice(a.slice(j));
        data.extend_from_slice(b.slice(j));
    }
    Ok(Rank3Tensor::from_parts(a.n, a.rows + b.rows, cols, data))
}

/// Per-candidate column concatenation: each row of slice `j` is `[a_j row | b_j row]`.
pub fn concat_cols(a: &Rank3Tensor, b: &Rank3Tensor) -> Result<Rank3Tensor> {
    if a.n != b.n || a.rows != b.rows {
        return Err(Error::mismatch("concat_cols", &a.shape(), &b.shape()));
    }
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for r in 0..a.n * a.rows {
        data.extend_from_slice(&a.data[r * a.cols..(r + 1) * a.cols]);
        data.extend_from_slice(&b.data[r * b.cols..(r + 1) * b.cols]);
    }
    Ok(Rank3Tensor::from_parts(a.n, a.rows, cols, data))
}

/// In-place numerically stable softmax of a single row. Exponentials are not counted.
pub fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Largest relative deviation `max|a−b| / max|b|`, falling back to absolute error
/// when the reference is all zeros.
pub fn max_rel_err(got: &[f32], want: &[f32]) -> f64 {
    assert_eq!(got.len(), want.len(), "max_rel_err length mismatch");
    let scale = want.iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs())));
    let abs = max_abs_err(got, want);
    if scale > 0.0 {
        abs / scale
    } else {
        abs
    }
}

pub fn max_abs_err(got: &[f32], want: &[f32]) -> f64 {
    got.iter()
        .zip(want)
        .fold(0.0f64, |m, (a, b)| m.max(f64::from((a - b).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Rank2Tensor, b: &Rank2Tensor) -> Vec<f32> {
        let mut out = vec![0.0f32; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0f32;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = Rank2Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Rank2Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let mut c = FlopCounter::new();
        let out = matmul(&a, &b, &mut c).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
        assert_eq!(c.macs(), 4);
    }

    #[test]
    fn matmul_zero_row() {
        let a = Rank2Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Rank2Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        let mut c = FlopCounter::new();
        let out = matmul(&a, &b, &mut c).unwrap();
        assert_eq!(out.data(), &[0.0]);
        assert_eq!(c.macs(), 2);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = Rank2Tensor::random_uniform(3, 4, 1.0, &mut rng);
        let b = Rank2Tensor::random_uniform(4, 2, 1.0, &mut rng);
        let mut c = FlopCounter::new();
        let out = matmul(&a, &b, &mut c).unwrap();
        // same accumulation order, so exact
        assert_eq!(out.data(), naive_matmul(&a, &b).as_slice());
        assert_eq!(c.macs(), 3 * 4 * 2);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Rank2Tensor::zeros(2, 3);
        let b = Rank2Tensor::zeros(2, 3);
        let err = matmul(&a, &b, &mut FlopCounter::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::DimensionMismatch { op: "matmul", .. }));
    }

    #[test]
    fn matmul_bt_agrees_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Rank2Tensor::random_uniform(5, 3, 1.0, &mut rng);
        let b = Rank2Tensor::random_uniform(4, 3, 1.0, &mut rng);
        let mut c1 = FlopCounter::new();
        let mut c2 = FlopCounter::new();
        let x = matmul_bt(&a, &b, &mut c1).unwrap();
        let y = matmul(&a, &b.transpose(), &mut c2).unwrap();
        assert_eq!(x, y);
        assert_eq!(c1, c2);
    }

    #[test]
    fn batched_apply_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Rank3Tensor::random_uniform(4, 1, 5, 1.0, &mut rng);
        let mut c = FlopCounter::new();
        let y = batched_apply(&Rank2Tensor::identity(5), &x, &mut c).unwrap();
        assert_eq!(x, y);
        assert_eq!(c.macs(), 4 * 5 * 5);
    }

    #[test]
    fn batched_apply_single_candidate_is_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Rank2Tensor::random_uniform(3, 5, 1.0, &mut rng);
        let x = Rank3Tensor::random_uniform(1, 1, 5, 1.0, &mut rng);
        let y = batched_apply(&w, &x, &mut FlopCounter::new()).unwrap();
        let col = x.candidate(0).transpose();
        let want = matmul(&w, &col, &mut FlopCounter::new()).unwrap();
        assert_eq!(y.data(), want.data());
    }

    #[test]
    fn batched_apply_matches_slicewise_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Rank2Tensor::random_uniform(4, 6, 1.0, &mut rng);
        let x = Rank3Tensor::random_uniform(3, 1, 6, 1.0, &mut rng);
        let mut c = FlopCounter::new();
        let y = batched_apply(&w, &x, &mut c).unwrap();
        assert_eq!(c.macs(), 3 * 4 * 6);
        for j in 0..3 {
            let col = x.candidate(j).transpose();
            let want = matmul(&w, &col, &mut FlopCounter::new()).unwrap();
            assert_eq!(y.slice(j), want.data());
        }
    }

    #[test]
    fn batched_apply_shape_mismatch() {
        let w = Rank2Tensor::zeros(2, 3);
        let x = Rank3Tensor::zeros(2, 1, 4);
        assert!(batched_apply(&w, &x, &mut FlopCounter::new()).is_err());
    }

    #[test]
    fn broadcast_copies_exactly() {
        let x = Rank2Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = broadcast(&x, 3).unwrap();
        assert_eq!(b.shape(), [3, 1, 2]);
        for j in 0..3 {
            assert_eq!(b.slice(j), x.data());
        }
        let one = broadcast(&x, 1).unwrap();
        assert_eq!(one.candidate(0), x);
        assert!(matches!(broadcast(&x, 0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn broadcast_then_hadamard_is_slicewise_hadamard() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Rank2Tensor::random_uniform(2, 3, 1.0, &mut rng);
        let t = Rank3Tensor::random_uniform(5, 2, 3, 1.0, &mut rng);
        let via_broadcast = hadamard(&t, &broadcast(&x, 5).unwrap()).unwrap();
        let direct = hadamard_broadcast(&t, &x).unwrap();
        assert_eq!(via_broadcast, direct);
        for j in 0..5 {
            let want: Vec<f32> = t.slice(j).iter().zip(x.data()).map(|(a, b)| a * b).collect();
            assert_eq!(direct.slice(j), want.as_slice());
        }
    }

    #[test]
    fn composed_pipeline_counter_is_sum_of_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Rank2Tensor::random_uniform(2, 3, 1.0, &mut rng);
        let b = Rank2Tensor::random_uniform(3, 4, 1.0, &mut rng);
        let w = Rank2Tensor::random_uniform(5, 4, 1.0, &mut rng);
        let mut c = FlopCounter::new();
        let ab = matmul(&a, &b, &mut c).unwrap();
        let x = broadcast(&ab, 6).unwrap();
        let y = batched_apply(&w, &x, &mut c).unwrap();
        let _ = batched_matmul(&y, &Rank2Tensor::identity(5), &mut c).unwrap();
        assert_eq!(c.macs(), (2 * 3 * 4 + 6 * 2 * 5 * 4 + 6 * 2 * 5 * 5) as u64);
    }

    #[test]
    fn constructors_reject_bad_data() {
        assert!(matches!(
            Rank2Tensor::new(2, 2, vec![0.0; 3]),
            Err(Error::DataLength { .. })
        ));
        assert!(matches!(
            Rank3Tensor::new(1, 1, 2, vec![0.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn concat_helpers() {
        let a = Rank3Tensor::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Rank3Tensor::new(2, 1, 1, vec![9.0, 8.0]).unwrap();
        let c = concat_cols(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let r = concat_rows(&a, &a).unwrap();
        assert_eq!(r.shape(), [2, 2, 2]);
        assert_eq!(r.slice(1), &[3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let mut row = vec![1.0, 2.0, 3.0, -50.0];
        softmax_inplace(&mut row);
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
