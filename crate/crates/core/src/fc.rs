//! Fully connected layers: the broadcast-and-concatenate baseline and `RankSplitDense`.
//!
//! `RankSplitDense` splits the kernel rows at the context/target boundary, computes the
//! context projection once per request, and starts each candidate's accumulation from
//! it. Only the first FC layer can be split; its activation mixes context and target
//! signals, so every later layer is per candidate ([`dense_forward`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    batched_matmul_acc, broadcast, concat_cols, matmul, FlopCounter, Rank2Tensor, Rank3Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, data: &mut [f32]) {
        if self == Activation::Relu {
            for v in data {
                *v = v.max(0.0);
            }
        }
    }
}

/// Kernel `w` (`inputs × units`), bias `b` (`units`) and activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub w: Rank2Tensor,
    pub b: Vec<f32>,
    pub activation: Activation,
}

impl DenseParams {
    pub fn new(w: Rank2Tensor, b: Vec<f32>, activation: Activation) -> Result<Self> {
        if w.cols() == 0 || b.len() != w.cols() {
            return Err(Error::mismatch("DenseParams", &w.shape(), &[b.len()]));
        }
        Ok(Self { w, b, activation })
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    pub fn units(&self) -> usize {
        self.w.cols()
    }

    fn finish(&self, out: &mut Rank3Tensor) {
        let units = self.units();
        for row in out.data_mut().chunks_exact_mut(units) {
            for (v, b) in row.iter_mut().zip(&self.b) {
                *v += b;
            }
            self.activation.apply(row);
        }
    }
}

fn per_candidate_len(x: &Rank3Tensor) -> usize {
    x.rows() * x.cols()
}

/// Per-candidate dense layer `σ(x_j·W + b)` on a rank-3 input of `[N × 1 × inputs]`.
pub fn dense_forward(
    x: &Rank3Tensor,
    p: &DenseParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    if per_candidate_len(x) != p.inputs() {
        return Err(Error::mismatch("dense_forward", &x.shape(), &p.w.shape()));
    }
    let x = x.clone().flatten_candidates();
    let mut out = Rank3Tensor::zeros(x.n(), 1, p.units());
    batched_matmul_acc(&x, &p.w, &mut out, counter)?;
    p.finish(&mut out);
    Ok(out)
}

/// Baseline: broadcast `x_c`, concatenate with each candidate's `x_t`, apply the layer.
pub fn dense_vanilla(
    x_c: &Rank2Tensor,
    x_t: &Rank3Tensor,
    p: &DenseParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    if x_c.len() + per_candidate_len(x_t) != p.inputs() {
        return Err(Error::mismatch(
            "dense_vanilla",
            &[x_c.len(), per_candidate_len(x_t)],
            &p.w.shape(),
        ));
    }
    let ctx = broadcast(&x_c.clone().flatten(), x_t.n())?;
    let joined = concat_cols(&ctx, &x_t.clone().flatten_candidates())?;
    dense_forward(&joined, p, counter)
}

/// Splits the kernel rows at `ctx_size`: `(w_c, w_t)` with `[w_c; w_t] = w`.
pub fn split_kernel(w: &Rank2Tensor, ctx_size: usize) -> Result<(Rank2Tensor, Rank2Tensor)> {
    if ctx_size > w.rows() {
        return Err(Error::OutOfRange {
            what: "context size",
            index: ctx_size,
            max: w.rows(),
        });
    }
    Ok((w.slice_rows(0, ctx_size)?, w.slice_rows(ctx_size, w.rows())?))
}

/// First FC layer with its kernel pre-split at the context/target boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSplitDense {
    w_c: Rank2Tensor,
    w_t: Rank2Tensor,
    b: Vec<f32>,
    activation: Activation,
}

impl RankSplitDense {
    pub fn new(p: &DenseParams, ctx_size: usize) -> Result<Self> {
        let (w_c, w_t) = split_kernel(&p.w, ctx_size)?;
        Ok(Self {
            w_c,
            w_t,
            b: p.b.clone(),
            activation: p.activation,
        })
    }

    pub fn ctx_size(&self) -> usize {
        self.w_c.rows()
    }

    pub fn tgt_size(&self) -> usize {
        self.w_t.rows()
    }

    pub fn units(&self) -> usize {
        self.b.len()
    }

    /// `σ(x_c·W_c ⊕ x_t·W_t + b)` with `x_c·W_c` computed once and broadcast.
    pub fn forward(
        &self,
        x_c: &Rank2Tensor,
        x_t: &Rank3Tensor,
        counter: &mut FlopCounter,
    ) -> Result<Rank3Tensor> {
        if x_c.len() != self.ctx_size() || per_candidate_len(x_t) != self.tgt_size() {
            return Err(Error::mismatch(
                "rank_split_dense",
                &[x_c.len(), per_candidate_len(x_t)],
                &[self.ctx_size(), self.tgt_size()],
            ));
        }
        let ctx = matmul(&x_c.clone().flatten(), &self.w_c, counter)?;
        let mut out = broadcast(&ctx, x_t.n())?;
        batched_matmul_acc(&x_t.clone().flatten_candidates(), &self.w_t, &mut out, counter)?;
        let units = self.units();
        for row in out.data_mut().chunks_exact_mut(units) {
            for (v, b) in row.iter_mut().zip(&self.b) {
                *v += b;
            }
            self.activation.apply(row);
        }
        Ok(out)
    }
}

/// One-shot [`RankSplitDense`]; splits the kernel on every call.
pub fn rank_split_dense(
    x_c: &Rank2Tensor,
    x_t: &Rank3Tensor,
    p: &DenseParams,
    ctx_size: usize,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    RankSplitDense::new(p, ctx_size)?.forward(x_c, x_t, counter)
}
