//! Factorization-machine interaction: all pairwise field dot products.
//!
//! The vanilla path broadcasts context fields to every candidate and computes all
//! `C(K+M, 2)` pairs per candidate. The rank-aware path splits the pairs by tensor rank:
//! the `C(K, 2)` context–context pairs are computed once per request and the
//! `K·M + C(M, 2)` pairs that touch a target field are computed per candidate.
//!
//! Pair order. Vanilla output lists pairs `(a, b)`, `a < b`, row-major over the
//! concatenated field list `[c_1..c_K, t_1..t_M]`. Decomposed output lists the context
//! pairs in the same upper-triangle order, then for each target field `t_i` in order:
//! `⟨t_i, c_1⟩..⟨t_i, c_K⟩, ⟨t_i, t_{i+1}⟩..⟨t_i, t_M⟩`. [`pair_permutation`] maps
//! between the two.

use crate::cost::choose2;
use crate::error::{Error, Result};
use crate::tensor::{broadcast, concat_rows, dot, FlopCounter, Rank2Tensor, Rank3Tensor};

/// Context field embeddings `[K × D]` and per-candidate target embeddings `[N × M × D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FmInput {
    ctx: Rank2Tensor,
    tgt: Rank3Tensor,
}

impl FmInput {
    pub fn new(ctx: Rank2Tensor, tgt: Rank3Tensor) -> Result<Self> {
        if ctx.cols() != tgt.cols() {
            return Err(Error::mismatch("FmInput", &ctx.shape(), &tgt.shape()));
        }
        if tgt.n() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { ctx, tgt })
    }

    pub fn ctx(&self) -> &Rank2Tensor {
        &self.ctx
    }

    pub fn tgt(&self) -> &Rank3Tensor {
        &self.tgt
    }

    pub fn k(&self) -> usize {
        self.ctx.rows()
    }

    pub fn m(&self) -> usize {
        self.tgt.rows()
    }

    pub fn d(&self) -> usize {
        self.ctx.cols()
    }

    pub fn n(&self) -> usize {
        self.tgt.n()
    }
}

/// Output of the rank-aware FM: shared context pairs plus per-candidate target pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FmOutput {
    pub ctx_pairs: Rank2Tensor,
    pub tgt_pairs: Rank3Tensor,
}

/// Position of pair `(a, b)`, `a < b`, in row-major upper-triangle order over `fields`.
fn triangle_index(a: usize, b: usize, fields: usize) -> usize {
    debug_assert!(a < b && b < fields);
    a * fields - a * (a + 1) / 2 + (b - a - 1)
}

/// `perm[p]` is the vanilla position of decomposed position `p`.
pub fn pair_permutation(k: usize, m: usize) -> Vec<usize> {
    let fields = k + m;
    let mut perm = Vec::with_capacity(fields * fields.saturating_sub(1) / 2);
    for a in 0..k {
        for b in (a + 1)..k {
            perm.push(triangle_index(a, b, fields));
        }
    }
    for i in 0..m {
        for c in 0..k {
            perm.push(triangle_index(c, k + i, fields));
        }
        for l in (i + 1)..m {
            perm.push(triangle_index(k + i, k + l, fields));
        }
    }
    perm
}

/// All `C(K+M, 2)` pairs per candidate after broadcasting the context fields up front.
pub fn fm_vanilla(input: &FmInput, counter: &mut FlopCounter) -> Result<Rank3Tensor> {
    let fields = input.k() + input.m();
    if fields < 2 {
        return Err(Error::NoPairs { fields });
    }
    let ctx = broadcast(&input.ctx, input.n())?;
    let all = concat_rows(&ctx, &input.tgt)?;
    let d = input.d();
    let pairs = fields * (fields - 1) / 2;
    let mut out = Vec::with_capacity(input.n() * pairs);
    for j in 0..input.n() {
        let e = all.slice(j);
        for a in 0..fields {
            let ea = &e[a * d..(a + 1) * d];
            for b in (a + 1)..fields {
                out.push(dot(ea, &e[b * d..(b + 1) * d], counter)?);
            }
        }
    }
    Ok(Rank3Tensor::from_parts(input.n(), 1, pairs, out))
}

/// Context–context pairs, once per request. Fewer than two fields gives an empty row.
pub fn fm_ctx(ctx: &Rank2Tensor, counter: &mut FlopCounter) -> Rank2Tensor {
    let k = ctx.rows();
    let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for a in 0..k {
        for b in (a + 1)..k {
            out.push(crate::tensor::dot_raw(ctx.row(a), ctx.row(b)));
        }
    }
    counter.add(choose2(k as u64) * ctx.cols() as u64);
    Rank2Tensor::row_vector(out)
}

/// Target-anchored pairs per candidate: each target field against the stacked
/// `[c; T_j]` block, context first, then the later target fields.
pub fn fm_tgt(input: &FmInput, counter: &mut FlopCounter) -> Rank3Tensor {
    let (k, m, d, n) = (input.k(), input.m(), input.d(), input.n());
    let per = k * m + m * m.saturating_sub(1) / 2;
    let ctx = input.ctx.data();
    let mut out = Vec::with_capacity(n * per);
    for j in 0..n {
        let t = input.tgt.slice(j);
        for i in 0..m {
            let ti = &t[i * d..(i + 1) * d];
            for c in 0..k {
                out.push(crate::tensor::dot_raw(ti, &ctx[c * d..(c + 1) * d]));
            }
            for l in (i + 1)..m {
                out.push(crate::tensor::dot_raw(ti, &t[l * d..(l + 1) * d]));
            }
        }
    }
    counter.add((n * per * d) as u64);
    Rank3Tensor::from_parts(n, 1, per, out)
}

/// Rank-aware FM: [`fm_ctx`] once plus [`fm_tgt`] per candidate.
pub fn fm_decomposed(input: &FmInput, counter: &mut FlopCounter) -> Result<FmOutput> {
    let fields = input.k() + input.m();
    if fields < 2 {
        return Err(Error::NoPairs { fields });
    }
    Ok(FmOutput {
        ctx_pairs: fm_ctx(&input.ctx, counter),
        tgt_pairs: fm_tgt(input, counter),
    })
}

/// Reorders decomposed pair groups into [`fm_vanilla`] order. Pure data movement.
///
/// `k` and `m` are explicit because the group sizes alone do not pin them down: an
/// empty context group is consistent with both `K = 0` and `K = 1`.
pub fn fm_assemble(
    ctx_pairs: &Rank2Tensor,
    tgt_pairs: &Rank3Tensor,
    k: usize,
    m: usize,
) -> Result<Rank3Tensor> {
    let ctx_len = k * k.saturating_sub(1) / 2;
    let tgt_len = k * m + m * m.saturating_sub(1) / 2;
    if ctx_pairs.len() != ctx_len || tgt_pairs.rows() * tgt_pairs.cols() != tgt_len {
        return Err(Error::mismatch(
            "fm_assemble",
            &[ctx_pairs.len(), tgt_pairs.rows() * tgt_pairs.cols()],
            &[ctx_len, tgt_len],
        ));
    }
    let n = tgt_pairs.n();
    let perm = pair_permutation(k, m);
    let total = perm.len();
    let mut out = vec![0.0f32; n * total];
    for j in 0..n {
        let row = &mut out[j * total..(j + 1) * total];
        let tgt = tgt_pairs.slice(j);
        for (src, &dst) in ctx_pairs.data().iter().chain(tgt).zip(&perm) {
            row[dst] = *src;
        }
    }
    Ok(Rank3Tensor::from_parts(n, 1, total, out))
}
