//! Hard ranks and the differentiable rank operator.
//!
//! Ranks are ascending: the smallest entry gets rank 1. The soft rank is the
//! Euclidean projection of `w / epsilon` onto the permutahedron spanned by
//! `(1, ..., n)`. It reduces to a sort plus one isotonic regression, so it
//! costs O(n log n) time and O(n) memory, and its Jacobian is block-constant
//! over the pooled blocks of that regression.

use crate::error::{ensure_finite, Error, Result};

/// A rank vector together with the regularization strength that produced it.
///
/// `epsilon == 0.0` marks a hard rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    pub values: Vec<f64>,
    pub epsilon: f64,
}

impl RankVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_hard(&self) -> bool {
        self.epsilon == 0.0
    }
}

/// Position of each entry in the ascending sort of `w`, starting at 1.
///
/// Ties are broken by original index, so the result is always a permutation.
pub fn hard_rank(w: &[f64]) -> Result<RankVector> {
    if w.is_empty() {
        return Err(Error::InvalidInput("hard_rank: empty input".into()));
    }
    ensure_finite(w, "hard_rank")?;
    let order = argsort_ascending(w);
    let mut values = vec![0.0; w.len()];
    for (pos, &idx) in order.iter().enumerate() {
        values[idx] = (pos + 1) as f64;
    }
    Ok(RankVector {
        values,
        epsilon: 0.0,
    })
}

/// Indices that sort `w` ascending; stable on ties.
pub fn argsort_ascending(w: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&i, &j| w[i].total_cmp(&w[j]).then(i.cmp(&j)));
    order
}

/// Least-squares nondecreasing fit of `y` by pool-adjacent-violators.
pub fn isotonic_regression(y: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(y, "isotonic_regression")?;
    let blocks = pav_nondecreasing(y);
    let mut out = Vec::with_capacity(y.len());
    for b in &blocks {
        out.extend(std::iter::repeat_n(b.mean, b.len));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Block {
    start: usize,
    len: usize,
    sum: f64,
    mean: f64,
}

/// Pool-adjacent-violators for a nondecreasing fit. Blocks are pooled only on
/// a strict violation.
fn pav_nondecreasing(y: &[f64]) -> Vec<Block> {
    let mut blocks: Vec<Block> = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        let mut cur = Block {
            start: i,
            len: 1,
            sum: v,
            mean: v,
        };
        while let Some(prev) = blocks.last() {
            if prev.mean > cur.mean {
                let prev = blocks.pop().unwrap();
                let len = prev.len + cur.len;
                let sum = prev.sum + cur.sum;
                cur = Block {
                    start: prev.start,
                    len,
                    sum,
                    mean: sum / len as f64,
                };
            } else {
                break;
            }
        }
        blocks.push(cur);
    }
    blocks
}

/// Soft rank with the block structure needed for its vector-Jacobian product.
#[derive(Debug, Clone)]
pub struct SoftRank {
    ranks: RankVector,
    /// Block id of every original index.
    block_of: Vec<usize>,
    block_len: Vec<usize>,
}

impl SoftRank {
    pub fn compute(w: &[f64], epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "soft_rank: epsilon must be positive, got {epsilon}"
            )));
        }
        if w.is_empty() {
            return Err(Error::InvalidInput("soft_rank: empty input".into()));
        }
        ensure_finite(w, "soft_rank")?;
        let n = w.len();
        let z: Vec<f64> = w.iter().map(|v| v / epsilon).collect();

        // Descending sort of z against the descending anchor (n, n-1, ..., 1).
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| z[j].total_cmp(&z[i]).then(i.cmp(&j)));
        let sorted: Vec<f64> = order.iter().map(|&i| z[i]).collect();

        // Nonincreasing isotonic fit of (s - rho) == negated nondecreasing fit
        // of (rho - s).
        let target: Vec<f64> = sorted
            .iter()
            .enumerate()
            .map(|(k, s)| (n - k) as f64 - s)
            .collect();
        let blocks = pav_nondecreasing(&target);

        let mut values = vec![0.0; n];
        let mut block_of = vec![0; n];
        let mut block_len = Vec::with_capacity(blocks.len());
        for (b, blk) in blocks.iter().enumerate() {
            block_len.push(blk.len);
            let v = -blk.mean;
            for k in blk.start..blk.start + blk.len {
                let idx = order[k];
                values[idx] = sorted[k] - v;
                block_of[idx] = b;
            }
        }
        Ok(Self {
            ranks: RankVector { values, epsilon },
            block_of,
            block_len,
        })
    }

    pub fn ranks(&self) -> &RankVector {
        &self.ranks
    }

    pub fn into_ranks(self) -> RankVector {
        self.ranks
    }

    pub fn num_blocks(&self) -> usize {
        self.block_len.len()
    }

    /// `upstream^T J` where `J` is the Jacobian of the soft rank in `w`.
    ///
    /// `J = (I - A) / epsilon` with `A` averaging within each pooled block;
    /// `J` is symmetric so this is also `J upstream`.
    pub fn vjp(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let n = self.block_of.len();
        if upstream.len() != n {
            return Err(Error::Shape(format!(
                "soft_rank_vjp: upstream has length {}, expected {n}",
                upstream.len()
            )));
        }
        let mut block_sum = vec![0.0; self.block_len.len()];
        for (i, &u) in upstream.iter().enumerate() {
            block_sum[self.block_of[i]] += u;
        }
        let eps = self.ranks.epsilon;
        Ok(upstream
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let b = self.block_of[i];
                (u - block_sum[b] / self.block_len[b] as f64) / eps
            })
            .collect())
    }
}

/// Projection of `w / epsilon` onto the permutahedron of `(1, ..., n)`.
pub fn soft_rank(w: &[f64], epsilon: f64) -> Result<RankVector> {
    SoftRank::compute(w, epsilon).map(SoftRank::into_ranks)
}

/// Vector-Jacobian product of [`soft_rank`] at `w`.
pub fn soft_rank_vjp(w: &[f64], epsilon: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    SoftRank::compute(w, epsilon)?.vjp(upstream)
}
