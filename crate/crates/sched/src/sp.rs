//! Sequence-parallel self-attention simulated with in-process workers.
//!
//! Each worker holds a contiguous slice of the token axis. Around the
//! attention core, an all-to-all exchange trades the sequence split for a
//! head split so every worker sees the whole sequence for `heads / P`
//! heads, then trades back. Messages are delivered in a fixed order
//! (sender-major), so results are bit-reproducible. All exchanges are graph
//! operations; gradients flow through them.

use std::ops::Range;

use mvd_tensor::{attention, concat, Mask, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShardAxis {
    Spatial,
    Heads,
}

/// Contiguous equal split of one axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub workers: usize,
    pub axis: ShardAxis,
    pub ranges: Vec<Range<usize>>,
    /// Length after padding.
    pub len: usize,
    /// Real entries; positions `valid..len` are masked padding.
    pub valid: usize,
}

impl ShardPlan {
    /// Spatial split, padding the sequence up to a multiple of `workers`.
    pub fn spatial(len: usize, workers: usize) -> Result<Self> {
        if workers == 0 || len == 0 {
            return Err(Error::Indivisible {
                what: "sequence",
                len,
                workers,
            });
        }
        Ok(Self::even(ShardAxis::Spatial, len.div_ceil(workers) * workers, len, workers))
    }

    /// Head split; heads are never padded.
    pub fn heads(heads: usize, workers: usize) -> Result<Self> {
        if workers == 0 || heads == 0 || !heads.is_multiple_of(workers) {
            return Err(Error::Indivisible {
                what: "heads",
                len: heads,
                workers,
            });
        }
        Ok(Self::even(ShardAxis::Heads, heads, heads, workers))
    }

    fn even(axis: ShardAxis, len: usize, valid: usize, workers: usize) -> Self {
        let per = len / workers;
        Self {
            workers,
            axis,
            ranges: (0..workers).map(|w| w * per..(w + 1) * per).collect(),
            len,
            valid,
        }
    }

    pub fn padding(&self) -> usize {
        self.len - self.valid
    }

    /// `true` for real positions.
    pub fn keep(&self) -> Vec<bool> {
        (0..self.len).map(|i| i < self.valid).collect()
    }
}

/// Appends zero rows along axis 0 up to `len`.
fn pad_rows<'g>(x: Var<'g>, len: usize) -> Result<Var<'g>> {
    let mut s = x.shape();
    if s[0] == len {
        return Ok(x);
    }
    s[0] = len - s[0];
    let zeros = x.graph().constant(Tensor::zeros(&s)?);
    Ok(concat(&[x, zeros], 0)?)
}

/// Splits `x: [S, ..]` into `workers` contiguous shards along axis 0,
/// padding with zero rows when `S` is not a multiple of `workers`.
pub fn shard_sequence<'g>(x: Var<'g>, workers: usize) -> Result<(ShardPlan, Vec<Var<'g>>)> {
    let plan = ShardPlan::spatial(x.shape()[0], workers)?;
    let padded = pad_rows(x, plan.len)?;
    let shards = plan
        .ranges
        .iter()
        .map(|r| padded.narrow(0, r.start, r.end))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((plan, shards))
}

/// Concatenates shards and drops the padding.
pub fn gather<'g>(shards: &[Var<'g>], plan: &ShardPlan) -> Result<Var<'g>> {
    Ok(concat(shards, 0)?.narrow(0, 0, plan.valid)?)
}

/// One delivered message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub bytes: usize,
}

/// Worker `p` splits its shard into `P` chunks along `split_axis` and sends
/// chunk `q` to worker `q`; worker `q` concatenates what it receives along
/// `concat_axis` in sender order.
pub fn all_to_all<'g>(shards: &[Var<'g>], split_axis: usize, concat_axis: usize) -> Result<(Vec<Var<'g>>, Vec<Message>)> {
    let p = shards.len();
    let first = shards.first().ok_or(Error::Indivisible {
        what: "exchange",
        len: 0,
        workers: 0,
    })?;
    let len = first.shape()[split_axis];
    if len % p != 0 {
        return Err(Error::Indivisible {
            what: if split_axis == 0 { "sequence" } else { "heads" },
            len,
            workers: p,
        });
    }
    let per = len / p;
    let mut inbox: Vec<Vec<Var<'g>>> = vec![Vec::with_capacity(p); p];
    let mut messages = Vec::with_capacity(p * p);
    for (from, shard) in shards.iter().enumerate() {
        if shard.shape() != first.shape() {
            return Err(Error::Config("all-to-all shards differ in shape".into()));
        }
        for (to, slot) in inbox.iter_mut().enumerate() {
            let chunk = shard.narrow(split_axis, to * per, (to + 1) * per)?;
            messages.push(Message {
                from,
                to,
                bytes: chunk.value().len() * std::mem::size_of::<f64>(),
            });
            slot.push(chunk);
        }
    }
    let out = inbox
        .iter()
        .map(|parts| concat(parts, concat_axis))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((out, messages))
}

/// Bias-free projections `[W, W]`.
#[derive(Clone, Copy)]
pub struct AttentionWeights<'g> {
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
    pub wo: Var<'g>,
}

/// `[L, W] -> [L, heads, W / heads]`.
fn split_heads<'g>(x: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], heads, s[1] / heads])?)
}

/// Attention of `q, k, v: [L, h, d]` over the full sequence per head.
fn core<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, keep: &[bool]) -> Result<Var<'g>> {
    let mask = Mask::new(&[1, 1, keep.len()], keep.to_vec())?;
    let t = |x: Var<'g>| x.permute(&[1, 0, 2]);
    Ok(attention(t(q)?, t(k)?, t(v)?, Some(&mask))?.permute(&[1, 0, 2])?)
}

/// Single-worker multi-head self-attention of `x: [S, W]`. `keep`
/// excludes keys.
pub fn reference_attention<'g>(x: Var<'g>, w: &AttentionWeights<'g>, heads: usize, keep: Option<&[bool]>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
        return Err(Error::Indivisible {
            what: "width",
            len: s.get(1).copied().unwrap_or(0),
            workers: heads,
        });
    }
    let all = vec![true; s[0]];
    let keep = keep.unwrap_or(&all);
    let q = split_heads(x.matmul(w.wq)?, heads)?;
    let k = split_heads(x.matmul(w.wk)?, heads)?;
    let v = split_heads(x.matmul(w.wv)?, heads)?;
    let o = core(q, k, v, keep)?.reshape(&s)?;
    Ok(o.matmul(w.wo)?)
}

pub struct SpOutput<'g> {
    /// `[S, W]`, padding removed.
    pub output: Var<'g>,
    pub plan: ShardPlan,
    pub messages: Vec<Message>,
}

impl SpOutput<'_> {
    /// Bytes each worker sends to other workers.
    pub fn bytes_sent(&self) -> Vec<usize> {
        let mut out = vec![0; self.plan.workers];
        for m in self.messages.iter().filter(|m| m.from != m.to) {
            out[m.from] += m.bytes;
        }
        out
    }
}

/// Sequence-parallel self-attention of `x: [S, W]` on `workers` simulated
/// workers: shard, project, exchange to a head split, attend, exchange
/// back, project out, gather.
pub fn sp_attention_forward<'g>(x: Var<'g>, w: &AttentionWeights<'g>, heads: usize, workers: usize) -> Result<SpOutput<'g>> {
    let s = x.shape();
    if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
        return Err(Error::Indivisible {
            what: "width",
            len: s.get(1).copied().unwrap_or(0),
            workers: heads,
        });
    }
    ShardPlan::heads(heads, workers)?;
    let (plan, shards) = shard_sequence(x, workers)?;
    let keep = plan.keep();
    let mut messages = Vec::new();
    let mut project = |m: Var<'g>| -> Result<Vec<Var<'g>>> {
        let local = shards
            .iter()
            .map(|x| split_heads(x.matmul(m)?, heads))
            .collect::<Result<Vec<_>>>()?;
        let (full, msgs) = all_to_all(&local, 1, 0)?;
        messages.extend(msgs);
        Ok(full)
    };
    let q = project(w.wq)?;
    let k = project(w.wk)?;
    let v = project(w.wv)?;
    let attended = (0..workers)
        .map(|p| core(q[p], k[p], v[p], &keep))
        .collect::<Result<Vec<_>>>()?;
    let (back, msgs) = all_to_all(&attended, 0, 1)?;
    messages.extend(msgs);
    let out = back
        .into_iter()
        .map(|o| {
            let os = o.shape();
            Ok(o.reshape(&[os[0], s[1]])?.matmul(w.wo)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpOutput {
        output: gather(&out, &plan)?,
        plan,
        messages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_partition_the_axis() {
        let p = ShardPlan::spatial(17, 2).unwrap();
        assert_eq!((p.len, p.valid, p.padding()), (18, 17, 1));
        assert_eq!(p.ranges, vec![0..9, 9..18]);
        assert!(ShardPlan::heads(6, 4).is_err());
        assert_eq!(ShardPlan::heads(8, 4).unwrap().ranges.len(), 4);
    }
}
