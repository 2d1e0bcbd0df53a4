//! Attention and embedding layers shared by the encoders and the denoiser.

use mvd_tensor::{attention, Mask, Tensor, Var};

use crate::error::{shape_err, Result};
use crate::params::{init_mlp, Bound, Init};

pub const ROPE_BASE: f64 = 10_000.0;

/// Registers `name.{q,k,v,o}` for [`mha`]. With `zero_out` the output
/// projection starts at zero.
pub fn init_mha(init: &mut Init<'_>, name: &str, width: usize, zero_out: bool) -> Result<()> {
    for p in ["q", "k", "v"] {
        init.linear(&format!("{name}.{p}"), width, width)?;
    }
    if zero_out {
        init.linear_zero(&format!("{name}.o"), width, width)
    } else {
        init.linear(&format!("{name}.o"), width, width)
    }
}

fn split_heads<'g>(x: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let (n, l, w) = (s[0], s[1], s[2]);
    Ok(x.reshape(&[n, l, heads, w / heads])?.permute(&[0, 2, 1, 3])?)
}

/// Multi-head attention of `q_in: [N, Lq, W]` over `kv_in: [N, Lk, W]`.
/// `mask` broadcasts against the scores `[N, heads, Lq, Lk]`; `rope`
/// rotates queries and keys by their sequence index.
pub fn mha<'g>(
    p: &Bound<'g>,
    name: &str,
    heads: usize,
    q_in: Var<'g>,
    kv_in: Var<'g>,
    mask: Option<&Mask>,
    rope: bool,
) -> Result<Var<'g>> {
    let qs = q_in.shape();
    let (n, lq, w) = (qs[0], qs[1], qs[2]);
    if w % heads != 0 {
        return Err(shape_err("attention", format!("width {w} not divisible by {heads} heads")));
    }
    let mut q = split_heads(p.linear(&format!("{name}.q"), q_in)?, heads)?;
    let mut k = split_heads(p.linear(&format!("{name}.k"), kv_in)?, heads)?;
    let v = split_heads(p.linear(&format!("{name}.v"), kv_in)?, heads)?;
    if rope {
        let lk = kv_in.shape()[1];
        q = q.rope(&(0..lq).collect::<Vec<_>>(), ROPE_BASE)?;
        k = k.rope(&(0..lk).collect::<Vec<_>>(), ROPE_BASE)?;
    }
    let o = attention(q, k, v, mask)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, lq, w])?;
    p.linear(&format!("{name}.o"), o)
}

/// Registers [`temporal_transformer`] parameters.
pub fn init_temporal_transformer(init: &mut Init<'_>, name: &str, width: usize) -> Result<()> {
    init.layer_norm(&format!("{name}.ln0"), width)?;
    init_mha(init, &format!("{name}.attn"), width, false)?;
    init.layer_norm(&format!("{name}.ln1"), width)?;
    init_mlp(init, &format!("{name}.mlp"), width, 2 * width, width)
}

/// One pre-norm transformer layer over `x: [N, T, W]` with rotary
/// positions. `keep: [N * T]` excludes frames as keys.
pub fn temporal_transformer<'g>(
    p: &Bound<'g>,
    name: &str,
    heads: usize,
    x: Var<'g>,
    keep: Option<&[bool]>,
) -> Result<Var<'g>> {
    let s = x.shape();
    let mask = keep
        .map(|k| Mask::new(&[s[0], 1, 1, s[1]], k.to_vec()))
        .transpose()?;
    let h = p.layer_norm(&format!("{name}.ln0"), x)?;
    let x = x.add(mha(p, &format!("{name}.attn"), heads, h, h, mask.as_ref(), true)?)?;
    let h = p.layer_norm(&format!("{name}.ln1"), x)?;
    Ok(x.add(p.mlp(&format!("{name}.mlp"), h)?)?)
}

/// 1D sine-cosine table `[len, dim]`: first half sines, second half cosines.
fn sincos_1d(positions: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let half = dim / 2;
    positions
        .iter()
        .map(|&pos| {
            let mut row = vec![0.0; dim];
            for i in 0..half {
                let freq = (-(ROPE_BASE.ln()) * i as f64 / half as f64).exp();
                row[i] = (pos * freq).sin();
                row[half + i] = (pos * freq).cos();
            }
            row
        })
        .collect()
}

/// 2D sine-cosine positional table `[rows * cols, width]`: the first half
/// of the features encodes the row, the second half the column.
pub fn sincos_2d(rows: usize, cols: usize, width: usize) -> Result<Tensor> {
    if !width.is_multiple_of(4) {
        return Err(shape_err("positional embedding", format!("width {width} not divisible by 4")));
    }
    let r = sincos_1d(&(0..rows).map(|v| v as f64).collect::<Vec<_>>(), width / 2);
    let c = sincos_1d(&(0..cols).map(|v| v as f64).collect::<Vec<_>>(), width / 2);
    let mut data = Vec::with_capacity(rows * cols * width);
    for rr in &r {
        for cc in &c {
            data.extend_from_slice(rr);
            data.extend_from_slice(cc);
        }
    }
    Ok(Tensor::new(&[rows * cols, width], data)?)
}

/// Sinusoidal embedding `[B, width]` of timesteps in `[0, 1]`, scaled by 1000.
pub fn timestep_features(t: &[f64], width: usize) -> Result<Tensor> {
    let rows = sincos_1d(&t.iter().map(|v| v * 1000.0).collect::<Vec<_>>(), width);
    Ok(Tensor::new(&[t.len(), width], rows.concat())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos_rows_differ() {
        let t = sincos_2d(2, 3, 8).unwrap();
        assert_eq!(t.shape(), &[6, 8]);
        let rows: Vec<&[f64]> = t.data().chunks(8).collect();
        for i in 0..6 {
            for j in 0..i {
                assert_ne!(rows[i], rows[j]);
            }
        }
        assert!(sincos_2d(2, 2, 6).is_err());
    }
}
