//! Dense row-major `f64` tensors.
//!
//! Broadcasting follows trailing-axis alignment: shapes are compared from the
//! last axis backwards, and each aligned pair must be equal or have a `1` on
//! one side. Missing leading axes count as `1`. Anything else is a
//! [`TensorError::ShapeMismatch`].

use std::io::{Read, Write};

use crate::error::{Result, TensorError};

/// Magic bytes at the start of every tensor dump.
pub const DUMP_MAGIC: &[u8; 4] = b"TNS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose shape has already been validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Contiguous sub-tensor `start..end` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: self.rank(),
            });
        }
        if start >= end || end > self.shape[axis] {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("narrow range {start}..{end} invalid on axis {axis}"),
            });
        }
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Ok(Self { shape, data })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let shape = permuted_shape(&self.shape, axes)?;
        Ok(Self {
            data: permute_data(&self.data, &self.shape, axes),
            shape,
        })
    }

    /// Writes the tensor in the `TNS1` dump format: magic, rank as `u32`,
    /// axis lengths as `u64`, then the values as little-endian `f64`.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &axis in &self.shape {
            w.write_all(&(axis as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(TensorError::Format(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > 16 {
            return Err(TensorError::Format(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut long = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut long)?;
            shape.push(u64::from_le_bytes(long) as usize);
        }
        check_shape(&shape).map_err(|e| TensorError::Format(e.to_string()))?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.rank() + 8 * self.len());
        self.write_dump(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: vec![],
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "axis lengths must be at least 1".into(),
        });
    }
    Ok(())
}

/// `(outer, axis_len, inner)` element counts around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permuted_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(TensorError::ShapeMismatch {
            op: "permute",
            lhs: shape.to_vec(),
            rhs: axes.to_vec(),
        });
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                lhs: shape.to_vec(),
                rhs: axes.to_vec(),
            });
        }
        seen[a] = true;
    }
    Ok(axes.iter().map(|&a| shape[a]).collect())
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    // Innermost output axis is walked as a strided run.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    while out.len() < n {
        let mut p = offset;
        for _ in 0..run {
            out.push(data[p]);
            p += run_stride;
        }
        // advance the multi-index over axes 0..last
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Output shape of broadcasting `a` against `b` under trailing-axis alignment.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Flat source offsets for every element of `out_shape` when reading from a
/// tensor of shape `src` broadcast into it.
pub(crate) fn broadcast_offsets(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - src.len();
    let src_strides = strides(src);
    // (extent, source stride) per axis, with adjacent axes merged whenever
    // the outer stride continues the inner one.
    let mut axes: Vec<(usize, usize)> = Vec::with_capacity(rank);
    for i in 0..rank {
        let eff = if i < pad || src[i - pad] == 1 {
            0
        } else {
            src_strides[i - pad]
        };
        let ext = out_shape[i];
        match axes.last_mut() {
            Some(last) if last.1 == eff * ext => *last = (last.0 * ext, eff),
            _ => axes.push((ext, eff)),
        }
    }
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let (inner_len, inner_stride) = axes.pop().unwrap_or((1, 0));
    let outer_rank = axes.len();
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    for _ in 0..n / inner_len {
        if inner_stride == 0 {
            offsets.extend(std::iter::repeat_n(off, inner_len));
        } else {
            offsets.extend((0..inner_len).map(|j| off + j * inner_stride));
        }
        let mut ax = outer_rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += axes[ax].1;
            if idx[ax] < axes[ax].0 {
                break;
            }
            off -= axes[ax].1 * axes[ax].0;
            idx[ax] = 0;
        }
    }
    offsets
}

/// Sums `grad` (shaped like a broadcast result) back down to `target`.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let offsets = broadcast_offsets(target, &grad.shape);
    let mut data = vec![0.0; target.iter().product()];
    for (g, &o) in grad.data.iter().zip(&offsets) {
        data[o] += g;
    }
    Tensor::from_parts(target.to_vec(), data)
}
