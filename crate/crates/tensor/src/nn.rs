//! Attention built from graph primitives.

use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::tensor::{broadcast_offsets, broadcast_shape};

/// Boolean mask; `true` means the key may be attended to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("mask with {} flags", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn all(shape: &[usize], value: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Expands to `shape` under trailing-axis broadcasting.
    pub fn expand(&self, shape: &[usize]) -> Result<Vec<bool>> {
        let out = broadcast_shape("mask", &self.shape, shape)?;
        if out != shape {
            return Err(TensorError::ShapeMismatch {
                op: "mask",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(broadcast_offsets(&self.shape, shape)
            .into_iter()
            .map(|o| self.data[o])
            .collect())
    }
}

/// Scaled dot-product attention.
///
/// `q: [.., Lq, D]`, `k: [.., Lk, D]`, `v: [.., Lk, Dv]`; leading axes must
/// match between `q`, `k` and `v`. `mask` broadcasts against the score shape
/// `[.., Lq, Lk]`. Query rows whose keys are all masked return zeros.
pub fn attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, mask: Option<&Mask>) -> Result<Var<'g>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let rank = qs.len();
    let compatible = rank >= 2
        && ks.len() == rank
        && vs.len() == rank
        && qs[..rank - 2] == ks[..rank - 2]
        && ks[..rank - 1] == vs[..rank - 1]
        && qs[rank - 1] == ks[rank - 1];
    if !compatible {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let scale = 1.0 / (qs[rank - 1] as f64).sqrt();
    let scores = q.matmul(k.transpose(rank - 2, rank - 1)?)?.scale(scale);
    let probs = match mask {
        Some(m) => {
            let keep = m.expand(&scores.shape())?;
            scores.masked_softmax(rank - 1, &keep)?
        }
        None => scores.softmax(rank - 1)?,
    };
    probs.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn single_key_returns_its_value() {
        let g = Graph::new();
        let q = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 - 1.0).unwrap());
        let k = g.constant(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
        let v = g.constant(Tensor::new(&[1, 3], vec![5.0, 6.0, 7.0]).unwrap());
        let out = attention(q, k, v, None).unwrap().value();
        for row in out.data().chunks(3) {
            assert_eq!(row, &[5.0, 6.0, 7.0]);
        }
    }

    #[test]
    fn mask_selecting_one_key() {
        let g = Graph::new();
        let q = g.constant(Tensor::from_fn(&[2, 2], |i| i as f64).unwrap());
        let k = g.constant(Tensor::from_fn(&[3, 2], |i| (i as f64).sin()).unwrap());
        let v = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64).unwrap());
        let mask = Mask::new(&[3], vec![false, true, false]).unwrap();
        let out = attention(q, k, v, Some(&mask)).unwrap().value();
        assert_eq!(out.data(), &[2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let g = Graph::new();
        let q = g.constant(Tensor::ones(&[2, 2]).unwrap());
        let k = g.constant(Tensor::ones(&[2, 2]).unwrap());
        let v = g.constant(Tensor::ones(&[2, 2]).unwrap());
        let mask = Mask::new(&[2, 2], vec![true, true, false, false]).unwrap();
        let out = attention(q, k, v, Some(&mask)).unwrap().value();
        assert_eq!(out.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_scores_average_values() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 4]).unwrap());
        let k = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64).unwrap());
        let v = g.constant(Tensor::new(&[3, 1], vec![1.0, 2.0, 6.0]).unwrap());
        let out = attention(q, k, v, None).unwrap().value();
        assert!((out.data()[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_incompatible_shapes() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 4]).unwrap());
        let k = g.constant(Tensor::zeros(&[3, 2]).unwrap());
        let v = g.constant(Tensor::zeros(&[3, 2]).unwrap());
        assert!(attention(q, k, v, None).is_err());
    }
}
