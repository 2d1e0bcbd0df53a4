//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application as a node, in creation
//! order, so the node list is always a valid topological order. [`Var`] is a
//! cheap copyable handle into the graph. Values are immutable once recorded.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{
    broadcast_offsets, broadcast_shape, check_shape, permute_data, permuted_shape,
    reduce_to_shape, split_axis, Tensor,
};

/// `sqrt(2 / pi)`, the constant of the tanh GELU approximation.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SumAxis(usize),
    BroadcastTo(usize),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: Option<usize>,
        bias: Option<usize>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Rope {
        x: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    SelectRows(usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from `output` seeded with `seed`. Gradients accumulate
    /// over fan-out; leaves that do not require a gradient get none.
    pub fn backward(&self, output: Var<'_>, seed: &Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if seed.shape() != out_shape {
            return Err(TensorError::SeedMismatch {
                seed: seed.shape().to_vec(),
                output: out_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[output.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.id] = Some(seed.clone());
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (operand, grad) in local_grads(&nodes, id, &g) {
                if !nodes[operand].requires_grad {
                    continue;
                }
                match &mut grads[operand] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn bin_values(nodes: &[Node], a: usize, b: usize) -> (&Tensor, &Tensor) {
    (&nodes[a].value, &nodes[b].value)
}

/// Expands `src` to `shape` by trailing-axis broadcasting.
fn expand(src: &Tensor, shape: &[usize]) -> Tensor {
    if src.shape() == shape {
        return src.clone();
    }
    let offs = broadcast_offsets(src.shape(), shape);
    let d = src.data();
    Tensor::from_parts(shape.to_vec(), offs.iter().map(|&o| d[o]).collect())
}

fn local_grads(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => {
            let (va, vb) = bin_values(nodes, *a, *b);
            vec![
                (*a, reduce_to_shape(g, va.shape())),
                (*b, reduce_to_shape(g, vb.shape())),
            ]
        }
        Op::Sub(a, b) => {
            let (va, vb) = bin_values(nodes, *a, *b);
            let neg = g.map(|x| -x);
            vec![
                (*a, reduce_to_shape(g, va.shape())),
                (*b, reduce_to_shape(&neg, vb.shape())),
            ]
        }
        Op::Mul(a, b) => {
            let (va, vb) = bin_values(nodes, *a, *b);
            let ea = expand(va, g.shape());
            let eb = expand(vb, g.shape());
            let ga = g.zip_map(&eb, |x, y| x * y).expect("same shape");
            let gb = g.zip_map(&ea, |x, y| x * y).expect("same shape");
            vec![
                (*a, reduce_to_shape(&ga, va.shape())),
                (*b, reduce_to_shape(&gb, vb.shape())),
            ]
        }
        Op::Div(a, b) => {
            let (va, vb) = bin_values(nodes, *a, *b);
            let eb = expand(vb, g.shape());
            let ga = g.zip_map(&eb, |x, y| x / y).expect("same shape");
            // d(a/b)/db = -out / b
            let t = out.zip_map(&eb, |o, y| -o / y).expect("same shape");
            let gb = g.zip_map(&t, |x, y| x * y).expect("same shape");
            vec![
                (*a, reduce_to_shape(&ga, va.shape())),
                (*b, reduce_to_shape(&gb, vb.shape())),
            ]
        }
        Op::Scale(a, k) => vec![(*a, g.map(|x| x * k))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let (va, vb) = bin_values(nodes, *a, *b);
            let (ga, gb) = matmul_backward(va, vb, g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Reshape(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            vec![(*a, Tensor::from_parts(shape, g.data().to_vec()))]
        }
        Op::Permute(a, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            let shape = nodes[*a].value.shape().to_vec();
            vec![(*a, Tensor::from_parts(shape, permute_data(g.data(), g.shape(), &inv)))]
        }
        Op::SumAxis(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            vec![(*a, expand(g, &shape))]
        }
        Op::BroadcastTo(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            vec![(*a, reduce_to_shape(g, &shape))]
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = nodes[p].value.shape()[*axis];
                    let piece = g.narrow(*axis, start, start + len).expect("concat slice");
                    start += len;
                    (p, piece)
                })
                .collect()
        }
        Op::Narrow(a, axis, start) => {
            let src_shape = nodes[*a].value.shape();
            let (outer, len, inner) = split_axis(src_shape, *axis);
            let width = g.shape()[*axis];
            let mut data = vec![0.0; src_shape.iter().product()];
            let gd = g.data();
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                let src = o * width * inner;
                data[dst..dst + width * inner].copy_from_slice(&gd[src..src + width * inner]);
            }
            vec![(*a, Tensor::from_parts(src_shape.to_vec(), data))]
        }
        Op::Exp(a) => vec![(*a, g.zip_map(out, |x, y| x * y).expect("same shape"))],
        Op::Ln(a) => {
            let x = &nodes[*a].value;
            vec![(*a, g.zip_map(x, |gv, xv| gv / xv).expect("same shape"))]
        }
        Op::Sqrt(a) => vec![(*a, g.zip_map(out, |gv, y| gv * 0.5 / y).expect("same shape"))],
        Op::Sigmoid(a) => vec![(
            *a,
            g.zip_map(out, |gv, y| gv * y * (1.0 - y)).expect("same shape"),
        )],
        Op::Tanh(a) => vec![(
            *a,
            g.zip_map(out, |gv, y| gv * (1.0 - y * y)).expect("same shape"),
        )],
        Op::Gelu(a) => {
            let x = &nodes[*a].value;
            vec![(*a, g.zip_map(x, |gv, xv| gv * gelu_grad(xv)).expect("same shape"))]
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let gd = g.data();
            let mut data = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for j in 0..len {
                        let p = base + j * inner;
                        dot += gd[p] * y[p];
                    }
                    for j in 0..len {
                        let p = base + j * inner;
                        data[p] = y[p] * (gd[p] - dot);
                    }
                }
            }
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), data))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let shape = nodes[*x].value.shape().to_vec();
            let d = *shape.last().expect("rank >= 1");
            let rows = xhat.len() / d;
            let gd = g.data();
            let gain_v = gain.map(|p| nodes[p].value.data().to_vec());
            let mut dx = vec![0.0; xhat.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let row = r * d..(r + 1) * d;
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for (j, p) in row.clone().enumerate() {
                    let dxhat = gd[p] * gain_v.as_ref().map_or(1.0, |gv| gv[j]);
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[p];
                    dgain[j] += gd[p] * xhat[p];
                    dbias[j] += gd[p];
                }
                let inv = inv_std[r];
                for (j, p) in row.enumerate() {
                    let dxhat = gd[p] * gain_v.as_ref().map_or(1.0, |gv| gv[j]);
                    dx[p] = inv / d as f64
                        * (d as f64 * dxhat - sum_dxhat - xhat[p] * sum_dxhat_xhat);
                }
            }
            let mut res = vec![(*x, Tensor::from_parts(shape, dx))];
            if let Some(p) = gain {
                res.push((*p, Tensor::from_parts(vec![d], dgain)));
            }
            if let Some(p) = bias {
                res.push((*p, Tensor::from_parts(vec![d], dbias)));
            }
            res
        }
        Op::Rope { x, cos, sin } => {
            let data = rope_rotate(g.data(), g.shape(), cos, sin, -1.0);
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::SelectRows(a, ids) => {
            let shape = nodes[*a].value.shape().to_vec();
            let row: usize = shape[1..].iter().product();
            let mut data = vec![0.0; shape.iter().product()];
            for (k, &r) in ids.iter().enumerate() {
                for j in 0..row {
                    data[r * row + j] += g.data()[k * row + j];
                }
            }
            vec![(*a, Tensor::from_parts(shape, data))]
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rotates consecutive feature pairs of a `[.., L, D]` buffer by the angles
/// encoded in `cos`/`sin` (each `L * D/2`). `sign = -1` applies the inverse.
fn rope_rotate(x: &[f64], shape: &[usize], cos: &[f64], sin: &[f64], sign: f64) -> Vec<f64> {
    let d = shape[shape.len() - 1];
    let l = shape[shape.len() - 2];
    let half = d / 2;
    let mut out = vec![0.0; x.len()];
    for (row, chunk) in x.chunks_exact(d).enumerate() {
        let pos = row % l;
        let o = &mut out[row * d..(row + 1) * d];
        for i in 0..half {
            let c = cos[pos * half + i];
            let s = sign * sin[pos * half + i];
            let (a, b) = (chunk[2 * i], chunk[2 * i + 1]);
            o[2 * i] = a * c - b * s;
            o[2 * i + 1] = a * s + b * c;
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let mut j = 0;
        while j + 4 <= n {
            let (b0, b1, b2, b3) = (
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            );
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for p in 0..k {
                let av = arow[p];
                s0 += av * b0[p];
                s1 += av * b1[p];
                s2 += av * b2[p];
                s3 += av * b3[p];
            }
            c[i * n + j] += s0;
            c[i * n + j + 1] += s1;
            c[i * n + j + 2] += s2;
            c[i * n + j + 3] += s3;
            j += 4;
        }
        for j in j..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let ar = &a[p * m + i..p * m + i + 4];
            let (a0, a1, a2, a3) = (ar[0], ar[1], ar[2], ar[3]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

struct MatMulPlan {
    out_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let ba = if a.len() > 2 { &a[..a.len() - 2] } else { &[1][..] };
    let bb = if b.len() > 2 { &b[..b.len() - 2] } else { &[1][..] };
    let batch = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
    let a_off = broadcast_offsets(ba, &batch);
    let b_off = broadcast_offsets(bb, &batch);
    let mut out_shape = if a.len() > 2 || b.len() > 2 {
        batch
    } else {
        vec![]
    };
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        out_shape,
        m,
        k,
        n,
        a_off,
        b_off,
    })
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![0.0; p.a_off.len() * m * n];
    for (bi, (&ao, &bo)) in p.a_off.iter().zip(&p.b_off).enumerate() {
        gemm_nn(
            &a.data()[ao * m * k..(ao + 1) * m * k],
            &b.data()[bo * k * n..(bo + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok(Tensor::from_parts(p.out_shape, out))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let p = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for (bi, (&ao, &bo)) in p.a_off.iter().zip(&p.b_off).enumerate() {
        let gslice = &g.data()[bi * m * n..(bi + 1) * m * n];
        gemm_nt(
            gslice,
            &b.data()[bo * k * n..(bo + 1) * k * n],
            &mut ga[ao * m * k..(ao + 1) * m * k],
            m,
            n,
            k,
        );
        gemm_tn(
            &a.data()[ao * m * k..(ao + 1) * m * k],
            gslice,
            &mut gb[bo * k * n..(bo + 1) * k * n],
            k,
            m,
            n,
        );
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let oa = broadcast_offsets(a.shape(), &shape);
    let ob = broadcast_offsets(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Ok(Tensor::from_parts(shape, data))
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(&[self.id])
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let v = self.value().map(f);
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(v, op, rg)
    }

    fn bin(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        let v = binary(name, &self.value(), &other.value(), f)?;
        let rg = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(v, op, rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.bin(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.unary(|x| x * k, Op::Scale(self.id, k))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    /// Batched matrix product over the last two axes. Leading (batch) axes
    /// broadcast with trailing alignment; a rank-2 operand is shared across
    /// the batch.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let v = matmul_forward(&self.value(), &other.value())?;
        let rg = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(v, Op::MatMul(self.id, other.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(v, Op::Reshape(self.id), rg))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let src = self.value();
        permuted_shape(src.shape(), axes)?;
        let v = src.permute(axes)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(v, Op::Permute(self.id, axes.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: a.max(b),
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let src = self.value();
        if axis >= src.rank() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: src.rank(),
            });
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let d = src.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = 1;
        let rg = self.requires_grad();
        Ok(self
            .graph
            .push(Tensor::from_parts(shape, out), Op::SumAxis(self.id), rg))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let len = *self.shape().get(axis).ok_or(TensorError::InvalidAxis {
            op: "mean_axis",
            axis,
            rank: self.shape().len(),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum_all(self) -> Var<'g> {
        let n = self.value().len();
        self.reshape(&[n])
            .and_then(|v| v.sum_axis(0))
            .expect("flattening is always valid")
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().len();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        check_shape(shape)?;
        let src = self.value();
        let target = broadcast_shape("broadcast_to", src.shape(), shape)?;
        if target != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = expand(&src, shape);
        let rg = self.requires_grad();
        Ok(self.graph.push(v, Op::BroadcastTo(self.id), rg))
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let v = self.value().narrow(axis, start, end)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(v, Op::Narrow(self.id, axis, start), rg))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    /// Tanh-approximated GELU, see [`GELU_SQRT_2_OVER_PI`] and [`GELU_CUBIC`].
    pub fn gelu(self) -> Var<'g> {
        self.unary(gelu_fwd, Op::Gelu(self.id))
    }

    pub fn silu(self) -> Var<'g> {
        self.mul(self.sigmoid()).expect("same shape")
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self).expect("same shape")
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        self.softmax_inner(axis, None)
    }

    /// Softmax along `axis` where entries with `keep[i] == false` get
    /// probability zero. `keep` has one flag per element. A slice that is
    /// entirely masked yields zeros.
    pub fn masked_softmax(self, axis: usize, keep: &[bool]) -> Result<Var<'g>> {
        let n = self.value().len();
        if keep.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape(),
                rhs: vec![keep.len()],
            });
        }
        self.softmax_inner(axis, Some(keep))
    }

    fn softmax_inner(self, axis: usize, keep: Option<&[bool]>) -> Result<Var<'g>> {
        let src = self.value();
        if axis >= src.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: src.rank(),
            });
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let x = src.data();
        let kept = |p: usize| keep.is_none_or(|k| k[p]);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    let p = base + j * inner;
                    if kept(p) {
                        max = max.max(x[p]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..len {
                    let p = base + j * inner;
                    if kept(p) {
                        let e = (x[p] - max).exp();
                        y[p] = e;
                        total += e;
                    }
                }
                for j in 0..len {
                    y[base + j * inner] /= total;
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.graph.push(
            Tensor::from_parts(src.shape().to_vec(), y),
            Op::Softmax(self.id, axis),
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies the optional affine
    /// `gain`/`bias` (each shaped `[D]`).
    pub fn layer_norm(
        self,
        gain: Option<Var<'g>>,
        bias: Option<Var<'g>>,
        eps: f64,
    ) -> Result<Var<'g>> {
        let src = self.value();
        let d = *src.shape().last().expect("rank >= 1");
        for p in gain.iter().chain(bias.iter()) {
            if p.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: src.shape().to_vec(),
                    rhs: p.shape(),
                });
            }
        }
        let gain_v = gain.map(|g| g.value());
        let bias_v = bias.map(|b| b.value());
        let x = src.data();
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                let gj = gain_v.as_ref().map_or(1.0, |g| g.data()[j]);
                let bj = bias_v.as_ref().map_or(0.0, |b| b.data()[j]);
                y[r * d + j] = h * gj + bj;
            }
        }
        let mut ids = vec![self.id];
        ids.extend(gain.map(|g| g.id));
        ids.extend(bias.map(|b| b.id));
        let rg = self.graph.requires(&ids);
        Ok(self.graph.push(
            Tensor::from_parts(src.shape().to_vec(), y),
            Op::LayerNorm {
                x: self.id,
                gain: gain.map(|g| g.id),
                bias: bias.map(|b| b.id),
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rotary position embedding over a `[.., L, D]` tensor: feature pair
    /// `(2i, 2i+1)` at sequence index `l` is rotated by
    /// `positions[l] * base^(-2i/D)`.
    pub fn rope(self, positions: &[usize], base: f64) -> Result<Var<'g>> {
        let src = self.value();
        let shape = src.shape();
        if shape.len() < 2 {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: "rope needs a sequence and a feature axis".into(),
            });
        }
        let d = shape[shape.len() - 1];
        let l = shape[shape.len() - 2];
        if !d.is_multiple_of(2) {
            return Err(TensorError::OddFeatureDim(d));
        }
        if positions.len() != l {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                lhs: shape.to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(l * half);
        let mut sin = Vec::with_capacity(l * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / d as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let data = rope_rotate(src.data(), shape, &cos, &sin, 1.0);
        let rg = self.requires_grad();
        Ok(self.graph.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Rope {
                x: self.id,
                cos,
                sin,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V, ..]` table.
    pub fn select_rows(self, ids: &[usize]) -> Result<Var<'g>> {
        let src = self.value();
        let v = src.shape()[0];
        if ids.is_empty() || ids.iter().any(|&i| i >= v) {
            return Err(TensorError::InvalidShape {
                shape: src.shape().to_vec(),
                reason: format!("row ids {ids:?} out of range"),
            });
        }
        let row: usize = src.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            data.extend_from_slice(&src.data()[i * row..(i + 1) * row]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = ids.len();
        let rg = self.requires_grad();
        Ok(self.graph.push(
            Tensor::from_parts(shape, data),
            Op::SelectRows(self.id, ids.to_vec()),
            rg,
        ))
    }
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
        shape: vec![],
        reason: "concat of zero tensors".into(),
    })?;
    let graph = first.graph;
    if parts.len() == 1 {
        return Ok(*first);
    }
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(TensorError::InvalidAxis {
            op: "concat",
            axis,
            rank: base.len(),
        });
    }
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let w = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = graph.requires(&ids);
    Ok(graph.push(Tensor::from_parts(shape, data), Op::Concat(ids, axis), rg))
}
