//! Named parameter tables and the small layers built on them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use mvd_tensor::{Gradients, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"PRM1";

/// Parameter tensors keyed by stable dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    /// Replaces an existing entry; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(crate::error::shape_err(
                "parameter",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()).expect("valid shape")))
                .collect(),
        }
    }

    /// `PRM1`, entry count, then per entry: name length, UTF-8 name, tensor dump.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_dump(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("not a parameter table".into()));
        }
        let count = read_u64(&mut r)?;
        let mut out = Self::new();
        for _ in 0..count {
            let len = read_u64(&mut r)? as usize;
            if len > 4096 {
                return Err(Error::Format(format!("parameter name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            out.insert(name, Tensor::read_dump(&mut r)?)?;
        }
        Ok(out)
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Seeded initializer for building a [`ParamStore`].
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape)?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Tensor::ones(shape)?)
    }

    /// `name.w: [din, dout]` with Xavier-uniform-scale normal entries and a
    /// zero `name.b`.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        let std = (2.0 / (din + dout) as f64).sqrt();
        self.normal(&format!("{name}.w"), &[din, dout], std)?;
        self.zeros(&format!("{name}.b"), &[dout])
    }

    pub fn linear_zero(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        self.zeros(&format!("{name}.w"), &[din, dout])?;
        self.zeros(&format!("{name}.b"), &[dout])
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.ones(&format!("{name}.g"), &[d])?;
        self.zeros(&format!("{name}.b"), &[d])
    }
}

/// Parameters of one store recorded as leaves of one graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Trainable leaves when `trainable`, constants otherwise.
    pub fn new(store: &ParamStore, graph: &'g Graph, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { graph, vars }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    /// Gradient table aligned with the store; leaves without a gradient
    /// get zeros.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamStore {
        let params = self
            .vars
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()).expect("valid shape"));
                (k.clone(), g)
            })
            .collect();
        ParamStore { params }
    }

    /// `x @ name.w + name.b` over the last axis of `x`.
    pub fn linear(&self, name: &str, x: Var<'g>) -> Result<Var<'g>> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        let shape = x.shape();
        let din = *shape.last().expect("rank >= 1");
        let dout = w.shape()[1];
        let rows = x.value().len() / din;
        let y = x.reshape(&[rows, din])?.matmul(w)?.add(b)?;
        let mut out = shape;
        *out.last_mut().expect("rank >= 1") = dout;
        Ok(y.reshape(&out)?)
    }

    pub fn layer_norm(&self, name: &str, x: Var<'g>) -> Result<Var<'g>> {
        let g = self.get(&format!("{name}.g"))?;
        let b = self.get(&format!("{name}.b"))?;
        Ok(x.layer_norm(Some(g), Some(b), LN_EPS)?)
    }

    /// Two-layer perceptron `name.0 -> gelu -> name.1`.
    pub fn mlp(&self, name: &str, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.linear(&format!("{name}.0"), x)?.gelu();
        self.linear(&format!("{name}.1"), h)
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Registers a [`Bound::mlp`].
pub fn init_mlp(init: &mut Init<'_>, name: &str, din: usize, hidden: usize, dout: usize) -> Result<()> {
    init.linear(&format!("{name}.0"), din, hidden)?;
    init.linear(&format!("{name}.1"), hidden, dout)
}
