//! Rectified-flow objective and sampler.
//!
//! `z_t = t z_1 + (1 - t) eps`; the model regresses the velocity
//! `z_1 - eps`. Sampling integrates from `eps` at `t = 0` to `t = 1`.

use mvd_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cond::{CondInputs, DropFlags};
use crate::error::{shape_err, Error, Result};

/// Per-source condition drop rate during training.
pub const COND_DROP_RATE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            cfg_scale: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config("sampler.cfg_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// One draw of the training pair: `z_t = t z_1 + (1 - t) eps`, with one
/// `t` per leading-axis sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z1: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
    pub z_t: Tensor,
}

impl FlowSample {
    /// Regression target `z_1 - eps`.
    pub fn target(&self) -> Tensor {
        self.z1.zip_map(&self.eps, |a, b| a - b).expect("same shape")
    }
}

/// Logit-normal timestep: `sigmoid(u)`, `u ~ N(0, 1)`.
pub fn sample_timestep<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = StandardNormal.sample(rng);
    1.0 / (1.0 + (-u).exp())
}

pub fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::new(shape, data)?)
}

/// `t z_1 + (1 - t) eps` for a scalar `t`.
pub fn interpolate(z1: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if z1.shape() != eps.shape() {
        return Err(shape_err("interpolate", format!("{:?} vs {:?}", z1.shape(), eps.shape())));
    }
    Ok(z1.zip_map(eps, |a, e| t * a + (1.0 - t) * e)?)
}

/// Draws `eps` and one `t` per sample along the leading axis of `z1`.
pub fn draw_flow_sample<R: Rng>(z1: &Tensor, rng: &mut R) -> Result<FlowSample> {
    let b = z1.shape()[0];
    let t: Vec<f64> = (0..b).map(|_| sample_timestep(rng)).collect();
    let eps = standard_normal(z1.shape(), rng)?;
    let per = z1.len() / b;
    let z_t = Tensor::from_fn(z1.shape(), |i| {
        let ti = t[i / per];
        ti * z1.data()[i] + (1.0 - ti) * eps.data()[i]
    })?;
    Ok(FlowSample {
        z1: z1.clone(),
        eps,
        t,
        z_t,
    })
}

/// Mean squared error between the prediction and `z_1 - eps`.
pub fn velocity_loss<'g>(v_pred: Var<'g>, sample: &FlowSample) -> Result<Var<'g>> {
    if v_pred.shape() != sample.z1.shape() {
        return Err(shape_err(
            "velocity",
            format!("{:?} vs {:?}", v_pred.shape(), sample.z1.shape()),
        ));
    }
    let target = v_pred.graph().constant(sample.target());
    Ok(v_pred.sub(target)?.square().mean_all())
}

/// Conditional flow-matching loss for one `(eps, t)` draw per sample.
pub fn cfm_loss<'g, R, F>(graph: &'g Graph, z1: &Tensor, rng: &mut R, model: F) -> Result<(Var<'g>, FlowSample)>
where
    R: Rng,
    F: FnOnce(&'g Graph, &FlowSample) -> Result<Var<'g>>,
{
    let sample = draw_flow_sample(z1, rng)?;
    let v = model(graph, &sample)?;
    Ok((velocity_loss(v, &sample)?, sample))
}

/// Independently per source, replaces it with its null form with
/// probability `p`.
pub fn drop_conditions<R: Rng>(inputs: &CondInputs, rng: &mut R, p: f64) -> CondInputs {
    let mut draw = || rng.random::<f64>() < p;
    let flags = DropFlags {
        text: draw(),
        camera: draw(),
        trajectory: draw(),
        boxes: draw(),
        map: draw(),
    };
    inputs.with_dropped(flags)
}

/// `v_u + s (v_c - v_u)`; `s = 1` and `s = 0` return the inputs exactly.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(shape_err("cfg", format!("{:?} vs {:?}", v_cond.shape(), v_uncond.shape())));
    }
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    Ok(v_uncond.zip_map(v_cond, |u, c| u + s * (c - u))?)
}

/// Euler integration of `dz/dt = v(z, t)` from seeded noise over
/// `cfg.steps` uniform steps. Returns the final state and the number of
/// steps taken.
pub fn euler_sample<F>(shape: &[usize], cfg: &SamplerConfig, eps: Option<Tensor>, mut velocity: F) -> Result<(Tensor, usize)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    use rand::SeedableRng;
    cfg.validate()?;
    let mut z = match eps {
        Some(e) => {
            if e.shape() != shape {
                return Err(shape_err("noise", format!("{:?} vs {shape:?}", e.shape())));
            }
            e
        }
        None => standard_normal(shape, &mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let dt = 1.0 / cfg.steps as f64;
    let mut taken = 0;
    for i in 0..cfg.steps {
        let v = velocity(&z, i as f64 * dt)?;
        if v.shape() != z.shape() {
            return Err(shape_err("velocity", format!("{:?} vs {:?}", v.shape(), z.shape())));
        }
        z = z.zip_map(&v, |a, b| a + dt * b)?;
        taken += 1;
    }
    Ok((z, taken))
}
