//! Model bundle, training step, evaluation, sampling and checkpoints.

use std::io::{Read, Write};

use mvd_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecSpec, LatentTensor};
use crate::cond::{build_context, CondInputs, DropFlags, TextTable};
use crate::error::{shape_err, Error, Result};
use crate::flow::{cfg_combine, cfm_loss, draw_flow_sample, drop_conditions, euler_sample, velocity_loss, SamplerConfig};
use crate::mvdit::{denoiser_forward, init_params, token_grid, ForwardOptions, ModelConfig};
use crate::optim::{Adam, OptimConfig};
use crate::params::{read_u64, Bound, ParamStore};
use crate::scene::{rasterize_clip, Scene};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fresh RNG for a `(seed, step)` pair; resumed runs replay the same draws.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Parameters plus everything needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub codec: CodecSpec,
    pub params: ParamStore,
    /// Per-channel latent statistics; latents are standardized before the
    /// denoiser sees them.
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    text: TextTable,
}

impl Model {
    pub fn new(config: ModelConfig, codec: CodecSpec, seed: u64) -> Result<Self> {
        codec.validate()?;
        if config.latent_channels != codec.latent_channels {
            return Err(Error::Config(format!(
                "model latent_channels {} differs from codec {}",
                config.latent_channels, codec.latent_channels
            )));
        }
        let params = init_params(&config, seed)?;
        let d = codec.latent_channels;
        Ok(Self {
            text: TextTable::new(config.width)?,
            config,
            codec,
            params,
            latent_mean: vec![0.0; d],
            latent_std: vec![1.0; d],
        })
    }

    pub fn text_table(&self) -> &TextTable {
        &self.text
    }

    /// Sets the per-channel statistics from raw latents `[.., d]`.
    pub fn fit_normalization(&mut self, latents: &[&Tensor]) {
        let d = self.codec.latent_channels;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for z in latents {
            for row in z.data().chunks(d) {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        for k in 0..d {
            let mean = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(0.0);
            self.latent_mean[k] = mean;
            self.latent_std[k] = var.sqrt().max(1e-3);
        }
    }

    pub fn normalize(&self, z: &Tensor) -> Tensor {
        let d = self.codec.latent_channels;
        Tensor::from_fn(z.shape(), |i| (z.data()[i] - self.latent_mean[i % d]) / self.latent_std[i % d]).expect("same shape")
    }

    pub fn denormalize(&self, z: &Tensor) -> Tensor {
        let d = self.codec.latent_channels;
        Tensor::from_fn(z.shape(), |i| z.data()[i] * self.latent_std[i % d] + self.latent_mean[i % d]).expect("same shape")
    }

    /// Velocity for `z_t: [B, T', C, h', w', d]` (standardized) with one
    /// condition set per sample.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        z_t: Var<'g>,
        t: &[f64],
        conds: &[&CondInputs],
        opts: &ForwardOptions,
    ) -> Result<Var<'g>> {
        let s = z_t.shape();
        if s.len() != 6 {
            return Err(shape_err("latent", format!("expected rank 6, got {s:?}")));
        }
        let grid = token_grid(&self.config, (s[3], s[4]))?;
        let ctx = build_context(p, &self.config.encoder(), &self.text, conds, grid)?;
        denoiser_forward(p, &self.config, z_t, t, &ctx, opts)
    }

    /// Inference-only velocity.
    pub fn velocity(&self, z_t: &Tensor, t: &[f64], conds: &[&CondInputs]) -> Result<Tensor> {
        let g = Graph::new();
        let p = Bound::new(&self.params, &g, false);
        let v = self.forward(&p, g.constant(z_t.clone()), t, conds, &ForwardOptions::default())?;
        Ok((*v.value()).clone())
    }

    /// Guided velocity: one conditional pass, plus one pass with every
    /// source null unless `scale == 1`.
    pub fn guided_velocity(&self, z_t: &Tensor, t: f64, cond: &CondInputs, scale: f64) -> Result<Tensor> {
        let tt = vec![t; z_t.shape()[0]];
        let vc = self.velocity(z_t, &tt, &[cond])?;
        if scale == 1.0 {
            return Ok(vc);
        }
        let null = cond.with_dropped(DropFlags::ALL);
        let vu = self.velocity(z_t, &tt, &[&null])?;
        cfg_combine(&vc, &vu, scale)
    }

    /// Samples a latent for `cond` on a latent grid of `(h', w')`.
    pub fn sample(&self, cond: &CondInputs, latent_grid: (usize, usize), cfg: &SamplerConfig) -> Result<(LatentTensor, usize)> {
        let tl = crate::codec::latent_frame_count(cond.frames)?;
        let shape = [1, tl, cond.views, latent_grid.0, latent_grid.1, self.codec.latent_channels];
        let (z, steps) = euler_sample(&shape, cfg, None, |z, t| self.guided_velocity(z, t, cond, cfg.cfg_scale))?;
        let z = self.denormalize(&z).reshape(&shape[1..])?;
        Ok((LatentTensor::from_values(self.codec, z)?, steps))
    }
}

/// One training clip: its raw latent `[T', C, h', w', d]` and conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub latent: Tensor,
    pub cond: CondInputs,
}

impl TrainSample {
    pub fn from_scene(scene: &Scene, codec: &Codec) -> Result<Self> {
        let clip = rasterize_clip(scene)?;
        Ok(Self {
            latent: codec.encode(&clip)?.into_values(),
            cond: CondInputs::from_scene(scene)?,
        })
    }
}

fn stack(tensors: &[Tensor]) -> Result<Tensor> {
    let first = tensors.first().ok_or_else(|| shape_err("batch", "empty batch"))?;
    let mut data = Vec::with_capacity(first.len() * tensors.len());
    for t in tensors {
        if t.shape() != first.shape() {
            return Err(shape_err("batch", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(&shape, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
}

/// Model plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub optim: Adam,
    pub seed: u64,
    pub cond_drop: f64,
}

impl Trainer {
    pub fn new(model: Model, optim: OptimConfig, seed: u64, cond_drop: f64) -> Result<Self> {
        optim.validate()?;
        Ok(Self {
            optim: Adam::new(optim, &model.params),
            model,
            seed,
            cond_drop,
        })
    }

    pub fn step(&self) -> usize {
        self.optim.step
    }

    /// Loss and gradients for a batch at the current step, without updating.
    pub fn loss_and_grads(&self, batch: &[&TrainSample]) -> Result<(f64, ParamStore)> {
        let mut rng = step_rng(self.seed, self.optim.step);
        let conds: Vec<CondInputs> = batch
            .iter()
            .map(|s| drop_conditions(&s.cond, &mut rng, self.cond_drop))
            .collect();
        let refs: Vec<&CondInputs> = conds.iter().collect();
        let z1 = stack(&batch.iter().map(|s| self.model.normalize(&s.latent)).collect::<Vec<_>>())?;
        let g = Graph::new();
        let p = Bound::new(&self.model.params, &g, true);
        let (loss, _) = cfm_loss(&g, &z1, &mut rng, |g, s| {
            self.model.forward(&p, g.constant(s.z_t.clone()), &s.t, &refs, &ForwardOptions::default())
        })?;
        let mut grads = g.backward(loss, &Tensor::scalar(1.0))?;
        let value = loss.value().data()[0];
        Ok((value, p.gradients(&mut grads)))
    }

    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<StepStats> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        if !loss.is_finite() {
            return Err(Error::Format(format!("non-finite loss at step {}", self.optim.step)));
        }
        let lr = self.optim.update(&mut self.model.params, &grads)?;
        Ok(StepStats { loss, lr })
    }
}

/// Mean loss over `samples` with a fixed `(eps, t)` draw per sample and no
/// condition dropout; comparable across checkpoints.
pub fn eval_loss(model: &Model, samples: &[&TrainSample], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let mut rng = step_rng(seed ^ 0x5eed_e7a1, i);
        let z1 = stack(&[model.normalize(&s.latent)])?;
        let fs = draw_flow_sample(&z1, &mut rng)?;
        let g = Graph::new();
        let p = Bound::new(&model.params, &g, false);
        let v = model.forward(&p, g.constant(fs.z_t.clone()), &fs.t, &[&s.cond], &ForwardOptions::default())?;
        total += velocity_loss(v, &fs)?.value().data()[0];
    }
    Ok(total / samples.len().max(1) as f64)
}

// ---------------------------------------------------------------- checkpoints

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    codec: CodecSpec,
    optim: OptimConfig,
    seed: u64,
    cond_drop: f64,
    step: usize,
}

/// `CKP1`, a JSON header, then four named tables: parameters, buffers
/// (`latent.mean`, `latent.std`), and the Adam moments.
pub fn write_checkpoint<W: Write>(tr: &Trainer, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let header = serde_json::to_vec(&CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: tr.model.config.clone(),
        codec: tr.model.codec,
        optim: tr.optim.cfg.clone(),
        seed: tr.seed,
        cond_drop: tr.cond_drop,
        step: tr.optim.step,
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    tr.model.params.write_to(&mut w)?;
    let d = tr.model.codec.latent_channels;
    let mut buffers = ParamStore::new();
    buffers.insert("latent.mean", Tensor::new(&[d], tr.model.latent_mean.clone())?)?;
    buffers.insert("latent.std", Tensor::new(&[d], tr.model.latent_std.clone())?)?;
    buffers.write_to(&mut w)?;
    tr.optim.m.write_to(&mut w)?;
    tr.optim.v.write_to(&mut w)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Trainer> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let len = read_u64(&mut r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format("checkpoint header too large".into()));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let h: CheckpointHeader = serde_json::from_slice(&header)?;
    if h.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            h.version
        )));
    }
    let mut model = Model::new(h.model, h.codec, 0)?;
    let params = ParamStore::read_from(&mut r)?;
    if params.len() != model.params.len() || params.names().ne(model.params.names()) {
        return Err(Error::Format("checkpoint parameters do not match the model config".into()));
    }
    for (name, t) in params.iter() {
        model.params.set(name, t.clone())?;
    }
    let buffers = ParamStore::read_from(&mut r)?;
    model.latent_mean = buffers.get("latent.mean")?.data().to_vec();
    model.latent_std = buffers.get("latent.std")?.data().to_vec();
    let m = ParamStore::read_from(&mut r)?;
    let v = ParamStore::read_from(&mut r)?;
    let mut tr = Trainer::new(model, h.optim, h.seed, h.cond_drop)?;
    tr.optim.m = m;
    tr.optim.v = v;
    tr.optim.step = h.step;
    Ok(tr)
}
