//! The MVDiT denoiser: patch tokens `[B, T', C, S, W]` through blocks of
//! spatial, cross-view, temporal and context attention with adaptive
//! modulation, plus a control branch that injects map features.

use mvd_tensor::{Mask, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cond::{context_mask, init_encoders, BoxEncoderMode, CondContext, EncoderConfig};
use crate::error::{shape_err, Error, Result};
use crate::layers::{init_mha, mha, sincos_2d, timestep_features};
use crate::params::{init_mlp, Bound, Init, ParamStore};

/// Sub-layers per block, in execution order.
pub const SUBLAYERS: [&str; 5] = ["spatial", "view", "temporal", "cross", "ffn"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    /// Control blocks; block `k` feeds base block `k`.
    pub control_depth: usize,
    /// Token and context width (`d_tok`).
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub mlp_ratio: usize,
    /// Fourier frequencies per box corner coordinate.
    pub fourier_freqs: usize,
    /// Map cells per token cell, per axis.
    pub map_patch: [usize; 2],
    pub box_encoder_mode: BoxEncoderMode,
    /// Scale of the random shift/scale modulation weights.
    pub modulation_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            control_depth: 2,
            width: 128,
            heads: 4,
            patch: 1,
            latent_channels: 16,
            mlp_ratio: 4,
            fourier_freqs: 4,
            map_patch: [4, 4],
            box_encoder_mode: BoxEncoderMode::Downsample4x,
            modulation_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.patch == 0 {
            return bad("depth, width, heads and patch must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if !(self.width / self.heads).is_multiple_of(2) {
            return bad("head width must be even for rotary positions".into());
        }
        if !self.width.is_multiple_of(4) {
            return bad("width must be divisible by 4".into());
        }
        if self.control_depth > self.depth {
            return bad(format!(
                "control_depth {} exceeds depth {}",
                self.control_depth, self.depth
            ));
        }
        if self.map_patch.contains(&0) || self.latent_channels == 0 || self.mlp_ratio == 0 {
            return bad("map_patch, latent_channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            width: self.width,
            heads: self.heads,
            fourier_freqs: self.fourier_freqs,
            control_depth: self.control_depth,
            map_patch: self.map_patch,
            box_mode: self.box_encoder_mode,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }
}

/// Forward switches used by tests and ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    /// `[C, C]`, `true` where view `i` may attend to view `j`.
    pub view_mask: Option<Vec<bool>>,
    pub temporal_attention: bool,
    pub control: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            view_mask: None,
            temporal_attention: true,
            control: true,
        }
    }
}

fn init_block(init: &mut Init<'_>, name: &str, cfg: &ModelConfig) -> Result<()> {
    let w = cfg.width;
    for s in &SUBLAYERS[..4] {
        init_mha(init, &format!("{name}.{s}"), w, false)?;
    }
    init_mlp(init, &format!("{name}.ffn"), w, cfg.mlp_ratio * w, w)?;
    init.normal(&format!("{name}.mod_ss.w"), &[w, 2 * SUBLAYERS.len() * w], cfg.modulation_std)?;
    init.zeros(&format!("{name}.mod_ss.b"), &[2 * SUBLAYERS.len() * w])?;
    init.linear_zero(&format!("{name}.mod_gate"), w, SUBLAYERS.len() * w)
}

/// Fresh parameters: random attention/FFN/shift-scale weights, zero gates,
/// zero control projections.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let w = cfg.width;
    init.linear("patch", cfg.patch_dim(), w)?;
    init.linear("t_emb.0", w, w)?;
    init.linear("t_emb.1", w, w)?;
    for i in 0..cfg.depth {
        init_block(&mut init, &format!("block{i}"), cfg)?;
    }
    for k in 0..cfg.control_depth {
        init_block(&mut init, &format!("control{k}"), cfg)?;
        init.linear_zero(&format!("control{k}.out"), w, w)?;
    }
    init.normal("final.mod.w", &[w, 2 * w], cfg.modulation_std)?;
    init.zeros("final.mod.b", &[2 * w])?;
    init.linear("final.linear", w, cfg.patch_dim())?;
    init_encoders(&mut init, &cfg.encoder())?;
    Ok(store)
}

// ---------------------------------------------------------------- patches

fn patch_grid(shape: &[usize], p: usize) -> Result<(usize, usize)> {
    let (h, w) = (shape[shape.len() - 3], shape[shape.len() - 2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err(
            "patchify",
            format!("latent grid {h}x{w} is not divisible by patch {p}"),
        ));
    }
    Ok((h / p, w / p))
}

/// `[.., h, w, d]` to `[.., S, p*p*d]` with `S = (h/p)(w/p)` in row-major
/// patch order; each patch is flattened as `(dy, dx, d)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(shape_err("patchify", format!("rank {} below 3", s.len())));
    }
    let (hs, ws) = patch_grid(s, p)?;
    let d = s[s.len() - 1];
    let lead = &s[..s.len() - 3];
    let n: usize = lead.iter().product();
    let y = x
        .reshape(&[n, hs, p, ws, p, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?;
    let mut out = lead.to_vec();
    out.extend([hs * ws, p * p * d]);
    Ok(y.reshape(&out)?)
}

/// Inverse of [`patchify`] for grid `(h, w)`.
pub fn unpatchify(x: &Tensor, p: usize, grid: (usize, usize)) -> Result<Tensor> {
    let s = x.shape();
    let (hs, ws) = (grid.0 / p, grid.1 / p);
    if s.len() < 2 || !grid.0.is_multiple_of(p) || !grid.1.is_multiple_of(p) || s[s.len() - 2] != hs * ws || !s[s.len() - 1].is_multiple_of(p * p) {
        return Err(shape_err("unpatchify", format!("{s:?} does not match grid {grid:?}, patch {p}")));
    }
    let d = s[s.len() - 1] / (p * p);
    let lead = &s[..s.len() - 2];
    let n: usize = lead.iter().product();
    let y = x
        .reshape(&[n, hs, ws, p, p, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?;
    let mut out = lead.to_vec();
    out.extend([grid.0, grid.1, d]);
    Ok(y.reshape(&out)?)
}

fn patchify_var<'g>(x: Var<'g>, p: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let (hs, ws) = patch_grid(&s, p)?;
    let d = s[s.len() - 1];
    let lead = &s[..s.len() - 3];
    let n: usize = lead.iter().product();
    let mut out = lead.to_vec();
    out.extend([hs * ws, p * p * d]);
    Ok(x.reshape(&[n, hs, p, ws, p, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&out)?)
}

fn unpatchify_var<'g>(x: Var<'g>, p: usize, grid: (usize, usize)) -> Result<Var<'g>> {
    let s = x.shape();
    let (hs, ws) = (grid.0 / p, grid.1 / p);
    let d = s[s.len() - 1] / (p * p);
    let lead = &s[..s.len() - 2];
    let n: usize = lead.iter().product();
    let mut out = lead.to_vec();
    out.extend([grid.0, grid.1, d]);
    Ok(x.reshape(&[n, hs, ws, p, p, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&out)?)
}

// ---------------------------------------------------------------- blocks

/// Per-block modulation from the timestep embedding `c: [B, W]`:
/// `(shift, scale)` pairs then gates, each `[B, 1, 1, 1, W]`.
struct Modulation<'g> {
    shift_scale: Vec<(Var<'g>, Var<'g>)>,
    gates: Vec<Var<'g>>,
}

fn modulation<'g>(p: &Bound<'g>, name: &str, c: Var<'g>) -> Result<Modulation<'g>> {
    let s = c.shape();
    let (b, w) = (s[0], s[1]);
    let act = c.silu();
    let n = SUBLAYERS.len();
    let ss = p.linear(&format!("{name}.mod_ss"), act)?.reshape(&[b, 2 * n, w])?;
    let gt = p.linear(&format!("{name}.mod_gate"), act)?.reshape(&[b, n, w])?;
    let piece = |v: Var<'g>, i: usize| -> Result<Var<'g>> { Ok(v.narrow(1, i, i + 1)?.reshape(&[b, 1, 1, 1, w])?) };
    let mut shift_scale = Vec::with_capacity(n);
    let mut gates = Vec::with_capacity(n);
    for i in 0..n {
        shift_scale.push((piece(ss, 2 * i)?, piece(ss, 2 * i + 1)?));
        gates.push(piece(gt, i)?);
    }
    Ok(Modulation { shift_scale, gates })
}

fn modulate<'g>(x: Var<'g>, shift: Var<'g>, scale: Var<'g>) -> Result<Var<'g>> {
    let h = x.layer_norm(None, None, crate::params::LN_EPS)?;
    Ok(h.mul(scale.add_scalar(1.0))?.add(shift)?)
}

/// One MVDiT block over `x: [B, T', C, S, W]`.
pub fn mvdit_block_forward<'g>(
    p: &Bound<'g>,
    name: &str,
    cfg: &ModelConfig,
    x: Var<'g>,
    ctx: &CondContext<'g>,
    c: Var<'g>,
    opts: &ForwardOptions,
) -> Result<Var<'g>> {
    let s = x.shape();
    let (b, t, v, sn, w) = (s[0], s[1], s[2], s[3], s[4]);
    let cs = ctx.tokens.shape();
    if cs[4] != w {
        return Err(shape_err("context", format!("width {} vs token width {w}", cs[4])));
    }
    if cs[0] != b || cs[1] != t || cs[2] != v {
        return Err(shape_err("context", format!("context {cs:?} vs tokens {s:?}")));
    }
    let m = modulation(p, name, c)?;
    let heads = cfg.heads;
    let sub = |i: usize| format!("{name}.{}", SUBLAYERS[i]);
    let pre = |x: Var<'g>, i: usize| modulate(x, m.shift_scale[i].0, m.shift_scale[i].1);
    let gate = |x: Var<'g>, y: Var<'g>, i: usize| -> Result<Var<'g>> { Ok(x.add(y.mul(m.gates[i])?)?) };

    // Spatial: per frame and view.
    let h = pre(x, 0)?.reshape(&[b * t * v, sn, w])?;
    let y = mha(p, &sub(0), heads, h, h, None, false)?.reshape(&s)?;
    let x = gate(x, y, 0)?;

    // Cross-view: all views jointly at a fixed latent frame.
    let h = pre(x, 1)?.reshape(&[b * t, v * sn, w])?;
    let vm = match &opts.view_mask {
        Some(vm) => {
            if vm.len() != v * v {
                return Err(shape_err("view mask", format!("{} flags for {v} views", vm.len())));
            }
            let mut flags = Vec::with_capacity(v * sn * v * sn);
            for qi in 0..v * sn {
                for ki in 0..v * sn {
                    flags.push(vm[(qi / sn) * v + ki / sn]);
                }
            }
            Some(Mask::new(&[1, 1, v * sn, v * sn], flags)?)
        }
        None => None,
    };
    let y = mha(p, &sub(1), heads, h, h, vm.as_ref(), false)?.reshape(&s)?;
    let x = gate(x, y, 1)?;

    // Temporal: each (view, cell) track with rotary positions.
    let x = if opts.temporal_attention {
        let h = pre(x, 2)?
            .permute(&[0, 2, 3, 1, 4])?
            .reshape(&[b * v * sn, t, w])?;
        let y = mha(p, &sub(2), heads, h, h, None, true)?
            .reshape(&[b, v, sn, t, w])?
            .permute(&[0, 3, 1, 2, 4])?;
        gate(x, y, 2)?
    } else {
        x
    };

    // Context cross-attention per (frame, view).
    let h = pre(x, 3)?.reshape(&[b * t * v, sn, w])?;
    let kv = ctx.tokens.reshape(&[b * t * v, cs[3], w])?;
    let mask = context_mask(ctx)?;
    let y = mha(p, &sub(3), heads, h, kv, Some(&mask), false)?.reshape(&s)?;
    let x = gate(x, y, 3)?;

    let h = pre(x, 4)?;
    let y = p.mlp(&sub(4), h)?;
    gate(x, y, 4)
}

/// Control stack over `x0` plus map features; returns one zero-initialized
/// residual per control block, each shaped like `x0`.
pub fn control_branch_forward<'g>(
    p: &Bound<'g>,
    cfg: &ModelConfig,
    x0: Var<'g>,
    ctx: &CondContext<'g>,
    c: Var<'g>,
    opts: &ForwardOptions,
) -> Result<Vec<Var<'g>>> {
    let s = x0.shape();
    let feats = &ctx.map.features;
    if feats.len() != cfg.control_depth {
        return Err(shape_err(
            "map features",
            format!("{} feature sets for {} control blocks", feats.len(), cfg.control_depth),
        ));
    }
    let mut h = x0;
    let mut out = Vec::with_capacity(cfg.control_depth);
    for (k, f) in feats.iter().enumerate() {
        let fs = f.shape();
        if fs != [s[0], s[1], s[3], s[4]] {
            return Err(shape_err("map features", format!("{fs:?} vs tokens {s:?}")));
        }
        let f = f.reshape(&[s[0], s[1], 1, s[3], s[4]])?.broadcast_to(&s)?;
        h = mvdit_block_forward(p, &format!("control{k}"), cfg, h.add(f)?, ctx, c, opts)?;
        out.push(p.linear(&format!("control{k}.out"), h)?);
    }
    Ok(out)
}

/// Patch embedding plus positional table, `[B, T', C, S, W]`.
pub fn embed_tokens<'g>(p: &Bound<'g>, cfg: &ModelConfig, z: Var<'g>) -> Result<Var<'g>> {
    let s = z.shape();
    let (hs, ws) = patch_grid(&s, cfg.patch)?;
    let tokens = p.linear("patch", patchify_var(z, cfg.patch)?)?;
    let pos = p.graph().constant(sincos_2d(hs, ws, cfg.width)?);
    Ok(tokens.add(pos)?)
}

/// Timestep conditioning vector `[B, W]`.
pub fn timestep_embedding<'g>(p: &Bound<'g>, cfg: &ModelConfig, t: &[f64]) -> Result<Var<'g>> {
    let f = p.graph().constant(timestep_features(t, cfg.width)?);
    let h = p.linear("t_emb.0", f)?.silu();
    p.linear("t_emb.1", h)
}

/// Modulated final projection back to latent patches, unpatchified.
pub fn final_layer<'g>(p: &Bound<'g>, cfg: &ModelConfig, x: Var<'g>, c: Var<'g>, grid: (usize, usize)) -> Result<Var<'g>> {
    let s = x.shape();
    let (b, w) = (s[0], s[4]);
    let m = p.linear("final.mod", c.silu())?.reshape(&[b, 2, w])?;
    let shift = m.narrow(1, 0, 1)?.reshape(&[b, 1, 1, 1, w])?;
    let scale = m.narrow(1, 1, 2)?.reshape(&[b, 1, 1, 1, w])?;
    let h = modulate(x, shift, scale)?;
    unpatchify_var(p.linear("final.linear", h)?, cfg.patch, grid)
}

/// Token grid `(rows, cols)` for a latent grid.
pub fn token_grid(cfg: &ModelConfig, latent_grid: (usize, usize)) -> Result<(usize, usize)> {
    patch_grid(&[latent_grid.0, latent_grid.1, 1], cfg.patch)
}

/// Velocity prediction for `z_t: [B, T', C, h', w', d]` at per-sample
/// timesteps `t`. Refuses contexts whose time-varying sources are not
/// aligned with `T'`.
pub fn denoiser_forward<'g>(
    p: &Bound<'g>,
    cfg: &ModelConfig,
    z_t: Var<'g>,
    t: &[f64],
    ctx: &CondContext<'g>,
    opts: &ForwardOptions,
) -> Result<Var<'g>> {
    let s = z_t.shape();
    if s.len() != 6 || s[5] != cfg.latent_channels {
        return Err(shape_err(
            "latent",
            format!("expected [B, T', C, h, w, {}], got {s:?}", cfg.latent_channels),
        ));
    }
    let (b, tl, views) = (s[0], s[1], s[2]);
    if t.len() != b {
        return Err(shape_err("timesteps", format!("{} timesteps for batch {b}", t.len())));
    }
    let ct = ctx.tokens.shape()[1];
    if ct != tl || ctx.latent_frames != tl {
        return Err(Error::Alignment {
            source_name: "context tokens",
            got: ct,
            expected: tl,
        });
    }
    if ctx.map.latent_frames != tl {
        return Err(Error::Alignment {
            source_name: "map features",
            got: ctx.map.latent_frames,
            expected: tl,
        });
    }
    if ctx.views != views {
        return Err(shape_err("context", format!("{} views vs latent {views}", ctx.views)));
    }
    let grid = (s[3], s[4]);
    let x0 = embed_tokens(p, cfg, z_t)?;
    let c = timestep_embedding(p, cfg, t)?;
    let residuals = if opts.control && cfg.control_depth > 0 {
        control_branch_forward(p, cfg, x0, ctx, c, opts)?
    } else {
        Vec::new()
    };
    let mut x = x0;
    for i in 0..cfg.depth {
        if let Some(r) = residuals.get(i) {
            x = x.add(*r)?;
        }
        x = mvdit_block_forward(p, &format!("block{i}"), cfg, x, ctx, c, opts)?;
    }
    final_layer(p, cfg, x, c, grid)
}
