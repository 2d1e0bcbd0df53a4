//! Fixed orthonormal spatio-temporal codec.
//!
//! Frames are grouped into temporal windows (see [`temporal_windows`]); each
//! window of each view is cut into `s x s` pixel blocks. A block is mapped by
//! a separable orthonormal transform (colour, 2D DCT-II, temporal DCT-II over
//! the window) and its coefficients, ordered low-frequency luma first, are
//! truncated or zero-padded to `latent_channels`.

use std::io::{Read, Write};
use std::ops::Range;

use mvd_tensor::Tensor;

use crate::error::{shape_err, Error, Result};
use crate::video::VideoClip;

/// Reported PSNR when the reconstruction error is exactly zero.
pub const PSNR_CAP_DB: f64 = 300.0;

/// Per-pixel roundoff below which a round trip is treated as lossless.
pub const LOSSLESS_TOL: f64 = 1e-12;

/// Magic bytes opening a serialized latent.
pub const LATENT_MAGIC: &[u8; 4] = b"LAT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    /// Frames folded into one latent frame (after the leading frame).
    pub temporal_ratio: usize,
    /// Pixel block edge per latent cell.
    pub spatial_ratio: usize,
    pub latent_channels: usize,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            temporal_ratio: 4,
            spatial_ratio: 8,
            latent_channels: 16,
        }
    }
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_ratio != 4 {
            return Err(Error::Config(format!(
                "temporal_ratio must be 4, got {}",
                self.temporal_ratio
            )));
        }
        if self.spatial_ratio == 0 || self.latent_channels == 0 {
            return Err(Error::Config("codec ratios must be positive".into()));
        }
        if self.latent_channels > self.full_rank() {
            return Err(Error::Config(format!(
                "latent_channels {} exceeds block rank {}",
                self.latent_channels,
                self.full_rank()
            )));
        }
        Ok(())
    }

    /// Pixel compression factor `f * s^2`.
    pub fn compression(&self) -> usize {
        self.temporal_ratio * self.spatial_ratio * self.spatial_ratio
    }

    /// Coefficients in one full temporal window block.
    pub fn full_rank(&self) -> usize {
        self.temporal_ratio * self.spatial_ratio * self.spatial_ratio * 3
    }

    /// A spec keeping every coefficient, so encode/decode is lossless.
    pub fn lossless(spatial_ratio: usize) -> Self {
        Self {
            temporal_ratio: 4,
            spatial_ratio,
            latent_channels: 4 * spatial_ratio * spatial_ratio * 3,
        }
    }
}

/// Whether `t` is 1, 8n or 8n+1.
pub fn is_admissible(t: usize) -> bool {
    t == 1 || (t >= 8 && (t.is_multiple_of(8) || t % 8 == 1))
}

/// Frame windows that collapse to one latent frame each. `8n + 1` inputs
/// (including 1) keep the first frame alone and then take windows of four;
/// `8n` inputs are cut into windows of four from the start.
pub fn temporal_windows(t: usize) -> Result<Vec<Range<usize>>> {
    if !is_admissible(t) {
        return Err(Error::FrameCount(t));
    }
    let mut windows = Vec::new();
    let mut start = 0;
    if t % 8 == 1 {
        windows.push(0..1);
        start = 1;
    }
    while start < t {
        windows.push(start..start + 4);
        start += 4;
    }
    Ok(windows)
}

/// `1 -> 1`, `8n -> 2n`, `8n+1 -> 2n+1`.
pub fn latent_frame_count(t: usize) -> Result<usize> {
    Ok(temporal_windows(t)?.len())
}

/// Frame count decoded from `latent_frames`: odd counts map to `8n+1`, even
/// counts to `8n`.
pub fn frame_count_for_latent(latent_frames: usize) -> Result<usize> {
    match latent_frames {
        0 => Err(shape_err("latent", "zero latent frames")),
        n if n % 2 == 1 => Ok(4 * (n - 1) + 1),
        n => Ok(4 * n),
    }
}

/// Spatio-temporal latent `[T', C, h', w', d]` with the pixel geometry it
/// came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub spec: CodecSpec,
    values: Tensor,
}

impl LatentTensor {
    pub fn new(
        spec: CodecSpec,
        frames: usize,
        height: usize,
        width: usize,
        values: Tensor,
    ) -> Result<Self> {
        let expected = latent_shape(&spec, frames, values.shape().get(1).copied().unwrap_or(0), height, width)?;
        if values.shape() != expected {
            return Err(shape_err(
                "latent",
                format!("expected {expected:?}, got {:?}", values.shape()),
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            spec,
            values,
        })
    }

    /// Latent of the given geometry filled from `values` shaped
    /// `[T', C, h', w', d]`, with the frame count inferred from `T'`.
    pub fn from_values(spec: CodecSpec, values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 5 || s[4] != spec.latent_channels {
            return Err(shape_err("latent", format!("bad latent shape {s:?}")));
        }
        let frames = frame_count_for_latent(s[0])?;
        let (h, w) = (s[2] * spec.spatial_ratio, s[3] * spec.spatial_ratio);
        Self::new(spec, frames, h, w, values)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn latent_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }

    /// Writes `LAT1`, then `T, H, W, d, f` as `u64`, then a tensor dump.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(LATENT_MAGIC)?;
        for v in [
            self.frames,
            self.height,
            self.width,
            self.spec.latent_channels,
            self.spec.temporal_ratio,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        self.values.write_dump(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LATENT_MAGIC {
            return Err(Error::Format(format!("bad latent magic {magic:?}")));
        }
        let mut fields = [0usize; 5];
        let mut word = [0u8; 8];
        for f in &mut fields {
            r.read_exact(&mut word)?;
            *f = u64::from_le_bytes(word) as usize;
        }
        let values = Tensor::read_dump(r)?;
        let [frames, height, width, d, f] = fields;
        let s = values.shape();
        if s.len() != 5 || s[2] == 0 || height % s[2] != 0 {
            return Err(Error::Format(format!("latent dump shape {s:?}")));
        }
        let spec = CodecSpec {
            temporal_ratio: f,
            spatial_ratio: height / s[2],
            latent_channels: d,
        };
        Self::new(spec, frames, height, width, values)
    }
}

fn latent_shape(
    spec: &CodecSpec,
    frames: usize,
    views: usize,
    height: usize,
    width: usize,
) -> Result<Vec<usize>> {
    let s = spec.spatial_ratio;
    if !height.is_multiple_of(s) || !width.is_multiple_of(s) || height == 0 || width == 0 {
        return Err(shape_err(
            "codec",
            format!("frame size {height}x{width} not divisible by {s}"),
        ));
    }
    Ok(vec![
        latent_frame_count(frames)?,
        views,
        height / s,
        width / s,
        spec.latent_channels,
    ])
}

/// Orthonormal DCT-II matrix, row `k` is frequency `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] =
                scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

/// Orthonormal colour transform: luma first, then two opponent axes.
fn colour_matrix() -> [f64; 9] {
    let a = 1.0 / 3f64.sqrt();
    let b = 1.0 / 2f64.sqrt();
    let c = 1.0 / 6f64.sqrt();
    [a, a, a, b, -b, 0.0, c, c, -2.0 * c]
}

/// Block coefficient layout `[tau][u][v][k]` flattened; the returned list
/// gives flat indices in storage order (colour, total frequency, tau, u, v).
fn coefficient_order(window: usize, s: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    for tau in 0..window {
        for u in 0..s {
            for v in 0..s {
                for k in 0..3 {
                    idx.push((k, tau + u + v, tau, u, v));
                }
            }
        }
    }
    idx.sort();
    idx.into_iter()
        .map(|(k, _, tau, u, v)| ((tau * s + u) * s + v) * 3 + k)
        .collect()
}

/// Stateless codec with its transforms precomputed.
#[derive(Clone, Debug)]
pub struct Codec {
    spec: CodecSpec,
    spatial: Vec<f64>,
    temporal: Vec<f64>,
    colour: [f64; 9],
    order_single: Vec<usize>,
    order_window: Vec<usize>,
}

impl Codec {
    pub fn new(spec: CodecSpec) -> Result<Self> {
        spec.validate()?;
        let s = spec.spatial_ratio;
        Ok(Self {
            spec,
            spatial: dct_matrix(s),
            temporal: dct_matrix(spec.temporal_ratio),
            colour: colour_matrix(),
            order_single: coefficient_order(1, s),
            order_window: coefficient_order(spec.temporal_ratio, s),
        })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    /// Forward transform of one block `[L][s][s][3]` in place.
    fn forward_block(&self, block: &mut [f64], len: usize) {
        let s = self.spec.spatial_ratio;
        let mut tmp = vec![0.0; s.max(len).max(3)];
        // colour
        for px in block.chunks_exact_mut(3) {
            let c = &self.colour;
            let (r, g, b) = (px[0], px[1], px[2]);
            px[0] = c[0] * r + c[1] * g + c[2] * b;
            px[1] = c[3] * r + c[4] * g + c[5] * b;
            px[2] = c[6] * r + c[7] * g + c[8] * b;
        }
        let idx = |t: usize, y: usize, x: usize, k: usize| ((t * s + y) * s + x) * 3 + k;
        // along x -> v
        for t in 0..len {
            for y in 0..s {
                for k in 0..3 {
                    for v in 0..s {
                        tmp[v] = (0..s).map(|x| self.spatial[v * s + x] * block[idx(t, y, x, k)]).sum();
                    }
                    for v in 0..s {
                        block[idx(t, y, v, k)] = tmp[v];
                    }
                }
            }
        }
        // along y -> u
        for t in 0..len {
            for x in 0..s {
                for k in 0..3 {
                    for u in 0..s {
                        tmp[u] = (0..s).map(|y| self.spatial[u * s + y] * block[idx(t, y, x, k)]).sum();
                    }
                    for u in 0..s {
                        block[idx(t, u, x, k)] = tmp[u];
                    }
                }
            }
        }
        if len > 1 {
            for y in 0..s {
                for x in 0..s {
                    for k in 0..3 {
                        for tau in 0..len {
                            tmp[tau] = (0..len)
                                .map(|t| self.temporal[tau * len + t] * block[idx(t, y, x, k)])
                                .sum();
                        }
                        for tau in 0..len {
                            block[idx(tau, y, x, k)] = tmp[tau];
                        }
                    }
                }
            }
        }
    }

    fn inverse_block(&self, block: &mut [f64], len: usize) {
        let s = self.spec.spatial_ratio;
        let mut tmp = vec![0.0; s.max(len).max(3)];
        let idx = |t: usize, y: usize, x: usize, k: usize| ((t * s + y) * s + x) * 3 + k;
        if len > 1 {
            for y in 0..s {
                for x in 0..s {
                    for k in 0..3 {
                        for t in 0..len {
                            tmp[t] = (0..len)
                                .map(|tau| self.temporal[tau * len + t] * block[idx(tau, y, x, k)])
                                .sum();
                        }
                        for t in 0..len {
                            block[idx(t, y, x, k)] = tmp[t];
                        }
                    }
                }
            }
        }
        for t in 0..len {
            for x in 0..s {
                for k in 0..3 {
                    for y in 0..s {
                        tmp[y] = (0..s).map(|u| self.spatial[u * s + y] * block[idx(t, u, x, k)]).sum();
                    }
                    for y in 0..s {
                        block[idx(t, y, x, k)] = tmp[y];
                    }
                }
            }
        }
        for t in 0..len {
            for y in 0..s {
                for k in 0..3 {
                    for x in 0..s {
                        tmp[x] = (0..s).map(|v| self.spatial[v * s + x] * block[idx(t, y, v, k)]).sum();
                    }
                    for x in 0..s {
                        block[idx(t, y, x, k)] = tmp[x];
                    }
                }
            }
        }
        for px in block.chunks_exact_mut(3) {
            let c = &self.colour;
            let (a, b, d) = (px[0], px[1], px[2]);
            px[0] = c[0] * a + c[3] * b + c[6] * d;
            px[1] = c[1] * a + c[4] * b + c[7] * d;
            px[2] = c[2] * a + c[5] * b + c[8] * d;
        }
    }

    pub fn encode(&self, video: &VideoClip) -> Result<LatentTensor> {
        let (t, views, h, w) = (video.frames(), video.views(), video.height(), video.width());
        let shape = latent_shape(&self.spec, t, views, h, w)?;
        let windows = temporal_windows(t)?;
        let s = self.spec.spatial_ratio;
        let d = self.spec.latent_channels;
        let (gh, gw) = (shape[2], shape[3]);
        let px = video.pixels().data();
        let pix = |f: usize, c: usize, y: usize, x: usize, k: usize| {
            px[(((f * views + c) * h + y) * w + x) * 3 + k]
        };
        let mut out = vec![0.0; shape.iter().product()];
        let mut block = Vec::new();
        for (wi, win) in windows.iter().enumerate() {
            let len = win.len();
            let order = if len == 1 {
                &self.order_single
            } else {
                &self.order_window
            };
            for c in 0..views {
                for by in 0..gh {
                    for bx in 0..gw {
                        block.clear();
                        for f in win.clone() {
                            for y in 0..s {
                                for x in 0..s {
                                    for k in 0..3 {
                                        block.push(pix(f, c, by * s + y, bx * s + x, k));
                                    }
                                }
                            }
                        }
                        self.forward_block(&mut block, len);
                        let base = (((wi * views + c) * gh + by) * gw + bx) * d;
                        for (ch, &src) in order.iter().take(d).enumerate() {
                            out[base + ch] = block[src];
                        }
                    }
                }
            }
        }
        LatentTensor::new(self.spec, t, h, w, Tensor::new(&shape, out)?)
    }

    /// Inverse of [`Codec::encode`]; truncated coefficients come back as
    /// zero, and pixels are clamped to `[0, 1]`.
    pub fn decode(&self, latent: &LatentTensor) -> Result<VideoClip> {
        if latent.spec.latent_channels != self.spec.latent_channels
            || latent.spec.spatial_ratio != self.spec.spatial_ratio
        {
            return Err(shape_err(
                "decode",
                format!(
                    "latent has {} channels at ratio {}, codec expects {} at {}",
                    latent.spec.latent_channels,
                    latent.spec.spatial_ratio,
                    self.spec.latent_channels,
                    self.spec.spatial_ratio
                ),
            ));
        }
        let t = latent.frames;
        let windows = temporal_windows(t)?;
        let (views, h, w) = (latent.views(), latent.height, latent.width);
        let (gh, gw) = latent.grid();
        let s = self.spec.spatial_ratio;
        let d = self.spec.latent_channels;
        let lat = latent.values().data();
        let mut px = vec![0.0; t * views * h * w * 3];
        for (wi, win) in windows.iter().enumerate() {
            let len = win.len();
            let order = if len == 1 {
                &self.order_single
            } else {
                &self.order_window
            };
            let mut block = vec![0.0; len * s * s * 3];
            for c in 0..views {
                for by in 0..gh {
                    for bx in 0..gw {
                        block.iter_mut().for_each(|v| *v = 0.0);
                        let base = (((wi * views + c) * gh + by) * gw + bx) * d;
                        for (ch, &dst) in order.iter().take(d).enumerate() {
                            block[dst] = lat[base + ch];
                        }
                        self.inverse_block(&mut block, len);
                        let mut i = 0;
                        for f in win.clone() {
                            for y in 0..s {
                                for x in 0..s {
                                    for k in 0..3 {
                                        let p = (((f * views + c) * h + by * s + y) * w + bx * s + x) * 3 + k;
                                        px[p] = block[i];
                                        i += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        VideoClip::from_unclamped(Tensor::new(&[t, views, h, w, 3], px)?, 30.0)
    }

    /// PSNR of a round trip through the codec with the given peak value.
    /// Reconstructions within [`LOSSLESS_TOL`] of every input pixel count as
    /// exact and return the cap.
    pub fn roundtrip_psnr(&self, video: &VideoClip, peak: f64) -> Result<f64> {
        let back = self.decode(&self.encode(video)?)?;
        if video.pixels().max_abs_diff(back.pixels()) <= LOSSLESS_TOL {
            return Ok(PSNR_CAP_DB);
        }
        Ok(psnr(video.mse(&back)?, peak))
    }
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}
