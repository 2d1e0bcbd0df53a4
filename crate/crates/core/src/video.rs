use mvd_tensor::Tensor;

use crate::error::{shape_err, Result};

/// Multi-view pixel clip, `[T, C, H, W, 3]`, unit-scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pixels: Tensor,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(pixels: Tensor, fps: f64) -> Result<Self> {
        Self::check_shape(&pixels)?;
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(shape_err("video clip", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels, fps })
    }

    /// Clamps every value into `[0, 1]`.
    pub fn from_unclamped(pixels: Tensor, fps: f64) -> Result<Self> {
        Self::check_shape(&pixels)?;
        Ok(Self {
            pixels: pixels.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }),
            fps,
        })
    }

    fn check_shape(pixels: &Tensor) -> Result<()> {
        let s = pixels.shape();
        if s.len() != 5 || s[4] != 3 {
            return Err(shape_err(
                "video clip",
                format!("expected [T, C, H, W, 3], got {s:?}"),
            ));
        }
        Ok(())
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    /// Pixel `(frame, view, y, x)` as RGB.
    pub fn pixel(&self, t: usize, c: usize, y: usize, x: usize) -> [f64; 3] {
        let s = self.pixels.shape();
        let base = (((t * s[1] + c) * s[2] + y) * s[3] + x) * 3;
        let d = self.pixels.data();
        [d[base], d[base + 1], d[base + 2]]
    }

    /// Mean over the colour channels of one frame of one view, `H * W` values.
    pub fn luminance(&self, t: usize, c: usize) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let p = self.pixel(t, c, y, x);
                out.push((p[0] + p[1] + p[2]) / 3.0);
            }
        }
        out
    }

    /// Mean squared error against a clip of the same shape.
    pub fn mse(&self, other: &VideoClip) -> Result<f64> {
        if self.pixels.shape() != other.pixels.shape() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", self.pixels.shape(), other.pixels.shape()),
            ));
        }
        let a = self.pixels.data();
        let b = other.pixels.data();
        Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
    }
}
