//! Box-controllability probe: move the conditioned box, resample with the
//! same noise, and check that the bright blob follows.

use mvd_core::flow::SamplerConfig;
use mvd_core::scene::geom::inside_convex;
use mvd_core::scene::{project_box, Scene};
use mvd_core::train::Model;
use mvd_core::video::VideoClip;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::sample::sample_clip;

/// Offsets that must move the blob the right way.
pub const REQUIRED_AGREEMENT: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetResult {
    /// Ground-plane offset, metres, ego frame.
    pub offset: [f64; 2],
    /// Mean shift of the pixels covered by the conditioned box, pixels.
    pub expected: [f64; 2],
    /// Mean shift of the bright-region centroid, pixels.
    pub observed: [f64; 2],
    pub agrees: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub view: usize,
    pub inside_mean: f64,
    pub background_mean: f64,
    pub offsets: Vec<OffsetResult>,
}

impl ControlReport {
    pub fn agreeing(&self) -> usize {
        self.offsets.iter().filter(|o| o.agrees).count()
    }

    pub fn passes(&self) -> bool {
        self.inside_mean > self.background_mean && self.agreeing() >= REQUIRED_AGREEMENT
    }
}

/// Outline of every box of frame `t` in view `c`, when visible.
fn outlines(scene: &Scene, t: usize, c: usize) -> Vec<Vec<[f64; 2]>> {
    scene.frames[t]
        .boxes
        .iter()
        .map(|b| project_box(b, &scene.cameras[c], scene.image_height, scene.image_width))
        .filter(|p| p.visible && p.polygon.len() >= 3)
        .map(|p| p.polygon)
        .collect()
}

/// Centroid of the pixel centres covered by `poly`, so outlines that
/// reach past the image edge count only their visible part.
fn covered_centroid(poly: &[[f64; 2]], height: usize, width: usize) -> Option<[f64; 2]> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0f64);
    for y in 0..height {
        for x in 0..width {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            if inside_convex(poly, p) {
                sx += p[0];
                sy += p[1];
                n += 1.0;
            }
        }
    }
    (n > 0.0).then(|| [sx / n, sy / n])
}

/// Centroid of the pixels above half maximum (halfway from the median
/// background level to the peak), weighted by how far they exceed it.
fn bright_centroid(clip: &VideoClip, t: usize, c: usize) -> Option<[f64; 2]> {
    let lum = clip.luminance(t, c);
    let mut sorted = lum.clone();
    sorted.sort_by(f64::total_cmp);
    let thr = 0.5 * (sorted[sorted.len() / 2] + sorted[sorted.len() - 1]);
    let w = clip.width();
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for (i, &v) in lum.iter().enumerate() {
        let k = v - thr;
        if k > 0.0 {
            sx += k * ((i % w) as f64 + 0.5);
            sy += k * ((i / w) as f64 + 0.5);
            sw += k;
        }
    }
    (sw > 0.0).then(|| [sx / sw, sy / sw])
}

/// View in which the scene's boxes are visible in the most frames.
fn best_view(scene: &Scene) -> Option<usize> {
    (0..scene.num_views())
        .map(|c| (c, (0..scene.num_frames()).filter(|&t| !outlines(scene, t, c).is_empty()).count()))
        .filter(|&(_, n)| n > 0)
        .max_by_key(|&(c, n)| (n, std::cmp::Reverse(c)))
        .map(|(c, _)| c)
}

/// Sixteen ground-plane offsets: four lateral distances each way, each
/// at two depths, relative to the camera of view `c`.
pub fn probe_offsets(scene: &Scene, c: usize) -> Vec<[f64; 2]> {
    let r = &scene.cameras[c].rotation;
    // Camera axes in ego coordinates are the rotation's columns.
    let right = [r[0][0], r[1][0]];
    let fwd = [r[0][2], r[1][2]];
    let mut out = Vec::new();
    for lateral in [-3.0, -2.0, -1.5, -1.0, 1.0, 1.5, 2.0, 3.0] {
        for depth in [-1.0, 1.0] {
            out.push([lateral * right[0] + depth * fwd[0], lateral * right[1] + depth * fwd[1]]);
        }
    }
    out
}

pub fn translate_boxes(scene: &Scene, offset: [f64; 2]) -> Scene {
    let mut s = scene.clone();
    for f in &mut s.frames {
        for b in &mut f.boxes {
            *b = b.translated([offset[0], offset[1], 0.0]);
        }
    }
    s
}

/// Inside-box and background luminance sums and counts over visible frames.
fn region_means(clip: &VideoClip, scene: &Scene, c: usize, acc: &mut [f64; 4]) {
    let w = clip.width();
    for t in 0..clip.frames() {
        let polys = outlines(scene, t, c);
        if polys.is_empty() {
            continue;
        }
        for (i, v) in clip.luminance(t, c).into_iter().enumerate() {
            let p = [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5];
            let k = if polys.iter().any(|h| inside_convex(h, p)) { 0 } else { 2 };
            acc[k] += v;
            acc[k + 1] += 1.0;
        }
    }
}

/// Samples `scene` and sixteen box-translated copies with the same noise.
pub fn controllability(model: &Model, scene: &Scene, sampler: &SamplerConfig) -> Result<ControlReport> {
    let c = best_view(scene).ok_or_else(|| CliError::Usage("no box is visible in any view".into()))?;
    let (base, _, _) = sample_clip(model, scene, sampler)?;
    let mut acc = [0.0; 4];
    region_means(&base, scene, c, &mut acc);
    let mut offsets = Vec::new();
    for offset in probe_offsets(scene, c) {
        let moved = translate_boxes(scene, offset);
        let (clip, _, _) = sample_clip(model, &moved, sampler)?;
        region_means(&clip, &moved, c, &mut acc);
        let (mut exp, mut obs, mut n) = ([0.0; 2], [0.0; 2], 0.0f64);
        for t in 0..scene.num_frames() {
            let (a, b) = (outlines(scene, t, c), outlines(&moved, t, c));
            let (Some(pa), Some(pb)) = (a.first(), b.first()) else {
                continue;
            };
            let (h, w) = (scene.image_height, scene.image_width);
            let (Some(ma), Some(mb)) = (covered_centroid(pa, h, w), covered_centroid(pb, h, w)) else {
                continue;
            };
            let (Some(ca), Some(cb)) = (bright_centroid(&base, t, c), bright_centroid(&clip, t, c)) else {
                continue;
            };
            for k in 0..2 {
                exp[k] += mb[k] - ma[k];
                obs[k] += cb[k] - ca[k];
            }
            n += 1.0;
        }
        let expected = [exp[0] / n.max(1.0), exp[1] / n.max(1.0)];
        let observed = [obs[0] / n.max(1.0), obs[1] / n.max(1.0)];
        let agrees = n > 0.0 && expected[0] * observed[0] + expected[1] * observed[1] > 0.0;
        offsets.push(OffsetResult {
            offset,
            expected,
            observed,
            agrees,
        });
    }
    Ok(ControlReport {
        view: c,
        inside_mean: acc[0] / acc[1].max(1.0),
        background_mean: acc[2] / acc[3].max(1.0),
        offsets,
    })
}

/// Held-in scene whose boxes cover the most pixels in their best view.
pub fn pick_probe_scene<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Option<&'a Scene> {
    let area = |s: &Scene| -> f64 {
        let Some(c) = best_view(s) else { return 0.0 };
        (0..s.num_frames())
            .flat_map(|t| outlines(s, t, c))
            .map(|p| polygon_area(&p))
            .sum()
    };
    scenes
        .into_iter()
        .map(|s| (area(s), s))
        .filter(|(a, _)| *a > 0.0)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, s)| s)
}

fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}
