//! Ground-truth renderer for synthetic scenes.
//!
//! Background pixels intersect the ground plane and show the road raster at
//! low intensity; boxes are painted far to near as flat convex polygons at
//! [`CLASS_INTENSITY`]. The weather token shifts every pixel by a constant
//! before clamping to `[0, 1]`.

use mvd_tensor::Tensor;

use super::{project_box, Scene, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::video::VideoClip;

pub const CLASS_INTENSITY: [f64; NUM_CLASSES] = [0.7, 0.85, 1.0];
pub const SKY: f64 = 0.2;
pub const GROUND: f64 = 0.12;
pub const ROAD: f64 = 0.3;
pub const ROAD_EDGE: f64 = 0.2;
pub const CROSSWALK: f64 = 0.38;
pub const DIVIDER: f64 = 0.42;
/// Minimum intensity gap between any box pixel and any background pixel.
pub const BOX_MARGIN: f64 = CLASS_INTENSITY[0] - DIVIDER;

/// Global brightness offset for a prompt.
pub fn brightness_shift(tokens: &[String]) -> f64 {
    tokens
        .iter()
        .map(|t| match t.as_str() {
            "cloudy" => -0.05,
            "rainy" => -0.1,
            "night" => -0.2,
            _ => 0.0,
        })
        .sum()
}

/// One rendered frame: intensities and, per pixel, the index of the box
/// painted there.
pub struct FrameRender {
    pub intensity: Vec<f64>,
    pub box_ids: Vec<Option<usize>>,
}

pub fn render_frame(scene: &Scene, view: usize, t: usize) -> Result<FrameRender> {
    let cam = scene.cameras.get(view).ok_or_else(|| {
        Error::Config(format!("view {view} out of range for {} cameras", scene.num_views()))
    })?;
    let frame = &scene.frames[t];
    let (h, w) = (scene.image_height, scene.image_width);
    let mut intensity = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let ray = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
            intensity[y * w + x] = if ray[2] >= -1e-9 {
                SKY
            } else {
                let s = -cam.translation[2] / ray[2];
                let gx = cam.translation[0] + s * ray[0];
                let gy = cam.translation[1] + s * ray[1];
                match frame.map.locate(gx, gy) {
                    None => GROUND,
                    Some((r, c)) => {
                        if frame.map.get(r, c, 1) {
                            DIVIDER
                        } else if frame.map.get(r, c, 3) {
                            CROSSWALK
                        } else if frame.map.get(r, c, 0) {
                            ROAD
                        } else if frame.map.get(r, c, 2) {
                            ROAD_EDGE
                        } else {
                            GROUND
                        }
                    }
                }
            };
        }
    }
    let mut box_ids = vec![None; h * w];
    let mut order: Vec<(f64, usize)> = frame
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| (cam.to_camera(b.center())[2], i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in order {
        let b = &frame.boxes[i];
        let proj = project_box(b, cam, h, w);
        if proj.polygon.len() < 3 {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &proj.polygon {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let xs = (x0.floor().max(0.0) as usize).min(w);
        let xe = ((x1.ceil().max(0.0)) as usize).min(w);
        let ys = (y0.floor().max(0.0) as usize).min(h);
        let ye = ((y1.ceil().max(0.0)) as usize).min(h);
        for y in ys..ye {
            for x in xs..xe {
                if super::geom::inside_convex(&proj.polygon, [x as f64 + 0.5, y as f64 + 0.5]) {
                    intensity[y * w + x] = CLASS_INTENSITY[b.class];
                    box_ids[y * w + x] = Some(i);
                }
            }
        }
    }
    let shift = brightness_shift(&frame.text.tokens);
    for v in &mut intensity {
        *v = (*v + shift).clamp(0.0, 1.0);
    }
    Ok(FrameRender { intensity, box_ids })
}

/// Renders one view as a `[T, 1, H, W, 3]` clip.
pub fn rasterize(scene: &Scene, view: usize) -> Result<VideoClip> {
    let (h, w) = (scene.image_height, scene.image_width);
    let t = scene.num_frames();
    let mut px = Vec::with_capacity(t * h * w * 3);
    for f in 0..t {
        let r = render_frame(scene, view, f)?;
        for v in r.intensity {
            px.extend([v, v, v]);
        }
    }
    VideoClip::new(Tensor::new(&[t, 1, h, w, 3], px)?, scene.fps)
}

/// Renders every view as a `[T, C, H, W, 3]` clip.
pub fn rasterize_clip(scene: &Scene) -> Result<VideoClip> {
    let views: Vec<VideoClip> = (0..scene.num_views())
        .map(|c| rasterize(scene, c))
        .collect::<Result<_>>()?;
    let (t, h, w) = (scene.num_frames(), scene.image_height, scene.image_width);
    let plane = h * w * 3;
    let mut px = Vec::with_capacity(t * views.len() * plane);
    for f in 0..t {
        for v in &views {
            px.extend_from_slice(&v.pixels().data()[f * plane..(f + 1) * plane]);
        }
    }
    VideoClip::new(Tensor::new(&[t, views.len(), h, w, 3], px)?, scene.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth::{synth_scene, SceneKnobs};
    use crate::scene::Box3D;

    fn knobs(boxes: usize) -> SceneKnobs {
        SceneKnobs {
            min_boxes: boxes,
            max_boxes: boxes,
            ..SceneKnobs::default()
        }
    }

    #[test]
    fn empty_scene_is_background_only() {
        let s = synth_scene(5, 1, 1, &knobs(0)).unwrap();
        let r = render_frame(&s, 0, 0).unwrap();
        assert!(r.box_ids.iter().all(Option::is_none));
        let shift = brightness_shift(&s.frames[0].text.tokens);
        let allowed = [SKY, GROUND, ROAD, ROAD_EDGE, CROSSWALK, DIVIDER].map(|v| (v + shift).clamp(0.0, 1.0));
        assert!(r.intensity.iter().all(|v| allowed.iter().any(|a| (a - v).abs() < 1e-15)));
    }

    #[test]
    fn visible_box_is_brighter_than_background() {
        let mut s = synth_scene(5, 1, 1, &knobs(0)).unwrap();
        s.frames[0].boxes.push(Box3D::from_center(1, 0, [10.0, 0.0, 0.8], [4.5, 1.9, 1.6], 0.2));
        let r = render_frame(&s, 0, 0).unwrap();
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for (v, id) in r.intensity.iter().zip(&r.box_ids) {
            if id.is_some() {
                inside += v;
                ni += 1;
            } else {
                outside += v;
                no += 1;
            }
        }
        assert!(ni > 0);
        assert!(inside / ni as f64 - outside / no as f64 >= BOX_MARGIN);
    }

    #[test]
    fn view_order_does_not_matter() {
        let s = synth_scene(8, 9, 3, &SceneKnobs::default()).unwrap();
        let forward: Vec<_> = (0..3).map(|c| rasterize(&s, c).unwrap()).collect();
        let backward: Vec<_> = (0..3).rev().map(|c| rasterize(&s, c).unwrap()).collect();
        for c in 0..3 {
            assert_eq!(forward[c], backward[2 - c]);
        }
        assert!(rasterize(&s, 3).is_err());
    }
}
