//! Scene descriptors: cameras, road map raster, 3D boxes, text and ego
//! motion, plus a procedural generator, a rasterizer and a text format.
//!
//! Coordinates: the ego LiDAR frame has `x` forward, `y` left, `z` up.
//! Cameras follow the pinhole convention `x` right, `y` down, `z` forward;
//! a [`CameraPose`] rotation maps camera axes into the ego frame.

pub mod geom;
pub mod io;
pub mod raster;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use geom::{Mat3, Vec3};

pub use raster::{rasterize, rasterize_clip, BOX_MARGIN, CLASS_INTENSITY};
pub use synth::{synth_scene, SceneKnobs};

/// Object classes in the synthetic world.
pub const NUM_CLASSES: usize = 3;
/// Semantic channels of the road raster: road, lane divider, road edge,
/// crosswalk.
pub const MAP_CHANNELS: usize = 4;
/// Near clipping depth in metres.
pub const NEAR_PLANE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    /// Camera-to-ego rotation.
    pub rotation: Mat3,
    /// Camera centre in the ego frame, metres.
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if !geom::is_rotation(&self.rotation, 1e-9) {
            return Err(Error::InvalidPose(format!(
                "camera rotation {:?} is not orthonormal",
                self.rotation
            )));
        }
        Ok(())
    }

    /// Horizontal camera at `height`, looking along ego yaw `yaw`, offset
    /// `radius` metres from the ego origin.
    pub fn looking(yaw: f64, radius: f64, height: f64, intrinsics: Intrinsics) -> Self {
        let (s, c) = yaw.sin_cos();
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let forward = [c, s, 0.0];
        Self {
            rotation: [
                [right[0], down[0], forward[0]],
                [right[1], down[1], forward[1]],
                [right[2], down[2], forward[2]],
            ],
            translation: [radius * c, radius * s, height],
            intrinsics,
        }
    }

    /// Ego-frame point to camera coordinates.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        geom::mat_vec(&geom::transpose(&self.rotation), geom::sub(p, self.translation))
    }

    /// Camera coordinates to pixel `(u, v)`; caller guarantees `z > 0`.
    pub fn to_pixel(&self, pc: Vec3) -> [f64; 2] {
        let k = &self.intrinsics;
        [k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy]
    }

    /// Unit ray through pixel position `(u, v)` in the ego frame.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        let n = geom::norm(d);
        geom::mat_vec(&self.rotation, geom::scale(d, 1.0 / n))
    }
}

/// Binary BEV raster `[rows, cols, MAP_CHANNELS]` centred on the ego car;
/// rows run along ego `x`, columns along ego `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadMapRaster {
    pub rows: usize,
    pub cols: usize,
    pub meters_per_cell: f64,
    cells: Vec<u8>,
}

impl RoadMapRaster {
    pub fn new(rows: usize, cols: usize, meters_per_cell: f64, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != rows * cols * MAP_CHANNELS || cells.iter().any(|&c| c > 1) {
            return Err(Error::Format(format!(
                "map raster needs {} binary cells",
                rows * cols * MAP_CHANNELS
            )));
        }
        Ok(Self {
            rows,
            cols,
            meters_per_cell,
            cells,
        })
    }

    pub fn empty(rows: usize, cols: usize, meters_per_cell: f64) -> Self {
        Self {
            rows,
            cols,
            meters_per_cell,
            cells: vec![0; rows * cols * MAP_CHANNELS],
        }
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> bool {
        self.cells[(row * self.cols + col) * MAP_CHANNELS + channel] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, on: bool) {
        self.cells[(row * self.cols + col) * MAP_CHANNELS + channel] = on as u8;
    }

    /// Ego-frame centre of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (row as f64 + 0.5 - self.rows as f64 / 2.0) * self.meters_per_cell;
        let y = (col as f64 + 0.5 - self.cols as f64 / 2.0) * self.meters_per_cell;
        (x, y)
    }

    /// Cell containing the ego-frame ground point, if on the raster.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = (x / self.meters_per_cell + self.rows as f64 / 2.0).floor();
        let c = (y / self.meters_per_cell + self.cols as f64 / 2.0).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

/// Oriented cuboid; corner `i` has sign bits `(i & 1, i & 2, i & 4)` on the
/// length, width and height axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3D {
    /// Identity of the physical object across frames.
    pub track_id: u32,
    pub class: usize,
    pub corners: [Vec3; 8],
}

impl Box3D {
    pub fn from_center(track_id: u32, class: usize, center: Vec3, size: Vec3, yaw: f64) -> Self {
        let r = geom::rot_z(yaw);
        let mut corners = [[0.0; 3]; 8];
        for (i, c) in corners.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
            let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
            let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
            let local = [sx * size[0], sy * size[1], sz * size[2]];
            *c = geom::add(center, geom::mat_vec(&r, local));
        }
        Self {
            track_id,
            class,
            corners,
        }
    }

    pub fn center(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.corners {
            c = geom::add(c, *p);
        }
        geom::scale(c, 1.0 / 8.0)
    }

    /// Parallel edges agree and the three edge directions are orthogonal,
    /// within `1e-6`.
    pub fn is_valid_cuboid(&self) -> bool {
        let c = &self.corners;
        let axes = [1usize, 2, 4];
        let mut dirs = [[0.0; 3]; 3];
        for (a, &bit) in axes.iter().enumerate() {
            let edges: Vec<Vec3> = (0..8)
                .filter(|i| i & bit == 0)
                .map(|i| geom::sub(c[i | bit], c[i]))
                .collect();
            for e in &edges[1..] {
                if geom::norm(geom::sub(*e, edges[0])) > 1e-6 {
                    return false;
                }
            }
            dirs[a] = edges[0];
        }
        let tol = 1e-6;
        geom::dot(dirs[0], dirs[1]).abs() <= tol * (1.0 + geom::norm(dirs[0]) * geom::norm(dirs[1]))
            && geom::dot(dirs[0], dirs[2]).abs() <= tol * (1.0 + geom::norm(dirs[0]) * geom::norm(dirs[2]))
            && geom::dot(dirs[1], dirs[2]).abs() <= tol * (1.0 + geom::norm(dirs[1]) * geom::norm(dirs[2]))
    }

    /// Corners translated by `offset`.
    pub fn translated(&self, offset: Vec3) -> Self {
        let mut out = self.clone();
        for c in &mut out.corners {
            *c = geom::add(*c, offset);
        }
        out
    }
}

/// Rigid transform from frame-t LiDAR coordinates to frame-0 coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl EgoTransform {
    pub fn identity() -> Self {
        Self {
            rotation: geom::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            rotation: geom::rot_z(yaw),
            translation: [x, y, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !geom::is_rotation(&self.rotation, 1e-9) {
            return Err(Error::InvalidPose(format!(
                "ego rotation {:?} is not orthonormal",
                self.rotation
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        geom::add(geom::mat_vec(&self.rotation, p), self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &EgoTransform) -> EgoTransform {
        EgoTransform {
            rotation: geom::mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> EgoTransform {
        let rt = geom::transpose(&self.rotation);
        EgoTransform {
            rotation: rt,
            translation: geom::scale(geom::mat_vec(&rt, self.translation), -1.0),
        }
    }

    /// Rotation (row-major, 9) followed by translation (3).
    pub fn flatten(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = self.rotation[i][j];
            }
            out[9 + i] = self.translation[i];
        }
        out
    }
}

/// Maps box corners by `R x + t`.
pub fn apply_ego_transform(b: &Box3D, tr: &EgoTransform) -> Result<Box3D> {
    tr.validate()?;
    let mut out = b.clone();
    for c in &mut out.corners {
        *c = tr.apply(*c);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TextPrompt {
    pub tokens: Vec<String>,
}

impl TextPrompt {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub map: RoadMapRaster,
    pub boxes: Vec<Box3D>,
    pub text: TextPrompt,
    pub ego: EgoTransform,
}

/// One clip's descriptor sequence. Cameras are fixed for the whole clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_height: usize,
    pub image_width: usize,
    pub fps: f64,
    pub cameras: Vec<CameraPose>,
    pub frames: Vec<SceneFrame>,
}

impl Scene {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }
}

/// Pinhole projection of a box into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedBox {
    /// Per-corner pixel position and depth; `None` behind the near plane.
    pub corners: [Option<([f64; 2], f64)>; 8],
    /// Convex image-plane outline of the near-clipped box.
    pub polygon: Vec<[f64; 2]>,
    /// Some corner has positive depth and lands inside the image.
    pub visible: bool,
}

const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

pub fn project_box(b: &Box3D, cam: &CameraPose, height: usize, width: usize) -> ProjectedBox {
    let cam_pts: Vec<Vec3> = b.corners.iter().map(|&p| cam.to_camera(p)).collect();
    let mut corners = [None; 8];
    let mut outline = Vec::new();
    let mut visible = false;
    for (i, pc) in cam_pts.iter().enumerate() {
        if pc[2] > NEAR_PLANE {
            let px = cam.to_pixel(*pc);
            corners[i] = Some((px, pc[2]));
            outline.push(px);
            if px[0] >= 0.0 && px[0] < width as f64 && px[1] >= 0.0 && px[1] < height as f64 {
                visible = true;
            }
        }
    }
    for &(a, bi) in &BOX_EDGES {
        let (pa, pb) = (cam_pts[a], cam_pts[bi]);
        if (pa[2] > NEAR_PLANE) != (pb[2] > NEAR_PLANE) {
            let s = (NEAR_PLANE - pa[2]) / (pb[2] - pa[2]);
            let p = geom::add(pa, geom::scale(geom::sub(pb, pa), s));
            outline.push(cam.to_pixel([p[0], p[1], NEAR_PLANE]));
        }
    }
    ProjectedBox {
        corners,
        polygon: geom::convex_hull(&outline),
        visible,
    }
}
