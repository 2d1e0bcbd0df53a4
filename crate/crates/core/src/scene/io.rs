//! JSON scene documents.
//!
//! ```text
//! {
//!   "format": "mvd-scene/1",
//!   "image_height": H, "image_width": W, "fps": f,
//!   "map": {"rows": r, "cols": c, "channels": 4, "meters_per_cell": m},
//!   "cameras": [{"rotation": [[..3]x3], "translation": [..3],
//!                "intrinsics": {"fx", "fy", "cx", "cy"}}, ...],
//!   "frames": [{"text": ["rainy", ...],
//!               "ego": {"rotation": [[..3]x3], "translation": [..3]},
//!               "boxes": [{"track_id", "class", "corners": [[x,y,z] x8]}],
//!               "map_rle": [zeros, ones, zeros, ...]}, ...]
//! }
//! ```
//!
//! `map_rle` run-length encodes the flattened `[rows, cols, channels]`
//! raster as alternating run lengths, starting with a (possibly empty) run
//! of zeros.

use serde::{Deserialize, Serialize};

use super::{Box3D, CameraPose, EgoTransform, RoadMapRaster, Scene, SceneFrame, TextPrompt, MAP_CHANNELS};
use crate::error::{Error, Result};

pub const SCENE_FORMAT: &str = "mvd-scene/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapHeader {
    rows: usize,
    cols: usize,
    channels: usize,
    meters_per_cell: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDoc {
    text: TextPrompt,
    ego: EgoTransform,
    boxes: Vec<Box3D>,
    map_rle: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    format: String,
    image_height: usize,
    image_width: usize,
    fps: f64,
    map: MapHeader,
    cameras: Vec<CameraPose>,
    frames: Vec<FrameDoc>,
}

pub fn rle_encode(cells: &[u8]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0usize;
    for &c in cells {
        if c == current {
            len += 1;
        } else {
            runs.push(len);
            current = c;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize], expected: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(expected);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n((i % 2) as u8, r));
    }
    if out.len() != expected {
        return Err(Error::Format(format!(
            "map_rle covers {} cells, expected {expected}",
            out.len()
        )));
    }
    Ok(out)
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let first = scene
        .frames
        .first()
        .ok_or_else(|| Error::Format("scene has no frames".into()))?;
    let doc = SceneDoc {
        format: SCENE_FORMAT.into(),
        image_height: scene.image_height,
        image_width: scene.image_width,
        fps: scene.fps,
        map: MapHeader {
            rows: first.map.rows,
            cols: first.map.cols,
            channels: MAP_CHANNELS,
            meters_per_cell: first.map.meters_per_cell,
        },
        cameras: scene.cameras.clone(),
        frames: scene
            .frames
            .iter()
            .map(|f| FrameDoc {
                text: f.text.clone(),
                ego: f.ego,
                boxes: f.boxes.clone(),
                map_rle: rle_encode(f.map.cells()),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_str(text)?;
    if doc.format != SCENE_FORMAT {
        return Err(Error::Format(format!("unsupported scene format {:?}", doc.format)));
    }
    if doc.map.channels != MAP_CHANNELS {
        return Err(Error::Format(format!(
            "map has {} channels, expected {MAP_CHANNELS}",
            doc.map.channels
        )));
    }
    if doc.frames.is_empty() || doc.cameras.is_empty() {
        return Err(Error::Format("scene needs at least one frame and one camera".into()));
    }
    for cam in &doc.cameras {
        cam.validate()?;
    }
    let n = doc.map.rows * doc.map.cols * MAP_CHANNELS;
    let frames = doc
        .frames
        .into_iter()
        .map(|f| {
            f.ego.validate()?;
            if let Some(b) = f.boxes.iter().find(|b| !b.is_valid_cuboid()) {
                return Err(Error::Format(format!("box {} is not a cuboid", b.track_id)));
            }
            Ok(SceneFrame {
                map: RoadMapRaster::new(
                    doc.map.rows,
                    doc.map.cols,
                    doc.map.meters_per_cell,
                    rle_decode(&f.map_rle, n)?,
                )?,
                boxes: f.boxes,
                text: f.text,
                ego: f.ego,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        image_height: doc.image_height,
        image_width: doc.image_width,
        fps: doc.fps,
        cameras: doc.cameras,
        frames,
    })
}
