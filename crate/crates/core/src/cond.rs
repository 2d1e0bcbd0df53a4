//! Condition encoders aligned with the latent frame axis.
//!
//! Time-varying sources (boxes, trajectory, map) come out with exactly
//! `latent_frame_count(T)` steps. Text and camera tokens have no time axis
//! and are broadcast over latent frames when the context is assembled.

use std::str::FromStr;

use mvd_tensor::{concat, Mask, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::{latent_frame_count, temporal_windows};
use crate::error::{shape_err, Error, Result};
use crate::layers::{init_temporal_transformer, temporal_transformer};
use crate::params::{init_mlp, Bound, Init};
use crate::scene::synth::{SETTING_TOKENS, TIME_TOKENS, WEATHER_TOKENS};
use crate::scene::{project_box, Box3D, CameraPose, EgoTransform, Scene, TextPrompt, MAP_CHANNELS, NUM_CLASSES};

/// Corners are divided by this many metres before Fourier features.
pub const SCENE_RADIUS: f64 = 50.0;
pub const CAMERA_FEATURES: usize = 16;
pub const POSE_FEATURES: usize = 12;
const TEXT_TABLE_SEED: u64 = 0x7e57_7ab1e;

/// Token source order in the context; also indexes `ctx.source`.
pub const SOURCES: [&str; 4] = ["text", "camera", "trajectory", "boxes"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxEncoderMode {
    #[default]
    Downsample4x,
    Reduce,
    Interp,
}

impl BoxEncoderMode {
    pub const ALL: [BoxEncoderMode; 3] = [Self::Downsample4x, Self::Reduce, Self::Interp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Downsample4x => "downsample4x",
            Self::Reduce => "reduce",
            Self::Interp => "interp",
        }
    }
}

impl FromStr for BoxEncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

impl std::fmt::Display for BoxEncoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Encoder hyperparameters; a slice of the model config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub width: usize,
    pub heads: usize,
    pub fourier_freqs: usize,
    pub control_depth: usize,
    /// Map cells folded into one token cell, per axis.
    pub map_patch: [usize; 2],
    pub box_mode: BoxEncoderMode,
}

impl EncoderConfig {
    fn box_features(&self) -> usize {
        24 * (2 * self.fourier_freqs + 1)
    }
}

pub fn init_encoders(init: &mut Init<'_>, cfg: &EncoderConfig) -> Result<()> {
    let w = cfg.width;
    init.normal("box.class_emb", &[NUM_CLASSES, w], 1.0)?;
    init_mlp(init, "box.mlp", cfg.box_features() + w, w, w)?;
    init.normal("box.null", &[w], 1.0)?;
    init_temporal_transformer(init, "box.tt", w)?;
    init_mlp(init, "traj.mlp", POSE_FEATURES, w, w)?;
    init_temporal_transformer(init, "traj.tt", w)?;
    init_mlp(init, "cam.mlp", CAMERA_FEATURES, w, w)?;
    init.linear("map.patch", cfg.map_patch[0] * cfg.map_patch[1] * MAP_CHANNELS, w)?;
    init.linear("map.mid", w, w)?;
    for k in 0..cfg.control_depth {
        init.linear_zero(&format!("map.out{k}"), w, w)?;
    }
    for name in ["cam.null", "traj.null", "box.drop"] {
        init.normal(name, &[w], 1.0)?;
    }
    init.normal("ctx.source", &[SOURCES.len(), w], 0.1)
}

// ---------------------------------------------------------------- boxes

/// Slot-aligned boxes `[T, C, N]` with corner coordinates `[.., 8, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBoxes {
    pub frames: usize,
    pub views: usize,
    pub slots: usize,
    pub corners: Vec<f64>,
    pub classes: Vec<usize>,
    pub mask: Vec<bool>,
    pub track_ids: Vec<Option<u32>>,
}

impl PaddedBoxes {
    pub fn index(&self, t: usize, c: usize, n: usize) -> usize {
        (t * self.views + c) * self.slots + n
    }

    /// Visible-box count per view at frame `t`.
    pub fn visible_counts(&self, t: usize) -> Vec<usize> {
        (0..self.views)
            .map(|c| (0..self.slots).filter(|&n| self.mask[self.index(t, c, n)]).count())
            .collect()
    }

    /// Copy with `slots` slots; extra slots are masked padding.
    pub fn with_slots(&self, slots: usize) -> Result<Self> {
        if slots < self.slots {
            return Err(shape_err("boxes", format!("cannot shrink {} slots to {slots}", self.slots)));
        }
        let mut out = Self {
            frames: self.frames,
            views: self.views,
            slots,
            corners: vec![0.0; self.frames * self.views * slots * 24],
            classes: vec![0; self.frames * self.views * slots],
            mask: vec![false; self.frames * self.views * slots],
            track_ids: vec![None; self.frames * self.views * slots],
        };
        for t in 0..self.frames {
            for c in 0..self.views {
                for n in 0..self.slots {
                    let (i, j) = (self.index(t, c, n), out.index(t, c, n));
                    out.corners[j * 24..(j + 1) * 24].copy_from_slice(&self.corners[i * 24..(i + 1) * 24]);
                    out.classes[j] = self.classes[i];
                    out.mask[j] = self.mask[i];
                    out.track_ids[j] = self.track_ids[i];
                }
            }
        }
        Ok(out)
    }
}

/// Visible boxes per frame and view, `[t][c]`, using the any-corner rule.
pub fn visible_boxes(scene: &Scene) -> Vec<Vec<Vec<Box3D>>> {
    scene
        .frames
        .iter()
        .map(|f| {
            scene
                .cameras
                .iter()
                .map(|cam| {
                    f.boxes
                        .iter()
                        .filter(|b| project_box(b, cam, scene.image_height, scene.image_width).visible)
                        .cloned()
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Dense slot layout for ragged per-frame, per-view box lists.
///
/// Within a view, each track holds one slot from its first to its last
/// visible frame; a slot is reused only by tracks that start after the
/// previous holder's last frame. Frames where the holder is not visible
/// are masked and zeroed. `N_max` is the largest slot count over views,
/// at least 1.
pub fn pad_boxes(raw: &[Vec<Vec<Box3D>>]) -> Result<PaddedBoxes> {
    let frames = raw.len();
    let views = raw.first().map_or(0, Vec::len);
    if frames == 0 || views == 0 || raw.iter().any(|f| f.len() != views) {
        return Err(shape_err("boxes", "ragged or empty frame/view lists"));
    }
    // slot_of[c]: (track id, slot)
    let mut slot_of: Vec<Vec<(u32, usize)>> = Vec::with_capacity(views);
    let mut slots = 1;
    for c in 0..views {
        let mut spans: Vec<(usize, usize, u32)> = Vec::new();
        for (t, frame) in raw.iter().enumerate() {
            for b in &frame[c] {
                match spans.iter_mut().find(|s| s.2 == b.track_id) {
                    Some(s) => s.1 = t,
                    None => spans.push((t, t, b.track_id)),
                }
            }
        }
        spans.sort_unstable();
        let mut free_at: Vec<usize> = Vec::new();
        let mut assigned = Vec::with_capacity(spans.len());
        for (first, last, id) in spans {
            let slot = match free_at.iter().position(|&f| f <= first) {
                Some(s) => s,
                None => {
                    free_at.push(0);
                    free_at.len() - 1
                }
            };
            free_at[slot] = last + 1;
            assigned.push((id, slot));
        }
        slots = slots.max(free_at.len());
        slot_of.push(assigned);
    }
    let mut out = PaddedBoxes {
        frames,
        views,
        slots,
        corners: vec![0.0; frames * views * slots * 24],
        classes: vec![0; frames * views * slots],
        mask: vec![false; frames * views * slots],
        track_ids: vec![None; frames * views * slots],
    };
    for (t, frame) in raw.iter().enumerate() {
        for (c, list) in frame.iter().enumerate() {
            for b in list {
                let slot = slot_of[c].iter().find(|s| s.0 == b.track_id).expect("assigned").1;
                let i = out.index(t, c, slot);
                if out.mask[i] {
                    return Err(shape_err("boxes", format!("track {} listed twice", b.track_id)));
                }
                out.mask[i] = true;
                out.classes[i] = b.class;
                out.track_ids[i] = Some(b.track_id);
                for (k, p) in b.corners.iter().enumerate() {
                    out.corners[i * 24 + k * 3..i * 24 + k * 3 + 3].copy_from_slice(p);
                }
            }
        }
    }
    Ok(out)
}

fn fourier_features(corners: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(corners.len() * (2 * freqs + 1));
    for &x in corners {
        let v = x / SCENE_RADIUS;
        out.push(v);
        for f in 0..freqs {
            let a = (1u64 << f) as f64 * std::f64::consts::PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Row weights `[T', T]` and pooled mask `[T']` mapping frame tokens to
/// latent-frame tokens for one sequence with per-frame visibility `vis`.
pub fn alignment_weights(mode: BoxEncoderMode, vis: &[bool]) -> Result<(Vec<f64>, Vec<bool>)> {
    let t = vis.len();
    let windows = temporal_windows(t)?;
    let tl = windows.len();
    let mut w = vec![0.0; tl * t];
    let mut keep = vec![false; tl];
    let mut pool = |row: usize, range: std::ops::Range<usize>, w: &mut Vec<f64>| {
        let seen: Vec<usize> = range.clone().filter(|&j| vis[j]).collect();
        let src: Vec<usize> = if seen.is_empty() { range.collect() } else { seen };
        for &j in &src {
            w[row * t + j] = 1.0 / src.len() as f64;
        }
        keep[row] = src.iter().any(|&j| vis[j]);
    };
    match mode {
        BoxEncoderMode::Downsample4x => {
            for (k, r) in windows.into_iter().enumerate() {
                pool(k, r, &mut w);
            }
        }
        BoxEncoderMode::Reduce => {
            for k in 0..tl {
                pool(k, 0..t, &mut w);
            }
        }
        BoxEncoderMode::Interp => {
            for k in 0..tl {
                let pos = if tl == 1 { 0.0 } else { k as f64 * (t - 1) as f64 / (tl - 1) as f64 };
                let lo = pos.floor() as usize;
                let frac = pos - lo as f64;
                w[k * t + lo] += 1.0 - frac;
                keep[k] |= vis[lo];
                if frac > 0.0 {
                    w[k * t + lo + 1] += frac;
                    keep[k] |= vis[lo + 1];
                }
            }
        }
    }
    Ok((w, keep))
}

/// Box tokens `[B, T', C, N, W]` and their mask.
pub struct BoxTokenSeq<'g> {
    pub tokens: Var<'g>,
    pub mask: Vec<bool>,
    pub latent_frames: usize,
    pub slots: usize,
}

/// Spatial box embedding, temporal transformer over each `(view, slot)`
/// track, then alignment to latent frames according to `mode`. All inputs
/// must share `T`, `C` and `N`.
pub fn encode_boxes_st<'g>(
    p: &Bound<'g>,
    cfg: &EncoderConfig,
    boxes: &[&PaddedBoxes],
    mode: BoxEncoderMode,
) -> Result<BoxTokenSeq<'g>> {
    let first = boxes.first().ok_or_else(|| shape_err("boxes", "empty batch"))?;
    let (t, c, n) = (first.frames, first.views, first.slots);
    if boxes.iter().any(|b| (b.frames, b.views, b.slots) != (t, c, n)) {
        return Err(shape_err("boxes", "batch entries disagree on T, C or N"));
    }
    let tl = latent_frame_count(t)?;
    let b = boxes.len();
    let w = cfg.width;
    let rows = b * t * c * n;
    let g = p.graph();
    let nf = cfg.box_features();
    let mut feats = Vec::with_capacity(rows * nf);
    let mut classes = Vec::with_capacity(rows);
    let mut keep = Vec::with_capacity(rows);
    for pb in boxes {
        for i in 0..t * c * n {
            feats.extend(fourier_features(&pb.corners[i * 24..(i + 1) * 24], cfg.fourier_freqs));
            classes.push(pb.classes[i]);
            keep.push(pb.mask[i]);
        }
    }
    let fourier = g.constant(Tensor::new(&[rows, nf], feats)?);
    let class_emb = p.get("box.class_emb")?.select_rows(&classes)?;
    let h = p.mlp("box.mlp", concat(&[fourier, class_emb], 1)?)?;
    // Masked slots carry the null embedding and nothing of their content.
    let m = g.constant(Tensor::new(&[rows, 1], keep.iter().map(|&k| f64::from(u8::from(k))).collect())?);
    let inv = g.constant(Tensor::new(&[rows, 1], keep.iter().map(|&k| f64::from(u8::from(!k))).collect())?);
    let null = p.get("box.null")?.reshape(&[1, w])?;
    let h = h.mul(m)?.add(null.mul(inv)?)?;
    // [B, T, C, N, W] -> [B, C, N, T, W]
    let seq = h
        .reshape(&[b, t, c, n, w])?
        .permute(&[0, 2, 3, 1, 4])?
        .reshape(&[b * c * n, t, w])?;
    let mut seq_keep = vec![false; b * c * n * t];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                for ni in 0..n {
                    let src = ((bi * t + ti) * c + ci) * n + ni;
                    let dst = ((bi * c + ci) * n + ni) * t + ti;
                    seq_keep[dst] = keep[src];
                }
            }
        }
    }
    let seq = temporal_transformer(p, "box.tt", cfg.heads, seq, Some(&seq_keep))?;
    let mut weights = Vec::with_capacity(b * c * n * tl * t);
    let mut pooled_keep = vec![false; b * tl * c * n];
    for s in 0..b * c * n {
        let (wt, k) = alignment_weights(mode, &seq_keep[s * t..(s + 1) * t])?;
        weights.extend(wt);
        let (bi, rest) = (s / (c * n), s % (c * n));
        for (ki, &kk) in k.iter().enumerate() {
            pooled_keep[(bi * tl + ki) * c * n + rest] = kk;
        }
    }
    let a = g.constant(Tensor::new(&[b * c * n, tl, t], weights)?);
    let tokens = a
        .matmul(seq)?
        .reshape(&[b, c, n, tl, w])?
        .permute(&[0, 3, 1, 2, 4])?;
    Ok(BoxTokenSeq {
        tokens,
        mask: pooled_keep,
        latent_frames: tl,
        slots: n,
    })
}

// ---------------------------------------------------------------- trajectory

/// Pose perceptron, temporal transformer, then codec-window mean pooling.
/// `ego[b][t]` holds flattened rigid transforms. Returns `[B, T', W]`.
pub fn encode_trajectory_st<'g>(p: &Bound<'g>, cfg: &EncoderConfig, ego: &[Vec<[f64; 12]>]) -> Result<Var<'g>> {
    let t = ego.first().map_or(0, Vec::len);
    if ego.is_empty() || ego.iter().any(|e| e.len() != t) {
        return Err(shape_err("trajectory", "batch entries disagree on T"));
    }
    let windows = temporal_windows(t)?;
    let tl = windows.len();
    let b = ego.len();
    let g = p.graph();
    let data: Vec<f64> = ego.iter().flatten().flatten().copied().collect();
    let x = g.constant(Tensor::new(&[b, t, POSE_FEATURES], data)?);
    let h = p.mlp("traj.mlp", x)?;
    let h = temporal_transformer(p, "traj.tt", cfg.heads, h, None)?;
    let mut wts = vec![0.0; tl * t];
    for (k, r) in windows.into_iter().enumerate() {
        let len = r.len() as f64;
        for j in r {
            wts[k * t + j] = 1.0 / len;
        }
    }
    let a = g.constant(Tensor::new(&[tl, t], wts)?);
    Ok(a.matmul(h)?)
}

/// Validates and flattens ego transforms for [`encode_trajectory_st`].
pub fn trajectory_features(ego: &[EgoTransform]) -> Result<Vec<[f64; 12]>> {
    ego.iter()
        .map(|e| {
            e.validate()?;
            Ok(e.flatten())
        })
        .collect()
}

// ---------------------------------------------------------------- camera

/// Rotation (9), translation (3) and intrinsics scaled by the image size (4).
pub fn camera_features(cam: &CameraPose, height: usize, width: usize) -> Result<[f64; CAMERA_FEATURES]> {
    cam.validate()?;
    let mut f = [0.0; CAMERA_FEATURES];
    for (i, row) in cam.rotation.iter().enumerate() {
        f[i * 3..i * 3 + 3].copy_from_slice(row);
    }
    f[9..12].copy_from_slice(&cam.translation);
    let k = &cam.intrinsics;
    f[12] = k.fx / width as f64;
    f[13] = k.fy / height as f64;
    f[14] = k.cx / width as f64;
    f[15] = k.cy / height as f64;
    Ok(f)
}

/// One token per view, `[B, C, W]`.
pub fn encode_camera<'g>(p: &Bound<'g>, cams: &[Vec<[f64; CAMERA_FEATURES]>]) -> Result<Var<'g>> {
    let c = cams.first().map_or(0, Vec::len);
    if cams.is_empty() || c == 0 || cams.iter().any(|v| v.len() != c) {
        return Err(shape_err("camera", "batch entries disagree on view count"));
    }
    let data: Vec<f64> = cams.iter().flatten().flatten().copied().collect();
    let x = p.graph().constant(Tensor::new(&[cams.len(), c, CAMERA_FEATURES], data)?);
    p.mlp("cam.mlp", x)
}

// ---------------------------------------------------------------- text

/// Fixed, seeded embedding table over the scene vocabulary plus reserved
/// unknown and null rows. Not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTable {
    vocab: Vec<&'static str>,
    table: Tensor,
}

impl TextTable {
    pub fn new(width: usize) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let vocab: Vec<&'static str> = WEATHER_TOKENS
            .iter()
            .chain(&TIME_TOKENS)
            .chain(&SETTING_TOKENS)
            .copied()
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(TEXT_TABLE_SEED);
        let rows = vocab.len() + 2;
        let data = (0..rows * width).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            vocab,
            table: Tensor::new(&[rows, width], data)?,
        })
    }

    pub fn unknown_id(&self) -> usize {
        self.vocab.len()
    }

    pub fn null_id(&self) -> usize {
        self.vocab.len() + 1
    }

    /// Row ids for a prompt; an empty prompt is the single null row.
    pub fn ids(&self, prompt: &TextPrompt) -> Vec<usize> {
        if prompt.tokens.is_empty() {
            return vec![self.null_id()];
        }
        prompt
            .tokens
            .iter()
            .map(|t| self.vocab.iter().position(|v| v == t).unwrap_or(self.unknown_id()))
            .collect()
    }

    pub fn width(&self) -> usize {
        self.table.shape()[1]
    }

    /// Embeddings `[L, W]` for row ids.
    pub fn lookup(&self, ids: &[usize]) -> Tensor {
        let w = self.width();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(&self.table.data()[i * w..(i + 1) * w]);
        }
        Tensor::new(&[ids.len(), w], data).expect("non-empty ids")
    }
}

/// Embedding of a prompt, `[L, W]` with `L >= 1`.
pub fn encode_text(table: &TextTable, prompt: &TextPrompt) -> Tensor {
    table.lookup(&table.ids(prompt))
}

// ---------------------------------------------------------------- map

/// Map-branch features, one `[B, T', S, W]` tensor per control block.
pub struct MapFeatureSet<'g> {
    pub features: Vec<Var<'g>>,
    pub latent_frames: usize,
}

/// Patch projection onto the token grid, codec-window mean pooling over
/// time, a shared layer, then zero-initialized per-block projections.
/// `maps` is `[B, T, rows, cols, 4]`; `grid` the token grid `(rows, cols)`.
pub fn encode_map_st<'g>(
    p: &Bound<'g>,
    cfg: &EncoderConfig,
    maps: &Tensor,
    grid: (usize, usize),
) -> Result<MapFeatureSet<'g>> {
    let s = maps.shape();
    if s.len() != 5 || s[4] != MAP_CHANNELS {
        return Err(shape_err("map", format!("expected [B, T, rows, cols, 4], got {s:?}")));
    }
    let (b, t, rows, cols) = (s[0], s[1], s[2], s[3]);
    let [pr, pc] = cfg.map_patch;
    if rows != grid.0 * pr || cols != grid.1 * pc {
        return Err(shape_err(
            "map",
            format!(
                "map grid {rows}x{cols} is not the token grid {}x{} times the map patch {pr}x{pc}",
                grid.0, grid.1
            ),
        ));
    }
    let windows = temporal_windows(t)?;
    let tl = windows.len();
    let sn = grid.0 * grid.1;
    let w = cfg.width;
    let g = p.graph();
    let patches = g
        .constant(maps.clone())
        .reshape(&[b, t, grid.0, pr, grid.1, pc, MAP_CHANNELS])?
        .permute(&[0, 1, 2, 4, 3, 5, 6])?
        .reshape(&[b, t, sn * pr * pc * MAP_CHANNELS])?
        .reshape(&[b, t, sn, pr * pc * MAP_CHANNELS])?;
    let h = p.linear("map.patch", patches)?.gelu();
    let mut wts = vec![0.0; tl * t];
    for (k, r) in windows.into_iter().enumerate() {
        let len = r.len() as f64;
        for j in r {
            wts[k * t + j] = 1.0 / len;
        }
    }
    let a = g.constant(Tensor::new(&[tl, t], wts)?);
    let pooled = a
        .matmul(h.reshape(&[b, t, sn * w])?)?
        .reshape(&[b, tl, sn, w])?;
    let mid = p.linear("map.mid", pooled)?.gelu();
    let features = (0..cfg.control_depth)
        .map(|k| p.linear(&format!("map.out{k}"), mid))
        .collect::<Result<Vec<_>>>()?;
    Ok(MapFeatureSet {
        features,
        latent_frames: tl,
    })
}

// ---------------------------------------------------------------- context

/// Which sources are replaced by their null form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropFlags {
    pub text: bool,
    pub camera: bool,
    pub trajectory: bool,
    pub boxes: bool,
    pub map: bool,
}

impl DropFlags {
    pub const ALL: DropFlags = DropFlags {
        text: true,
        camera: true,
        trajectory: true,
        boxes: true,
        map: true,
    };

    pub fn as_array(&self) -> [bool; 5] {
        [self.text, self.camera, self.trajectory, self.boxes, self.map]
    }
}

/// Graph-free conditions for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct CondInputs {
    pub frames: usize,
    pub views: usize,
    pub text: TextPrompt,
    pub cameras: Vec<[f64; CAMERA_FEATURES]>,
    pub ego: Vec<[f64; 12]>,
    pub boxes: PaddedBoxes,
    /// `[T, rows, cols, 4]` in `{0, 1}`.
    pub maps: Tensor,
    pub dropped: DropFlags,
}

impl CondInputs {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let t = scene.num_frames();
        latent_frame_count(t)?;
        let cameras = scene
            .cameras
            .iter()
            .map(|c| camera_features(c, scene.image_height, scene.image_width))
            .collect::<Result<Vec<_>>>()?;
        let ego = trajectory_features(&scene.frames.iter().map(|f| f.ego).collect::<Vec<_>>())?;
        let boxes = pad_boxes(&visible_boxes(scene))?;
        let m0 = &scene.frames[0].map;
        let mut maps = Vec::with_capacity(t * m0.cells().len());
        for f in &scene.frames {
            if (f.map.rows, f.map.cols) != (m0.rows, m0.cols) {
                return Err(shape_err("map", "map size changes within the clip"));
            }
            maps.extend(f.map.cells().iter().map(|&v| f64::from(v)));
        }
        Ok(Self {
            frames: t,
            views: scene.num_views(),
            text: scene.frames[0].text.clone(),
            cameras,
            ego,
            boxes,
            maps: Tensor::new(&[t, m0.rows, m0.cols, MAP_CHANNELS], maps)?,
            dropped: DropFlags::default(),
        })
    }

    /// Replaces the selected sources by their null forms; a dropped map
    /// becomes an all-zero raster.
    pub fn with_dropped(&self, flags: DropFlags) -> Self {
        let mut out = self.clone();
        out.dropped = flags;
        if flags.map {
            out.maps = Tensor::zeros(self.maps.shape()).expect("valid shape");
        }
        out
    }
}

/// Cross-attention context and additive map features for a batch.
pub struct CondContext<'g> {
    /// `[B, T', C, L, W]`.
    pub tokens: Var<'g>,
    /// Key mask `[B, T', C, L]`.
    pub mask: Vec<bool>,
    pub map: MapFeatureSet<'g>,
    pub nulls: Vec<DropFlags>,
    pub latent_frames: usize,
    pub views: usize,
}

impl CondContext<'_> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[3]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn select_per_sample<'g>(
    real: Var<'g>,
    null: Var<'g>,
    dropped: &[bool],
) -> Result<Var<'g>> {
    let s = real.shape();
    let g = real.graph();
    let inner: usize = s[1..].iter().product();
    let keep: Vec<f64> = dropped.iter().flat_map(|&d| std::iter::repeat_n(f64::from(u8::from(!d)), inner)).collect();
    let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let keep = g.constant(Tensor::new(&s, keep)?);
    let drop = g.constant(Tensor::new(&s, drop)?);
    Ok(real.mul(keep)?.add(null.broadcast_to(&s)?.mul(drop)?)?)
}

/// Encodes every source and assembles text ⊕ camera ⊕ trajectory ⊕ boxes
/// per `(latent frame, view)` with source-type embeddings.
pub fn build_context<'g>(
    p: &Bound<'g>,
    cfg: &EncoderConfig,
    text_table: &TextTable,
    inputs: &[&CondInputs],
    grid: (usize, usize),
) -> Result<CondContext<'g>> {
    let first = inputs.first().ok_or_else(|| shape_err("conditions", "empty batch"))?;
    let (t, c) = (first.frames, first.views);
    if inputs.iter().any(|x| (x.frames, x.views) != (t, c)) {
        return Err(shape_err("conditions", "batch entries disagree on T or C"));
    }
    let tl = latent_frame_count(t)?;
    let b = inputs.len();
    let w = cfg.width;
    let g = p.graph();
    let source = p.get("ctx.source")?;
    let src = |i: usize| -> Result<Var<'g>> { Ok(source.narrow(0, i, i + 1)?.reshape(&[w])?) };

    // Text: [B, Lt, W] padded with masked rows.
    let ids: Vec<Vec<usize>> = inputs
        .iter()
        .map(|x| {
            if x.dropped.text {
                vec![text_table.null_id()]
            } else {
                text_table.ids(&x.text)
            }
        })
        .collect();
    let lt = ids.iter().map(Vec::len).max().unwrap_or(1);
    let mut text = Vec::with_capacity(b * lt * w);
    let mut text_keep = Vec::with_capacity(b * lt);
    for row in &ids {
        text.extend_from_slice(text_table.lookup(row).data());
        text.extend(std::iter::repeat_n(0.0, (lt - row.len()) * w));
        text_keep.extend((0..lt).map(|i| i < row.len()));
    }
    let text = g.constant(Tensor::new(&[b, lt, w], text)?).add(src(0)?)?;

    let drops: Vec<DropFlags> = inputs.iter().map(|x| x.dropped).collect();
    let pick = |f: fn(&DropFlags) -> bool| drops.iter().map(f).collect::<Vec<_>>();

    let cams: Vec<_> = inputs.iter().map(|x| x.cameras.clone()).collect();
    let cam = encode_camera(p, &cams)?;
    let cam = select_per_sample(cam, p.get("cam.null")?, &pick(|d| d.camera))?.add(src(1)?)?;

    let ego: Vec<_> = inputs.iter().map(|x| x.ego.clone()).collect();
    let traj = encode_trajectory_st(p, cfg, &ego)?;
    let traj = select_per_sample(traj, p.get("traj.null")?, &pick(|d| d.trajectory))?.add(src(2)?)?;

    // Boxes: pad slots to the batch maximum; dropped samples keep only a
    // null token in slot 0.
    let n = inputs.iter().map(|x| x.boxes.slots).max().unwrap_or(1);
    let padded = inputs
        .iter()
        .map(|x| x.boxes.with_slots(n))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PaddedBoxes> = padded.iter().collect();
    let boxes = encode_boxes_st(p, cfg, &refs, cfg.box_mode)?;
    let per = tl * c * n;
    let mut box_keep = boxes.mask.clone();
    for (bi, d) in drops.iter().enumerate() {
        if d.boxes {
            for j in 0..per {
                box_keep[bi * per + j] = j % n == 0;
            }
        }
    }
    let box_tok = select_per_sample(boxes.tokens, p.get("box.drop")?, &pick(|d| d.boxes))?.add(src(3)?)?;

    // Assemble [B, T', C, L, W].
    let text_b = text.reshape(&[b, 1, 1, lt, w])?.broadcast_to(&[b, tl, c, lt, w])?;
    let cam_b = cam.reshape(&[b, 1, c, 1, w])?.broadcast_to(&[b, tl, c, 1, w])?;
    let traj_b = traj.reshape(&[b, tl, 1, 1, w])?.broadcast_to(&[b, tl, c, 1, w])?;
    let tokens = concat(&[text_b, cam_b, traj_b, box_tok], 3)?;
    let l = lt + 2 + n;
    let mut mask = Vec::with_capacity(b * tl * c * l);
    for bi in 0..b {
        for ti in 0..tl {
            for ci in 0..c {
                mask.extend_from_slice(&text_keep[bi * lt..(bi + 1) * lt]);
                mask.extend([true, true]);
                let base = ((bi * tl + ti) * c + ci) * n;
                mask.extend_from_slice(&box_keep[base..base + n]);
            }
        }
    }

    let map_shape = first.maps.shape().to_vec();
    let mut maps = Vec::with_capacity(b * first.maps.len());
    for x in inputs {
        if x.maps.shape() != map_shape.as_slice() {
            return Err(shape_err("map", "batch entries disagree on map size"));
        }
        maps.extend_from_slice(x.maps.data());
    }
    let mut ms = vec![b];
    ms.extend(map_shape);
    let map = encode_map_st(p, cfg, &Tensor::new(&ms, maps)?, grid)?;

    Ok(CondContext {
        tokens,
        mask,
        map,
        nulls: drops,
        latent_frames: tl,
        views: c,
    })
}

/// Mask for cross-attention scores `[B * T' * C, heads, S, L]`.
pub fn context_mask(ctx: &CondContext<'_>) -> Result<Mask> {
    let s = ctx.tokens.shape();
    Ok(Mask::new(&[s[0] * s[1] * s[2], 1, 1, s[3]], ctx.mask.clone())?)
}
