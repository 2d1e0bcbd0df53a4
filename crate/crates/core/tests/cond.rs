use mvd_core::codec::latent_frame_count;
use mvd_core::cond::{
    alignment_weights, build_context, camera_features, encode_boxes_st, encode_camera, encode_map_st, encode_text,
    encode_trajectory_st, pad_boxes, BoxEncoderMode, CondInputs, DropFlags, PaddedBoxes, TextTable,
};
use mvd_core::mvdit::{init_params, ModelConfig};
use mvd_core::params::{Bound, ParamStore};
use mvd_core::scene::{synth_scene, Box3D, CameraPose, EgoTransform, Intrinsics, SceneKnobs, TextPrompt};
use mvd_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ADMISSIBLE: [usize; 7] = [1, 8, 9, 16, 17, 32, 33];

fn small_cfg() -> ModelConfig {
    ModelConfig {
        depth: 2,
        control_depth: 2,
        width: 16,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn store() -> ParamStore {
    init_params(&small_cfg(), 11).unwrap()
}

fn car(id: u32, x: f64, y: f64) -> Box3D {
    Box3D::from_center(id, 0, [x, y, 0.8], [4.5, 1.9, 1.6], 0.0)
}

/// One view, one car per frame moving along x at constant speed.
fn moving_box(frames: usize) -> PaddedBoxes {
    let raw: Vec<Vec<Vec<Box3D>>> = (0..frames).map(|t| vec![vec![car(1, 10.0 + 0.8 * t as f64, 1.0)]]).collect();
    pad_boxes(&raw).unwrap()
}

fn random_boxes(frames: usize, views: usize, rng: &mut ChaCha8Rng) -> PaddedBoxes {
    let raw: Vec<Vec<Vec<Box3D>>> = (0..frames)
        .map(|t| {
            (0..views)
                .map(|c| {
                    let mut list = Vec::new();
                    for id in 0..3u32 {
                        if rng.random::<f64>() < 0.6 || (t + c) % 3 == id as usize {
                            list.push(car(id, rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)));
                        }
                    }
                    list
                })
                .collect()
        })
        .collect();
    pad_boxes(&raw).unwrap()
}

fn tensor_rows(t: &Tensor, width: usize) -> Vec<Vec<f64>> {
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn pad_boxes_counts_and_floor() {
    let raw = vec![vec![
        vec![car(1, 10.0, 0.0), car(2, 12.0, 3.0)],
        vec![],
        vec![car(3, 0.0, 10.0), car(4, 2.0, 14.0), car(5, -3.0, 12.0)],
    ]];
    let pb = pad_boxes(&raw).unwrap();
    assert_eq!(pb.slots, 3);
    assert_eq!(pb.visible_counts(0), vec![2, 0, 3]);
    for i in 0..pb.mask.len() {
        if !pb.mask[i] {
            assert!(pb.corners[i * 24..(i + 1) * 24].iter().all(|&v| v == 0.0));
            assert_eq!(pb.track_ids[i], None);
        }
    }

    let empty = vec![vec![vec![], vec![]]; 9];
    let pb = pad_boxes(&empty).unwrap();
    assert_eq!(pb.slots, 1);
    assert!(pb.mask.iter().all(|m| !m));
}

#[test]
fn pad_boxes_keeps_slots_stable() {
    // Ids 7 and 9 over 17 frames; 9 disappears at frame 8, 11 arrives at 12.
    // List order alternates so position in the list carries no identity.
    let raw: Vec<Vec<Vec<Box3D>>> = (0..17)
        .map(|t| {
            let mut list = vec![car(7, 10.0 + t as f64, 0.0)];
            if t < 8 {
                list.push(car(9, 15.0, 3.0 - 0.2 * t as f64));
            }
            if t >= 12 {
                list.push(car(11, 20.0, -4.0));
            }
            if t % 2 == 1 {
                list.reverse();
            }
            vec![list]
        })
        .collect();
    let pb = pad_boxes(&raw).unwrap();

    // Replay: an object's slot is the one it was first seen in.
    let mut first_slot = std::collections::HashMap::new();
    for (t, frame) in raw.iter().enumerate() {
        let seen: Vec<u32> = frame[0].iter().map(|b| b.track_id).collect();
        for n in 0..pb.slots {
            let i = pb.index(t, 0, n);
            match pb.track_ids[i] {
                Some(id) => {
                    assert!(pb.mask[i]);
                    assert!(seen.contains(&id));
                    let slot = *first_slot.entry(id).or_insert(n);
                    assert_eq!(slot, n, "track {id} moved slot at frame {t}");
                    let b = frame[0].iter().find(|b| b.track_id == id).unwrap();
                    assert_eq!(pb.corners[i * 24], b.corners[0][0]);
                }
                None => assert!(!pb.mask[i]),
            }
        }
        assert_eq!(pb.visible_counts(t), vec![seen.len()]);
    }
    assert_ne!(first_slot[&7], first_slot[&9]);
}

#[test]
fn every_time_varying_encoder_aligns_with_the_codec() {
    let s = store();
    let cfg = small_cfg().encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &t in &ADMISSIBLE {
        let tl = latent_frame_count(t).unwrap();
        let g = Graph::new();
        let p = Bound::new(&s, &g, false);
        let pb = random_boxes(t, 2, &mut rng);
        for mode in BoxEncoderMode::ALL {
            let seq = encode_boxes_st(&p, &cfg, &[&pb, &pb], mode).unwrap();
            assert_eq!(seq.tokens.shape(), vec![2, tl, 2, pb.slots, 16], "T={t} {mode}");
            assert_eq!(seq.latent_frames, tl);
            assert_eq!(seq.mask.len(), 2 * tl * 2 * pb.slots);
        }
        let ego = vec![vec![EgoTransform::identity().flatten(); t]];
        assert_eq!(encode_trajectory_st(&p, &cfg, &ego).unwrap().shape(), vec![1, tl, 16]);
        let maps = Tensor::zeros(&[1, t, 8, 12, 4]).unwrap();
        let m = encode_map_st(&p, &cfg, &maps, (2, 3)).unwrap();
        assert_eq!(m.latent_frames, tl);
        assert_eq!(m.features.len(), 2);
        for f in &m.features {
            assert_eq!(f.shape(), vec![1, tl, 6, 16]);
        }
    }
}

#[test]
fn inadmissible_lengths_and_modes_are_rejected() {
    let s = store();
    let cfg = small_cfg().encoder();
    let g = Graph::new();
    let p = Bound::new(&s, &g, false);
    let pb = moving_box(5);
    assert!(encode_boxes_st(&p, &cfg, &[&pb], BoxEncoderMode::Downsample4x).is_err());
    let ego = vec![vec![EgoTransform::identity().flatten(); 12]];
    assert!(encode_trajectory_st(&p, &cfg, &ego).is_err());
    let maps = Tensor::zeros(&[1, 10, 8, 12, 4]).unwrap();
    assert!(encode_map_st(&p, &cfg, &maps, (2, 3)).is_err());
    assert!("nearest".parse::<BoxEncoderMode>().is_err());
    assert_eq!("interp".parse::<BoxEncoderMode>().unwrap(), BoxEncoderMode::Interp);
    assert_eq!("downsample4x".parse::<BoxEncoderMode>().unwrap(), BoxEncoderMode::Downsample4x);
}

#[test]
fn reduce_repeats_while_downsample_keeps_motion() {
    let s = store();
    let cfg = small_cfg().encoder();
    let g = Graph::new();
    let p = Bound::new(&s, &g, false);
    let pb = moving_box(17);

    let reduce = encode_boxes_st(&p, &cfg, &[&pb], BoxEncoderMode::Reduce).unwrap();
    let rows = tensor_rows(&reduce.tokens.value(), 16);
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        assert_eq!(r, &rows[0]);
    }

    let down = encode_boxes_st(&p, &cfg, &[&pb], BoxEncoderMode::Downsample4x).unwrap();
    let rows = tensor_rows(&down.tokens.value(), 16);
    for k in 0..4 {
        assert!(dist(&rows[k], &rows[k + 1]) > 1e-6, "latent frames {k} and {} coincide", k + 1);
    }
    // Variance as half the mean squared pairwise distance.
    let variance = |rows: &[Vec<f64>]| {
        let n = rows.len() as f64;
        let mut acc = 0.0;
        for a in rows {
            for b in rows {
                acc += dist(a, b).powi(2);
            }
        }
        acc / (2.0 * n * n)
    };
    assert!(variance(&rows) > 0.0);
    assert_eq!(variance(&tensor_rows(&reduce.tokens.value(), 16)), 0.0);
}

#[test]
fn alignment_weights_follow_the_window_rule() {
    let vis = vec![true; 9];
    let (w, keep) = alignment_weights(BoxEncoderMode::Downsample4x, &vis).unwrap();
    assert_eq!(keep, vec![true; 3]);
    assert_eq!(&w[0..9], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(&w[9..18], &[0.0, 0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0]);
    let (w, _) = alignment_weights(BoxEncoderMode::Interp, &vis).unwrap();
    assert_eq!(&w[9..18], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    for mode in BoxEncoderMode::ALL {
        let (w, _) = alignment_weights(mode, &vis).unwrap();
        for row in w.chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
    // A box seen only in the middle window pools only those frames.
    let mut vis = vec![false; 9];
    vis[2] = true;
    let (w, keep) = alignment_weights(BoxEncoderMode::Downsample4x, &vis).unwrap();
    assert_eq!(keep, vec![false, true, false]);
    assert_eq!(w[9 + 2], 1.0);
}

#[test]
fn masked_slot_contents_never_leak() {
    let s = store();
    let cfg = small_cfg().encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..6 {
        let t = [9, 16, 17][trial % 3];
        let pb = random_boxes(t, 2, &mut rng).with_slots(4).unwrap();
        let mut fuzzed = pb.clone();
        for i in 0..pb.mask.len() {
            if !pb.mask[i] {
                for v in &mut fuzzed.corners[i * 24..(i + 1) * 24] {
                    *v = rng.random_range(-100.0..100.0);
                }
                fuzzed.classes[i] = rng.random_range(0..3);
            }
        }
        assert_ne!(pb.corners, fuzzed.corners);
        let g = Graph::new();
        let p = Bound::new(&s, &g, false);
        for mode in BoxEncoderMode::ALL {
            let a = encode_boxes_st(&p, &cfg, &[&pb], mode).unwrap();
            let b = encode_boxes_st(&p, &cfg, &[&fuzzed], mode).unwrap();
            assert_eq!(a.mask, b.mask);
            assert_eq!(*a.tokens.value(), *b.tokens.value(), "trial {trial} {mode}");
        }
    }
}

#[test]
fn map_branch_is_zero_at_init_and_time_constant_for_static_maps() {
    let mut s = store();
    let cfg = small_cfg().encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frame: Vec<f64> = (0..8 * 12 * 4).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
    let maps = Tensor::new(&[1, 33, 8, 12, 4], frame.repeat(33)).unwrap();
    {
        let g = Graph::new();
        let p = Bound::new(&s, &g, false);
        let m = encode_map_st(&p, &cfg, &maps, (2, 3)).unwrap();
        assert_eq!(m.latent_frames, 9);
        for f in &m.features {
            assert!(f.value().data().iter().all(|&v| v == 0.0));
        }
        assert!(encode_map_st(&p, &cfg, &maps, (3, 3)).is_err());
    }
    for k in 0..2 {
        let name = format!("map.out{k}.w");
        let w = Tensor::from_fn(&[16, 16], |_| rng.random_range(-0.5..0.5)).unwrap();
        s.set(&name, w).unwrap();
    }
    let g = Graph::new();
    let p = Bound::new(&s, &g, false);
    let m = encode_map_st(&p, &cfg, &maps, (2, 3)).unwrap();
    for f in &m.features {
        let v = f.value();
        let per = 6 * 16;
        assert!(v.data().iter().any(|&x| x != 0.0));
        for k in 1..9 {
            for j in 0..per {
                let (a, b) = (v.data()[j], v.data()[k * per + j]);
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "frame {k} differs");
            }
        }
    }
}

#[test]
fn stationary_trajectory_gives_identical_tokens() {
    let s = store();
    let cfg = small_cfg().encoder();
    let g = Graph::new();
    let p = Bound::new(&s, &g, false);
    let ego = vec![vec![EgoTransform::identity().flatten(); 17]];
    let out = encode_trajectory_st(&p, &cfg, &ego).unwrap();
    let rows = tensor_rows(&out.value(), 16);
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        for (a, b) in r.iter().zip(&rows[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn straight_motion_is_monotone_along_the_first_principal_direction() {
    let mut s = store();
    let w = 16;
    // Identity perceptron into the first 12 features, and a transformer
    // whose residual branches are switched off.
    let eye = |rows: usize| Tensor::from_fn(&[rows, w], |i| f64::from(u8::from(i / w == i % w))).unwrap();
    s.set("traj.mlp.0.w", eye(12)).unwrap();
    s.set("traj.mlp.1.w", eye(w)).unwrap();
    s.set("traj.tt.attn.o.w", Tensor::zeros(&[w, w]).unwrap()).unwrap();
    s.set("traj.tt.mlp.1.w", Tensor::zeros(&[2 * w, w]).unwrap()).unwrap();
    let cfg = small_cfg().encoder();
    let g = Graph::new();
    let p = Bound::new(&s, &g, false);
    let ego = vec![(0..33).map(|t| EgoTransform::planar(0.4 * t as f64, 0.0, 0.0).flatten()).collect::<Vec<_>>()];
    let rows = tensor_rows(&encode_trajectory_st(&p, &cfg, &ego).unwrap().value(), w);
    assert_eq!(rows.len(), 9);

    // Power iteration on the token covariance.
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..w).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut v = vec![1.0; w];
    for _ in 0..200 {
        let mut nv = vec![0.0; w];
        for r in &centered {
            let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            for j in 0..w {
                nv[j] += d * r[j];
            }
        }
        let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = nv.iter().map(|x| x / norm).collect();
    }
    let proj: Vec<f64> = rows.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
    let up = proj.windows(2).all(|p| p[1] > p[0]);
    let down = proj.windows(2).all(|p| p[1] < p[0]);
    assert!(up || down, "projection {proj:?}");
}

fn intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 28.0,
        fy: 28.0,
        cx: 28.0,
        cy: 16.0,
    }
}

#[test]
fn camera_tokens_follow_the_views() {
    let s = store();
    let g = Graph::new();
    let p = Bound::new(&s, &g, false);
    let cams: Vec<CameraPose> = (0..3)
        .map(|c| CameraPose::looking(c as f64 * 2.1, 1.0, 1.6, intrinsics()))
        .collect();
    let feats: Vec<_> = cams.iter().map(|c| camera_features(c, 32, 56).unwrap()).collect();
    let out = encode_camera(&p, std::slice::from_ref(&feats)).unwrap();
    assert_eq!(out.shape(), vec![1, 3, 16]);
    let rows = tensor_rows(&out.value(), 16);
    assert!(dist(&rows[0], &rows[1]) > 0.0);

    let perm = [2, 0, 1];
    let permuted: Vec<_> = perm.iter().map(|&i| feats[i]).collect();
    let prow = tensor_rows(&encode_camera(&p, &[permuted]).unwrap().value(), 16);
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(prow[k], rows[i]);
    }

    let same = encode_camera(&p, &[vec![feats[1], feats[1]]]).unwrap();
    let same = tensor_rows(&same.value(), 16);
    assert_eq!(same[0], same[1]);
}

#[test]
fn text_lookup_contract() {
    let table = TextTable::new(16).unwrap();
    let rainy = TextPrompt::new(["rainy", "day"]);
    assert_eq!(encode_text(&table, &rainy), encode_text(&table, &rainy));
    let empty = encode_text(&table, &TextPrompt::default());
    assert_eq!(empty, table.lookup(&[table.null_id()]));
    let a = encode_text(&table, &TextPrompt::new(["rainy"]));
    let b = encode_text(&table, &TextPrompt::new(["sunny"]));
    assert!(dist(a.data(), b.data()) > 0.0);
    let unk = encode_text(&table, &TextPrompt::new(["snowy"]));
    assert_eq!(unk, table.lookup(&[table.unknown_id()]));
    assert_eq!(TextTable::new(16).unwrap(), table);
}

#[test]
fn context_layout_and_drops() {
    let s = store();
    let cfg = small_cfg().encoder();
    let table = TextTable::new(16).unwrap();
    let knobs = SceneKnobs::default();
    let scene = synth_scene(4, 17, 2, &knobs).unwrap();
    let inputs = CondInputs::from_scene(&scene).unwrap();
    let dropped = inputs.with_dropped(DropFlags {
        boxes: true,
        map: true,
        ..DropFlags::default()
    });
    assert!(dropped.maps.data().iter().all(|&v| v == 0.0));
    let g = Graph::new();
    let p = Bound::new(&s, &g, false);
    let ctx = build_context(&p, &cfg, &table, &[&inputs, &dropped], (4, 7)).unwrap();
    let shape = ctx.tokens.shape();
    let n = inputs.boxes.slots;
    let lt = scene.frames[0].text.tokens.len().max(1);
    assert_eq!(shape, vec![2, 5, 2, lt + 2 + n, 16]);
    assert_eq!(ctx.mask.len(), 2 * 5 * 2 * (lt + 2 + n));
    assert_eq!(ctx.latent_frames, 5);
    assert_eq!(ctx.map.features[0].shape(), vec![2, 5, 28, 16]);
    // The dropped sample keeps exactly one box key per (frame, view).
    let l = lt + 2 + n;
    for row in ctx.mask[5 * 2 * l..].chunks(l) {
        assert!(row[..lt + 2].iter().all(|&m| m));
        assert!(row[lt + 2]);
        assert!(row[lt + 3..].iter().all(|&m| !m));
    }
    // A dropped box source is the same learned token wherever it appears.
    let v = ctx.tokens.value();
    let tok = |b: usize, t: usize, c: usize, j: usize| {
        let o = ((((b * 5 + t) * 2 + c) * l) + j) * 16;
        v.data()[o..o + 16].to_vec()
    };
    assert_eq!(tok(1, 0, 0, lt + 2), tok(1, 4, 1, lt + 2));
}
