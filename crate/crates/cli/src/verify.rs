//! Registry of invariant checks behind `verify`. Every check carries its
//! own oracle and reports a one-line detail.

use std::time::Instant;

use mvd_core::codec::{latent_frame_count, psnr, temporal_windows, Codec, CodecSpec};
use mvd_core::cond::{
    alignment_weights, encode_boxes_st, encode_map_st, encode_trajectory_st, pad_boxes, BoxEncoderMode, CondInputs,
    DropFlags,
};
use mvd_core::flow::{cfg_combine, draw_flow_sample, drop_conditions, euler_sample, interpolate, velocity_loss, SamplerConfig};
use mvd_core::mvdit::{init_params, ForwardOptions, ModelConfig};
use mvd_core::params::{Bound, ParamStore};
use mvd_core::scene::{synth_scene, Box3D, EgoTransform, SceneKnobs};
use mvd_core::train::Model;
use mvd_core::video::VideoClip;
use mvd_sched::bucket::{
    assign_buckets, bucketize, epoch_batches, plan_buckets, repeat_sparse, BucketSpec, Repeated,
};
use mvd_sched::sp::{reference_attention, sp_attention_forward, AttentionWeights};
use mvd_tensor::{attention, concat, Graph, Mask, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Latent-length contract inputs: 1, 8n and 8n+1 up to long clips.
pub const ALIGN_LENGTHS: [usize; 9] = [1, 8, 9, 16, 17, 33, 65, 129, 241];
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const SP_FORWARD_TOL: f64 = 1e-10;
pub const SP_GRAD_TOL: f64 = 1e-8;
/// Multi-step Euler accumulates roundoff in `z += dt * v`.
pub const EULER_TOL: f64 = 1e-12;
pub const CODEC_TOL: f64 = 1e-9;
pub const DROP_TRIALS: usize = 10_000;

/// Deliberate defects that must make a named property fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Moves the first frame of one downsampling window into its
    /// neighbour.
    WindowFlip,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "window-flip" => Ok(Self::WindowFlip),
            _ => Err(format!("unknown fault `{s}` (known: window-flip)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub fault: Option<Fault>,
}

type Outcome = Result<String, String>;

pub struct Property {
    pub name: &'static str,
    pub check: fn(&VerifyOptions) -> Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub property: String,
    pub pass: bool,
    pub detail: String,
    pub ms: u64,
}

pub fn registry() -> Vec<Property> {
    let p = |name, check| Property { name, check };
    vec![
        p("shape.latent_frames", latent_frames as fn(&VerifyOptions) -> Outcome),
        p("alignment.st_encoders", st_encoders),
        p("alignment.downsample_windows", downsample_windows),
        p("grad.primitives", grad_primitives),
        p("grad.end_to_end", grad_end_to_end),
        p("sp.equivalence", sp_equivalence),
        p("sched.batch_sizes", sched_batch_sizes),
        p("sched.single_type", sched_single_type),
        p("sched.repeat_sparse", sched_repeat_sparse),
        p("sched.conservation", sched_conservation),
        p("flow.endpoints", flow_endpoints),
        p("flow.euler_exact", flow_euler_exact),
        p("flow.cfg_identity", flow_cfg_identity),
        p("flow.drop_rate", flow_drop_rate),
        p("codec.roundtrip", codec_roundtrip),
        p("codec.psnr", codec_psnr),
    ]
}

/// Runs the properties whose names start with any of `filters` (all when
/// empty), in registry order.
pub fn run_properties(opts: &VerifyOptions, filters: &[String]) -> Vec<PropertyResult> {
    registry()
        .into_iter()
        .filter(|p| filters.is_empty() || filters.iter().any(|f| p.name.starts_with(f.as_str())))
        .map(|p| {
            let start = Instant::now();
            let out = (p.check)(opts);
            PropertyResult {
                property: p.name.to_string(),
                pass: out.is_ok(),
                detail: out.unwrap_or_else(|e| e),
                ms: start.elapsed().as_millis() as u64,
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

/// 8n -> 2n, 8n+1 -> 2n+1, 1 -> 1.
pub fn expected_latent_frames(t: usize) -> usize {
    if t.is_multiple_of(8) {
        t / 4
    } else {
        (t - 1) / 4 + 1
    }
}

/// Frames pooled into each latent frame: a lone first frame for odd
/// lengths, then consecutive groups of four.
pub fn expected_windows(t: usize) -> Vec<Vec<usize>> {
    let lead = usize::from(t % 2 == 1);
    let mut out: Vec<Vec<usize>> = if lead == 1 { vec![vec![0]] } else { vec![] };
    let mut start = lead;
    while start < t {
        out.push((start..start + 4).collect());
        start += 4;
    }
    out
}

// ---------------------------------------------------------------- shapes

fn latent_frames(_: &VerifyOptions) -> Outcome {
    for t in ALIGN_LENGTHS {
        let want = expected_latent_frames(t);
        let got = latent_frame_count(t).map_err(err)?;
        ensure(got == want, || format!("T={t}: latent_frame_count {got}, expected {want}"))?;
        let windows = temporal_windows(t).map_err(err)?;
        ensure(windows.len() == want, || format!("T={t}: {} windows", windows.len()))?;
        let flat: Vec<usize> = windows.into_iter().flatten().collect();
        ensure(flat == (0..t).collect::<Vec<_>>(), || format!("T={t}: windows do not partition the clip"))?;
    }
    for t in [0, 2, 7, 10, 15] {
        ensure(latent_frame_count(t).is_err(), || format!("T={t} accepted"))?;
    }
    Ok(format!("{} lengths map 8n->2n, 8n+1->2n+1, 1->1", ALIGN_LENGTHS.len()))
}

fn encoder_config() -> ModelConfig {
    ModelConfig {
        depth: 1,
        control_depth: 1,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        fourier_freqs: 1,
        ..ModelConfig::default()
    }
}

fn st_encoders(_: &VerifyOptions) -> Outcome {
    let cfg = encoder_config();
    let store = init_params(&cfg, 1).map_err(err)?;
    let enc = cfg.encoder();
    for t in ALIGN_LENGTHS {
        let want = expected_latent_frames(t);
        let g = Graph::new();
        let p = Bound::new(&store, &g, false);
        let raw: Vec<Vec<Vec<Box3D>>> = (0..t)
            .map(|i| vec![vec![Box3D::from_center(1, 0, [8.0 + 0.5 * i as f64, 1.0, 0.8], [4.5, 1.9, 1.6], 0.0)]])
            .collect();
        let pb = pad_boxes(&raw).map_err(err)?;
        for mode in BoxEncoderMode::ALL {
            let seq = encode_boxes_st(&p, &enc, &[&pb], mode).map_err(err)?;
            let got = seq.tokens.shape()[1];
            ensure(got == want, || format!("boxes {mode} T={t}: {got} latent frames, expected {want}"))?;
        }
        let ego = vec![vec![EgoTransform::identity().flatten(); t]];
        let traj = encode_trajectory_st(&p, &enc, &ego).map_err(err)?.shape()[1];
        ensure(traj == want, || format!("trajectory T={t}: {traj}, expected {want}"))?;
        let maps = Tensor::zeros(&[1, t, 4, 4, 4]).map_err(err)?;
        let m = encode_map_st(&p, &enc, &maps, (1, 1)).map_err(err)?;
        ensure(m.latent_frames == want, || format!("map T={t}: {}, expected {want}", m.latent_frames))?;
        for f in &m.features {
            ensure(f.shape()[1] == want, || format!("map feature T={t}: {:?}", f.shape()))?;
        }
    }
    Ok(format!("boxes (3 modes), trajectory and map over {} lengths", ALIGN_LENGTHS.len()))
}

fn downsample_windows(opts: &VerifyOptions) -> Outcome {
    for t in ALIGN_LENGTHS {
        let vis = vec![true; t];
        let (mut w, _) = alignment_weights(BoxEncoderMode::Downsample4x, &vis).map_err(err)?;
        let windows = expected_windows(t);
        if opts.fault == Some(Fault::WindowFlip) && windows.len() >= 2 {
            let j = windows[1][0];
            w[t + j] = 0.0;
            w[j] = 1.0;
        }
        for (k, win) in windows.iter().enumerate() {
            let row = &w[k * t..(k + 1) * t];
            for (j, &v) in row.iter().enumerate() {
                let want = if win.contains(&j) { 1.0 / win.len() as f64 } else { 0.0 };
                ensure((v - want).abs() < 1e-15, || {
                    format!("T={t}: latent frame {k} weight on frame {j} is {v}, expected {want}")
                })?;
            }
        }
    }
    Ok("every latent frame averages exactly its codec window".into())
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;

/// Relative error `|a - n| / sqrt(|a|^2 + |n|^2)` over all input entries
/// of `sum(f(x) * probe)`.
fn fd_check<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<f64, String>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> mvd_tensor::Result<Var<'g>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).map_err(err)?.shape()
    };
    let probe = random(&shape, &mut rng);
    let eval = |xs: &[Tensor]| -> Result<f64, String> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).map_err(err)?.value();
        Ok(out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let grads = g.backward(f(&g, &vars).map_err(err)?, &probe).map_err(err)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).ok_or("missing input gradient")?;
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            num += (a - fd) * (a - fd);
            den += a * a + fd * fd;
        }
    }
    Ok(if den == 0.0 { 0.0 } else { (num / den).sqrt() })
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0)).expect("valid shape")
}

fn grad_primitives(_: &VerifyOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let pos = positive(&[3, 4], &mut rng);
    let m = random(&[4, 5], &mut rng);
    let qkv = random(&[2, 4, 6], &mut rng);
    let seq = random(&[3, 4, 6], &mut rng);
    let keep: Vec<bool> = (0..12).map(|i| i % 5 != 3).collect();
    let mask = Mask::new(&[1, 1, 4], vec![true, false, true, true]).map_err(err)?;
    type Case = (&'static str, Vec<Tensor>, Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> mvd_tensor::Result<Var<'g>>>);
    let cases: Vec<Case> = vec![
        ("add", vec![a.clone(), row.clone()], Box::new(|_, v| v[0].add(v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].sub(v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].mul(v[1]))),
        ("div", vec![a.clone(), pos.clone()], Box::new(|_, v| v[0].div(v[1]))),
        ("matmul", vec![a.clone(), m.clone()], Box::new(|_, v| v[0].matmul(v[1]))),
        ("exp", vec![a.clone()], Box::new(|_, v| Ok(v[0].exp()))),
        ("ln", vec![pos.clone()], Box::new(|_, v| Ok(v[0].ln()))),
        ("sqrt", vec![pos.clone()], Box::new(|_, v| Ok(v[0].sqrt()))),
        ("sigmoid", vec![a.clone()], Box::new(|_, v| Ok(v[0].sigmoid()))),
        ("tanh", vec![a.clone()], Box::new(|_, v| Ok(v[0].tanh()))),
        ("gelu", vec![a.clone()], Box::new(|_, v| Ok(v[0].gelu()))),
        ("silu", vec![a.clone()], Box::new(|_, v| Ok(v[0].silu()))),
        ("square", vec![a.clone()], Box::new(|_, v| Ok(v[0].square()))),
        ("softmax", vec![a.clone()], Box::new(|_, v| v[0].softmax(1))),
        ("masked_softmax", vec![a.clone()], Box::new(move |_, v| v[0].masked_softmax(1, &keep))),
        (
            "layer_norm",
            vec![a.clone(), row.clone(), row.clone()],
            Box::new(|_, v| v[0].layer_norm(Some(v[1]), Some(v[2]), 1e-5)),
        ),
        ("rope", vec![seq.clone()], Box::new(|_, v| v[0].rope(&[0, 3, 7, 8], 10_000.0))),
        (
            "attention",
            vec![qkv.clone(), qkv.map(|x| 0.5 * x), qkv.map(|x| x - 0.2)],
            Box::new(move |_, v| attention(v[0], v[1], v[2], Some(&mask))),
        ),
        ("sum_axis", vec![seq.clone()], Box::new(|_, v| v[0].sum_axis(1))),
        ("mean_axis", vec![seq.clone()], Box::new(|_, v| v[0].mean_axis(2))),
        ("permute", vec![seq.clone()], Box::new(|_, v| v[0].permute(&[2, 0, 1]))),
        ("narrow", vec![seq.clone()], Box::new(|_, v| v[0].narrow(1, 1, 3))),
        ("concat", vec![a.clone(), b.clone()], Box::new(|_, v| concat(&[v[0], v[1]], 0))),
        ("broadcast_to", vec![row.clone()], Box::new(|_, v| v[0].broadcast_to(&[3, 4]))),
        ("select_rows", vec![a.clone()], Box::new(|_, v| v[0].select_rows(&[2, 0, 2]))),
        ("reshape", vec![seq.clone()], Box::new(|_, v| v[0].reshape(&[12, 6]))),
    ];
    let mut worst = (0.0, "");
    for (i, (name, inputs, f)) in cases.iter().enumerate() {
        let e = fd_check(inputs, 100 + i as u64, f)?;
        if e >= worst.0 {
            worst = (e, name);
        }
        ensure(e < PRIMITIVE_TOL, || format!("{name}: relative error {e:.2e}"))?;
    }
    Ok(format!("{} primitives, worst {:.2e} ({})", cases.len(), worst.0, worst.1))
}

fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn loss_of(model: &Model, params: &ParamStore, z1: &Tensor, conds: &[&CondInputs]) -> Result<(f64, ParamStore), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fs = draw_flow_sample(z1, &mut rng).map_err(err)?;
    let g = Graph::new();
    let p = Bound::new(params, &g, true);
    let v = model
        .forward(&p, g.constant(fs.z_t.clone()), &fs.t, conds, &ForwardOptions::default())
        .map_err(err)?;
    let loss = velocity_loss(v, &fs).map_err(err)?;
    let value = loss.value().data()[0];
    let mut grads = g.backward(loss, &Tensor::scalar(1.0)).map_err(err)?;
    Ok((value, p.gradients(&mut grads)))
}

fn tiny_scene_knobs(grid: (usize, usize)) -> SceneKnobs {
    SceneKnobs {
        image_height: grid.0 * 8,
        image_width: grid.1 * 8,
        map_rows: grid.0 * 4,
        map_cols: grid.1 * 4,
        ..SceneKnobs::default()
    }
}

fn grad_end_to_end(_: &VerifyOptions) -> Outcome {
    let cfg = encoder_config();
    let mut model = Model::new(ModelConfig { depth: 2, ..cfg }, CodecSpec::default(), 3).map_err(err)?;
    perturb(&mut model.params, 0.2, 8);
    let scene = synth_scene(13, 9, 2, &tiny_scene_knobs((2, 2))).map_err(err)?;
    let cond = CondInputs::from_scene(&scene).map_err(err)?;
    let null = cond.with_dropped(DropFlags::ALL);
    let conds = [&cond, &null];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z1 = random(&[2, 3, 2, 2, 2, 16], &mut rng);
    let (_, grads) = loss_of(&model, &model.params, &z1, &conds)?;
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (name, value) in model.params.iter() {
        let g = grads.get(name).map_err(err)?;
        if g.shape() != value.shape() {
            return Err(format!("{name}: gradient shape {:?}", g.shape()));
        }
        let big = (0..g.len())
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap_or(0);
        for idx in [big, rng.random_range(0..g.len())] {
            let mut plus = model.params.clone();
            plus.get_mut(name).map_err(err)?.data_mut()[idx] += FD_STEP;
            let mut minus = model.params.clone();
            minus.get_mut(name).map_err(err)?.data_mut()[idx] -= FD_STEP;
            let fd = (loss_of(&model, &plus, &z1, &conds)?.0 - loss_of(&model, &minus, &z1, &conds)?.0) / (2.0 * FD_STEP);
            let an = g.data()[idx];
            // Entries whose derivative is at roundoff level compare absolutely.
            let e = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            if e > worst.0 {
                worst = (e, format!("{name}[{idx}]"));
            }
            checked += 1;
        }
    }
    ensure(worst.0 < END_TO_END_TOL, || format!("worst relative error {:.2e} at {}", worst.0, worst.1))?;
    Ok(format!("{checked} parameter entries, worst {:.2e}", worst.0))
}

// ---------------------------------------------------------------- sequence parallel

/// Largest forward and gradient gaps between sharded and single-worker
/// attention.
pub fn sp_gaps(p: usize, s: usize, heads: usize, seed: u64) -> Result<(f64, f64), String> {
    let w = heads * 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[s, w], &mut rng);
    let ws: Vec<Tensor> = (0..4).map(|_| random(&[w, w], &mut rng).map(|v| 0.5 * v)).collect();
    let probe = random(&[s, w], &mut rng);
    let run = |sharded: bool| -> Result<(Tensor, Vec<Tensor>), String> {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let wv: Vec<_> = ws.iter().map(|t| g.param(t.clone())).collect();
        let aw = AttentionWeights {
            wq: wv[0],
            wk: wv[1],
            wv: wv[2],
            wo: wv[3],
        };
        let out = if sharded {
            sp_attention_forward(xv, &aw, heads, p).map_err(err)?.output
        } else {
            reference_attention(xv, &aw, heads, None).map_err(err)?
        };
        let loss = out.mul(g.constant(probe.clone())).map_err(err)?.sum_all();
        let grads = g.backward(loss, &Tensor::scalar(1.0)).map_err(err)?;
        let gs = std::iter::once(xv)
            .chain(wv.iter().copied())
            .map(|v| grads.get(v).cloned().ok_or("missing gradient"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(((*out.value()).clone(), gs))
    };
    let (ro, rg) = run(false)?;
    let (so, sg) = run(true)?;
    let grad = rg.iter().zip(&sg).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    Ok((ro.max_abs_diff(&so), grad))
}

fn sp_equivalence(_: &VerifyOptions) -> Outcome {
    let (mut fw, mut gw) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for p in [1, 2, 4] {
        for s in [16, 17, 50] {
            for heads in [4, 8] {
                let (f, g) = sp_gaps(p, s, heads, (p * 1000 + s * 10 + heads) as u64)?;
                ensure(f < SP_FORWARD_TOL, || format!("P={p} S={s} HD={heads}: forward gap {f:.2e}"))?;
                ensure(g < SP_GRAD_TOL, || format!("P={p} S={s} HD={heads}: gradient gap {g:.2e}"))?;
                ensure(p != 1 || f == 0.0, || format!("P=1 S={s} HD={heads}: not bit-identical"))?;
                fw = fw.max(f);
                gw = gw.max(g);
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, worst forward {fw:.2e}, gradient {gw:.2e}"))
}

// ---------------------------------------------------------------- scheduler

fn sched_batch_sizes(_: &VerifyOptions) -> Outcome {
    let got = plan_buckets(&[30.0, 7.5, 45.0], 30.0).map_err(err)?;
    ensure(got == [1, 4, 1], || format!("costs 30/7.5/45 at 30s gave {got:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut costs: Vec<f64> = (0..64).map(|_| rng.random_range(0.1..80.0)).collect();
    costs.sort_by(f64::total_cmp);
    let sizes = plan_buckets(&costs, 30.0).map_err(err)?;
    ensure(sizes.windows(2).all(|w| w[0] >= w[1]), || "cheaper bucket got a smaller batch".into())?;
    ensure(plan_buckets(&[0.0], 30.0).is_err(), || "zero cost accepted".into())?;
    Ok("30s->1, 7.5s->4, 45s->1; monotone over 64 costs".into())
}

fn sched_single_type(_: &VerifyOptions) -> Outcome {
    let counts = [37, 12, 5];
    for (workers, sp) in [(8, 1), (8, 2), (8, 4), (8, 8), (6, 3)] {
        let s = assign_buckets(&counts, workers, sp).map_err(err)?;
        ensure(s.single_type_per_group(), || format!("P={workers} sp={sp}: mixed group"))?;
        for (k, &c) in counts.iter().enumerate() {
            let n = s.group_iterations(k);
            ensure(n == c, || format!("P={workers} sp={sp}: bucket {k} served {n}, has {c}"))?;
        }
    }
    let even = assign_buckets(&[4, 4], 4, 1).map_err(err)?;
    ensure(
        even.iterations.iter().all(|r| r.iter().filter(|b| **b == Some(0)).count() == 2),
        || "equal buckets not split 2/2".into(),
    )?;
    let prop = assign_buckets(&[300, 100], 4, 1).map_err(err)?;
    let (a, b) = (prop.group_iterations(0), prop.group_iterations(1));
    ensure((a as i64 - 3 * b as i64).abs() <= 1, || format!("300:100 served {a}:{b}"))?;
    ensure(assign_buckets(&[1], 6, 4).is_err(), || "indivisible pool accepted".into())?;
    Ok("single bucket per group in every iteration; 300:100 -> 3:1".into())
}

fn sched_repeat_sparse(_: &VerifyOptions) -> Outcome {
    let r = repeat_sparse(&[1000, 50], 0.25);
    let want = [Repeated { factor: 1, count: 1000 }, Repeated { factor: 5, count: 250 }];
    ensure(r == want, || format!("{{1000, 50}} gave {r:?}"))?;
    ensure(repeat_sparse(&[70, 70, 70], 0.25).iter().all(|r| r.factor == 1), || "equal counts repeated".into())?;
    ensure(repeat_sparse(&[1000, 1], 0.0).iter().all(|r| r.factor == 1), || "min_ratio 0 repeated".into())?;
    Ok("{1000, 50} -> {1000, 250}".into())
}

fn sched_conservation(_: &VerifyOptions) -> Outcome {
    let spec = |frames, cost| BucketSpec {
        height: 32,
        width: 56,
        frames,
        batch: 1,
        seconds_per_iter: cost,
    };
    let buckets = [spec(1, 0.25), spec(9, 0.75), spec(17, 1.25)];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clips: Vec<(usize, usize, usize)> = (0..200)
        .map(|_| {
            let f = match rng.random_range(0..20) {
                0 => 17,
                1..=5 => 9,
                _ => 1,
            };
            (f, 32, 56)
        })
        .collect();
    let members = bucketize(&clips, &buckets).map_err(err)?;
    let mut seen = vec![0usize; clips.len()];
    for m in &members {
        for &i in m {
            seen[i] += 1;
        }
    }
    ensure(seen.iter().all(|&n| n == 1), || "a clip landed in zero or several buckets".into())?;
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let repeat: Vec<usize> = repeat_sparse(&counts, 0.25).iter().map(|r| r.factor).collect();
    let batches = epoch_batches(&members, &[4, 2, 1], &repeat).map_err(err)?;
    for (k, bs) in batches.iter().enumerate() {
        let mut per_clip = vec![0usize; clips.len()];
        for b in bs {
            for &i in &b.clips {
                per_clip[i] += 1;
            }
        }
        for &i in &members[k] {
            ensure(per_clip[i] == repeat[k], || format!("bucket {k}: clip {i} appears {} times, repeat {}", per_clip[i], repeat[k]))?;
        }
    }
    Ok(format!("{} clips, repeats {repeat:?}", clips.len()))
}

// ---------------------------------------------------------------- flow

fn flow_endpoints(_: &VerifyOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z1 = random(&[2, 3, 4], &mut rng);
    let eps = random(&[2, 3, 4], &mut rng);
    ensure(interpolate(&z1, &eps, 1.0).map_err(err)? == z1, || "t=1 is not the data".into())?;
    ensure(interpolate(&z1, &eps, 0.0).map_err(err)? == eps, || "t=0 is not the noise".into())?;
    Ok("z_1 at t=1 and eps at t=0, bit-exact".into())
}

fn flow_euler_exact(_: &VerifyOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let z1 = random(&[3, 5], &mut rng);
    let eps = random(&[3, 5], &mut rng);
    let v = z1.zip_map(&eps, |a, b| a - b).map_err(err)?;
    let mut worst = 0.0f64;
    for steps in [1, 2, 3, 7, 30, 100] {
        let cfg = SamplerConfig {
            steps,
            ..SamplerConfig::default()
        };
        let (z, taken) = euler_sample(z1.shape(), &cfg, Some(eps.clone()), |_, _| Ok(v.clone())).map_err(err)?;
        ensure(taken == steps, || format!("{taken} steps taken, {steps} requested"))?;
        let e = z.max_abs_diff(&z1);
        ensure(e <= EULER_TOL, || format!("{steps} steps: endpoint error {e:.2e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("oracle velocity reaches z_1 for 1..100 steps, worst {worst:.1e}"))
}

fn flow_cfg_identity(_: &VerifyOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let c = random(&[4, 6], &mut rng);
    let u = random(&[4, 6], &mut rng);
    ensure(cfg_combine(&c, &u, 1.0).map_err(err)? == c, || "s=1 combine differs from the conditional".into())?;
    let mut model = Model::new(encoder_config(), CodecSpec::default(), 5).map_err(err)?;
    perturb(&mut model.params, 0.05, 6);
    let scene = synth_scene(4, 9, 2, &tiny_scene_knobs((2, 2))).map_err(err)?;
    let cond = CondInputs::from_scene(&scene).map_err(err)?;
    let z = random(&[1, 3, 2, 2, 2, 16], &mut rng);
    let guided = model.guided_velocity(&z, 0.4, &cond, 1.0).map_err(err)?;
    let plain = model.velocity(&z, &[0.4], &[&cond]).map_err(err)?;
    ensure(guided == plain, || "guided velocity at s=1 differs from the conditional".into())?;
    Ok("s=1 equals the conditional prediction, bit-exact".into())
}

fn flow_drop_rate(_: &VerifyOptions) -> Outcome {
    let scene = synth_scene(2, 1, 1, &tiny_scene_knobs((1, 1))).map_err(err)?;
    let cond = CondInputs::from_scene(&scene).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut hits = [0usize; 5];
    for _ in 0..DROP_TRIALS {
        let d = drop_conditions(&cond, &mut rng, 0.15).dropped.as_array();
        for (h, on) in hits.iter_mut().zip(d) {
            *h += usize::from(on);
        }
    }
    let rates: Vec<f64> = hits.iter().map(|&h| h as f64 / DROP_TRIALS as f64).collect();
    for (name, r) in ["text", "camera", "trajectory", "boxes", "map"].iter().zip(&rates) {
        ensure((r - 0.15).abs() <= 0.01, || format!("{name} dropped at {r:.4}"))?;
    }
    Ok(format!("rates {rates:.3?} over {DROP_TRIALS} trials"))
}

// ---------------------------------------------------------------- codec

fn codec_roundtrip(_: &VerifyOptions) -> Outcome {
    let codec = Codec::new(CodecSpec::lossless(8)).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut worst = 0.0f64;
    for t in [1, 8, 9, 17] {
        let px = Tensor::from_fn(&[t, 2, 16, 24, 3], |_| rng.random::<f64>()).map_err(err)?;
        let clip = VideoClip::new(px, 12.0).map_err(err)?;
        let back = codec.decode(&codec.encode(&clip).map_err(err)?).map_err(err)?;
        let e = back.pixels().max_abs_diff(clip.pixels());
        ensure(e < CODEC_TOL, || format!("T={t}: roundtrip error {e:.2e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("full-rank encode/decode, worst {worst:.1e}"))
}

fn codec_psnr(_: &VerifyOptions) -> Outcome {
    let v = psnr(1.0, 255.0);
    let rounded = format!("{v:.4}");
    ensure(rounded == "48.1308", || format!("psnr(mse 1, peak 255) = {v}"))?;
    Ok(format!("peak 255, MSE 1 -> {rounded} dB"))
}
