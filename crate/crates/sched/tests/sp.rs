use mvd_sched::sp::{all_to_all, gather, reference_attention, shard_sequence, sp_attention_forward, AttentionWeights};
use mvd_tensor::{concat, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

#[test]
fn sharding_partitions_and_pads() {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = g.constant(rand_tensor(&[16, 3], &mut rng));
    let (plan, shards) = shard_sequence(x, 2).unwrap();
    assert_eq!(shards.iter().map(|s| s.shape()[0]).collect::<Vec<_>>(), vec![8, 8]);
    assert_eq!(plan.padding(), 0);
    assert_eq!(*concat(&shards, 0).unwrap().value(), *x.value());

    let x = g.constant(rand_tensor(&[17, 3], &mut rng));
    let (plan, shards) = shard_sequence(x, 2).unwrap();
    assert_eq!(shards.iter().map(|s| s.shape()[0]).collect::<Vec<_>>(), vec![9, 9]);
    assert_eq!(plan.keep().iter().filter(|k| !**k).count(), 1);
    let joined = concat(&shards, 0).unwrap().value();
    assert_eq!(&joined.data()[..51], x.value().data());
    assert!(joined.data()[51..].iter().all(|&v| v == 0.0));
    assert_eq!(*gather(&shards, &plan).unwrap().value(), *x.value());
}

#[test]
fn all_to_all_swaps_the_split_axis() {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let full = g.constant(rand_tensor(&[16, 4, 3], &mut rng));
    let (_, shards) = shard_sequence(full, 2).unwrap();
    assert_eq!(shards[0].shape(), vec![8, 4, 3]);
    let (heads, msgs) = all_to_all(&shards, 1, 0).unwrap();
    assert_eq!(msgs.len(), 4);
    assert!(msgs.iter().all(|m| m.bytes == 8 * 2 * 3 * 8));
    for (q, h) in heads.iter().enumerate() {
        assert_eq!(h.shape(), vec![16, 2, 3]);
        // Gather-then-slice oracle.
        let expect = full.value().narrow(1, 2 * q, 2 * q + 2).unwrap();
        assert_eq!(*h.value(), expect);
    }
    let (back, _) = all_to_all(&heads, 0, 1).unwrap();
    for (a, b) in back.iter().zip(&shards) {
        assert_eq!(*a.value(), *b.value());
    }

    let odd = g.constant(rand_tensor(&[8, 6, 2], &mut rng));
    let (_, shards) = shard_sequence(odd, 4).unwrap();
    let err = all_to_all(&shards, 1, 0).unwrap_err();
    assert!(err.to_string().contains("heads"), "{err}");
}

/// Forward and gradients of sharded attention against the single-worker
/// reference.
fn compare(p: usize, s: usize, heads: usize, seed: u64) -> (f64, f64) {
    let dh = 4;
    let w = heads * dh;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&[s, w], &mut rng);
    let ws: Vec<Tensor> = (0..4).map(|_| rand_tensor(&[w, w], &mut rng).map(|v| v * 0.5)).collect();
    let probe = rand_tensor(&[s, w], &mut rng);
    let run = |sharded: bool| {
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
            sp_attention_forward(xv, &aw, heads, p).unwrap().output
        } else {
            reference_attention(xv, &aw, heads, None).unwrap()
        };
        let loss = out.mul(g.constant(probe.clone())).unwrap().sum_all();
        let grads = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
        let mut gs = vec![grads.get(xv).unwrap().clone()];
        gs.extend(wv.iter().map(|v| grads.get(*v).unwrap().clone()));
        ((*out.value()).clone(), gs)
    };
    let (ref_out, ref_grads) = run(false);
    let (sp_out, sp_grads) = run(true);
    let fwd = ref_out.max_abs_diff(&sp_out);
    let grad = ref_grads
        .iter()
        .zip(&sp_grads)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    (fwd, grad)
}

#[test]
fn sharded_attention_matches_the_reference() {
    let mut seed = 0;
    for p in [1, 2, 4] {
        for s in [16, 17, 50] {
            for heads in [4, 8] {
                seed += 1;
                let (fwd, grad) = compare(p, s, heads, seed);
                assert!(fwd < 1e-10, "P={p} S={s} HD={heads}: forward gap {fwd:e}");
                assert!(grad < 1e-8, "P={p} S={s} HD={heads}: gradient gap {grad:e}");
                if p == 1 {
                    assert_eq!(fwd, 0.0);
                }
            }
        }
    }
}

#[test]
fn padding_tokens_contribute_nothing() {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (s, w, heads) = (17, 16, 4);
    let x = rand_tensor(&[s, w], &mut rng);
    let ws: Vec<_> = (0..4).map(|_| g.constant(rand_tensor(&[w, w], &mut rng))).collect();
    let aw = AttentionWeights {
        wq: ws[0],
        wk: ws[1],
        wv: ws[2],
        wo: ws[3],
    };
    let plain = reference_attention(g.constant(x.clone()), &aw, heads, None).unwrap().value();
    // Garbage in the padded rows must not reach real rows.
    let junk = rand_tensor(&[3, w], &mut rng).map(|v| v * 100.0);
    let padded = concat(&[g.constant(x.clone()), g.constant(junk)], 0).unwrap();
    let keep: Vec<bool> = (0..20).map(|i| i < s).collect();
    let masked = reference_attention(padded, &aw, heads, Some(&keep)).unwrap().value();
    let head = masked.narrow(0, 0, s).unwrap();
    assert!(head.max_abs_diff(&plain) < 1e-12);
    for p in [2, 4] {
        let out = sp_attention_forward(g.constant(x.clone()), &aw, heads, p).unwrap();
        assert_eq!(out.output.shape(), vec![s, w]);
        assert!(out.output.value().max_abs_diff(&plain) < 1e-10);
    }
}

#[test]
fn exchange_trace_is_fixed() {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = g.constant(rand_tensor(&[16, 8], &mut rng));
    let ws: Vec<_> = (0..4).map(|_| g.constant(rand_tensor(&[8, 8], &mut rng))).collect();
    let aw = AttentionWeights {
        wq: ws[0],
        wk: ws[1],
        wv: ws[2],
        wo: ws[3],
    };
    let a = sp_attention_forward(x, &aw, 2, 2).unwrap();
    let b = sp_attention_forward(x, &aw, 2, 2).unwrap();
    assert_eq!(a.messages, b.messages);
    assert_eq!(*a.output.value(), *b.output.value());
    // Four exchanges (q, k, v, output) of P * P messages each.
    assert_eq!(a.messages.len(), 16);
    // Each cross-worker message carries 8 rows x 1 head x 4 features.
    assert_eq!(a.bytes_sent(), vec![4 * 8 * 4 * 8; 2]);
    assert!(sp_attention_forward(x, &aw, 2, 4).is_err());
}
