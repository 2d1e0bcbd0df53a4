use mvd_sched::bucket::{
    apply_plan, assign_buckets, bucketize, epoch_batches, plan_buckets, repeat_sparse, to_jsonl, trace, validate_stages,
    BucketSpec, Repeated, StagePlan,
};

fn spec(frames: usize, h: usize, w: usize, cost: f64) -> BucketSpec {
    BucketSpec {
        height: h,
        width: w,
        frames,
        batch: 1,
        seconds_per_iter: cost,
    }
}

#[test]
fn batch_sizes_follow_cost() {
    assert_eq!(plan_buckets(&[30.0, 7.5, 45.0], 30.0).unwrap(), vec![1, 4, 1]);
    // Cheaper buckets never get smaller batches.
    let costs = [0.3, 0.7, 1.1, 2.9, 7.5, 12.0, 31.0];
    let sizes = plan_buckets(&costs, 30.0).unwrap();
    assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
    assert!(sizes.iter().all(|&n| n >= 1));
    assert!(plan_buckets(&[0.0], 1.0).is_err());
    assert!(plan_buckets(&[1.0], 0.0).is_err());

    let mut b = vec![spec(1, 32, 56, 7.5), spec(17, 32, 56, 30.0)];
    apply_plan(&mut b, 30.0).unwrap();
    assert_eq!((b[0].batch, b[1].batch), (4, 1));
}

#[test]
fn bucket_and_stage_validation() {
    assert!(spec(9, 8, 8, 1.0).validate().is_ok());
    assert!(spec(10, 8, 8, 1.0).validate().is_err());
    assert!(spec(9, 8, 8, 0.0).validate().is_err());
    let stage = |id: u8, frames: usize| StagePlan {
        stage: id,
        buckets: vec![spec(frames, 32, 56, 1.0)],
        steps: 10,
        sp_size: 1,
    };
    assert!(validate_stages(&[stage(1, 1), stage(2, 9), stage(3, 17)]).is_ok());
    assert!(validate_stages(&[stage(1, 17), stage(2, 9)]).is_err());
    assert!(validate_stages(&[stage(2, 1)]).is_err());
    assert!(validate_stages(&[stage(4, 1)]).is_err());
}

#[test]
fn equal_buckets_split_evenly_over_groups() {
    let s = assign_buckets(&[4, 4], 4, 1).unwrap();
    assert_eq!(s.groups(), 4);
    assert_eq!(s.iterations.len(), 2);
    assert_eq!((s.group_iterations(0), s.group_iterations(1)), (4, 4));
    for row in &s.iterations {
        assert_eq!(row.iter().filter(|b| **b == Some(0)).count(), 2, "{row:?}");
    }

    let s = assign_buckets(&[4, 4], 4, 4).unwrap();
    assert_eq!(s.groups(), 1);
    assert_eq!(s.iterations.len(), 8);
    assert!(s.single_type_per_group());
    assert!(s.iterations.iter().all(|r| r.len() == 1 && r[0].is_some()));
}

#[test]
fn assignment_tracks_proportions() {
    let s = assign_buckets(&[300, 100], 4, 2).unwrap();
    let (a, b) = (s.group_iterations(0), s.group_iterations(1));
    assert_eq!(a + b, 400);
    assert!((a as i64 - 3 * b as i64).abs() <= 1, "{a}:{b}");
    assert!(s.single_type_per_group());
    // Every prefix stays within one batch of the exact share.
    let mut seen = [0usize; 2];
    for (i, k) in s.iterations.iter().flatten().flatten().enumerate() {
        seen[*k] += 1;
        let n = (i + 1) as f64;
        assert!((seen[0] as f64 - 0.75 * n).abs() <= 1.0);
    }
    assert!(assign_buckets(&[1], 6, 4).is_err());
    assert!(assign_buckets(&[1], 4, 0).is_err());
}

#[test]
fn sparse_buckets_are_repeated() {
    let r = repeat_sparse(&[1000, 50], 0.25);
    assert_eq!(r[0], Repeated { factor: 1, count: 1000 });
    assert_eq!(r[1], Repeated { factor: 5, count: 250 });
    let even = repeat_sparse(&[100, 100, 100], 0.25);
    assert!(even.iter().all(|r| r.factor == 1 && r.count == 100));
    let off = repeat_sparse(&[1000, 1], 0.0);
    assert!(off.iter().all(|r| r.factor == 1));
}

#[test]
fn epochs_conserve_clips() {
    let buckets = vec![spec(1, 8, 8, 1.0), spec(9, 8, 8, 2.0), spec(17, 8, 8, 4.0)];
    let mut clips = Vec::new();
    for i in 0..41 {
        clips.push(match i % 7 {
            0 => (17, 8, 8),
            1 | 2 => (9, 8, 8),
            _ => (1, 8, 8),
        });
    }
    let members = bucketize(&clips, &buckets).unwrap();
    assert_eq!(members.iter().map(Vec::len).sum::<usize>(), clips.len());
    for (k, m) in members.iter().enumerate() {
        assert!(m.iter().all(|&i| clips[i] == buckets[k].key()));
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let repeat: Vec<usize> = repeat_sparse(&counts, 0.25).iter().map(|r| r.factor).collect();
    let batches = epoch_batches(&members, &[4, 2, 1], &repeat).unwrap();
    for (k, bs) in batches.iter().enumerate() {
        assert_eq!(bs.iter().map(|b| b.clips.len()).sum::<usize>(), counts[k] * repeat[k]);
        assert!(bs.iter().all(|b| b.bucket == k && b.clips.iter().all(|&i| clips[i] == buckets[k].key())));
    }
    let s = assign_buckets(&batches.iter().map(Vec::len).collect::<Vec<_>>(), 2, 1).unwrap();
    for (k, bs) in batches.iter().enumerate() {
        assert_eq!(s.group_iterations(k), bs.len());
    }

    assert!(bucketize(&[(5, 8, 8)], &buckets).is_err());
    assert!(bucketize(&[(1, 8, 8)], &[spec(1, 8, 8, 1.0), spec(1, 8, 8, 2.0)]).is_err());
}

#[test]
fn trace_lines_parse_back() {
    let s = assign_buckets(&[3, 1], 4, 2).unwrap();
    let rec = trace(&s, &[100, 200]);
    assert_eq!(rec.len(), s.iterations.len() * 4);
    let text = to_jsonl(&rec).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), rec.len());
    for (l, r) in lines.iter().zip(&rec) {
        assert_eq!(l["worker"], r.worker);
        assert_eq!(l["message_bytes"], r.message_bytes);
    }
    assert!(rec.iter().any(|r| r.message_bytes == 200));
    let single = trace(&assign_buckets(&[3], 2, 1).unwrap(), &[100]);
    assert!(single.iter().all(|r| r.message_bytes == 0));
}
