use mvd_core::codec::{latent_frame_count, psnr, Codec, CodecSpec, LatentTensor, PSNR_CAP_DB};
use mvd_core::video::VideoClip;
use mvd_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_clip(seed: u64, t: usize, views: usize, h: usize, w: usize) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t * views * h * w * 3;
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    VideoClip::new(Tensor::new(&[t, views, h, w, 3], data).unwrap(), 12.0).unwrap()
}

#[test]
fn temporal_length_matches_rule_for_every_admissible_t() {
    let codec = Codec::new(CodecSpec::default()).unwrap();
    for t in [1, 8, 9, 16, 17, 33, 65, 129, 241] {
        let z = codec.encode(&random_clip(t as u64, t, 1, 8, 8)).unwrap();
        assert_eq!(z.latent_frames(), latent_frame_count(t).unwrap(), "T={t}");
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.frames(), t);
    }
}

#[test]
fn full_rank_roundtrip_is_exact() {
    let codec = Codec::new(CodecSpec::lossless(8)).unwrap();
    for (seed, t) in [(1, 1), (2, 8), (3, 9), (4, 17)] {
        let clip = random_clip(seed, t, 2, 16, 24);
        let back = codec.decode(&codec.encode(&clip).unwrap()).unwrap();
        let err = clip.pixels().max_abs_diff(back.pixels());
        assert!(err < 1e-9, "T={t}: max error {err}");
    }
}

#[test]
fn encode_is_linear() {
    let codec = Codec::new(CodecSpec::default()).unwrap();
    let x = random_clip(10, 9, 2, 8, 16);
    let y = random_clip(11, 9, 2, 8, 16);
    let (a, b) = (0.3, 0.6);
    let mix = VideoClip::new(
        x.pixels().zip_map(y.pixels(), |p, q| a * p + b * q).unwrap(),
        12.0,
    )
    .unwrap();
    let zx = codec.encode(&x).unwrap();
    let zy = codec.encode(&y).unwrap();
    let zm = codec.encode(&mix).unwrap();
    let expect = zx.values().zip_map(zy.values(), |p, q| a * p + b * q).unwrap();
    assert!(zm.values().max_abs_diff(&expect) < 1e-9);
}

#[test]
fn truncated_codec_psnr_matches_pixel_mse() {
    let spec = CodecSpec {
        latent_channels: 8,
        ..CodecSpec::default()
    };
    let codec = Codec::new(spec).unwrap();
    let clip = random_clip(5, 9, 1, 16, 16);
    let back = codec.decode(&codec.encode(&clip).unwrap()).unwrap();
    let n = clip.pixels().len() as f64;
    let mse: f64 = clip
        .pixels()
        .data()
        .iter()
        .zip(back.pixels().data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let got = codec.roundtrip_psnr(&clip, 1.0).unwrap();
    assert!(got.is_finite() && got < PSNR_CAP_DB);
    assert!((got - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
}

#[test]
fn lossless_psnr_hits_cap_and_closed_form() {
    let codec = Codec::new(CodecSpec::lossless(8)).unwrap();
    let clip = VideoClip::new(Tensor::full(&[1, 1, 8, 8, 3], 0.5).unwrap(), 12.0).unwrap();
    assert_eq!(codec.roundtrip_psnr(&clip, 1.0).unwrap(), PSNR_CAP_DB);
    assert_eq!(format!("{:.4}", psnr(1.0, 255.0)), "48.1308");
}

#[test]
fn views_encode_independently_of_order() {
    let codec = Codec::new(CodecSpec::default()).unwrap();
    let clip = random_clip(7, 9, 3, 8, 8);
    let z = codec.encode(&clip).unwrap();
    let perm = [2, 0, 1];
    let swapped = Tensor::from_fn(clip.pixels().shape(), |i| {
        let plane = 8 * 8 * 3;
        let (t, rest) = (i / (3 * plane), i % (3 * plane));
        let (c, off) = (rest / plane, rest % plane);
        clip.pixels().data()[t * 3 * plane + perm[c] * plane + off]
    })
    .unwrap();
    let zs = codec.encode(&VideoClip::new(swapped, 12.0).unwrap()).unwrap();
    // Latent layout [T', C, 1, 1, d] for 8x8 views.
    let per_view = 16;
    for t in 0..z.latent_frames() {
        for c in 0..3 {
            let a = &zs.values().data()[(t * 3 + c) * per_view..(t * 3 + c + 1) * per_view];
            let b = &z.values().data()[(t * 3 + perm[c]) * per_view..(t * 3 + perm[c] + 1) * per_view];
            assert_eq!(a, b);
        }
    }
}

#[test]
fn latent_file_roundtrip() {
    let codec = Codec::new(CodecSpec::default()).unwrap();
    let z = codec.encode(&random_clip(3, 17, 2, 8, 16)).unwrap();
    let mut buf = Vec::new();
    z.write_to(&mut buf).unwrap();
    assert_eq!(LatentTensor::read_from(buf.as_slice()).unwrap(), z);
}
