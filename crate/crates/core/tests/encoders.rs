use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trimodal_core::encoders::{tokenize, ClassEmbed, EncoderConfig, Encoders, TextEncoder, VisionEncoder};
use trimodal_core::numerics::{grad_check_many, Graph, Tensor};
use trimodal_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny() -> EncoderConfig {
    EncoderConfig {
        patch_size: 4,
        layers: 1,
        heads: 2,
        width: 8,
        embed_dim: 6,
        mlp_ratio: 2,
    }
}

fn encode(enc: &VisionEncoder, images: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = enc.params.bind(&mut g, false);
    let out = enc.forward(&mut g, &b, images).unwrap();
    g.value(out).clone()
}

fn words(enc: &TextEncoder, name: &str) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let b = enc.params.bind(&mut g, false);
    let (w, c) = enc.forward(&mut g, &b, name).unwrap();
    (g.value(w).clone(), g.value(c).clone())
}

#[test]
fn default_frame_shapes() {
    let enc = VisionEncoder::new(EncoderConfig::default(), 32, 32, &mut rng(0)).unwrap();
    let frames = Tensor::uniform(&[8, 32, 32, 3], 0.0, 1.0, &mut rng(1));
    assert_eq!(encode(&enc, &frames).shape(), &[8, 64]);
    let poses = Tensor::uniform(&[8, 32, 32, 1], 0.0, 1.0, &mut rng(2));
    assert_eq!(encode(&enc, &poses).shape(), &[8, 64]);
}

#[test]
fn identical_frames_give_identical_rows() {
    let enc = VisionEncoder::new(tiny(), 8, 8, &mut rng(3)).unwrap();
    let one = Tensor::uniform(&[1, 8, 8, 3], 0.0, 1.0, &mut rng(4));
    let other = Tensor::uniform(&[1, 8, 8, 3], 0.0, 1.0, &mut rng(5));
    let frames = Tensor::stack_leading(&[one.clone(), one, other]).unwrap();
    let out = encode(&enc, &frames);
    assert_eq!(out.row(0), out.row(1));
    assert_ne!(out.row(0), out.row(2));
    let zeros = encode(&enc, &Tensor::zeros(&[3, 8, 8, 1]));
    assert_eq!(zeros.row(0), zeros.row(2));
}

#[test]
fn encoding_is_deterministic() {
    let a = VisionEncoder::new(tiny(), 8, 8, &mut rng(6)).unwrap();
    let b = VisionEncoder::new(tiny(), 8, 8, &mut rng(6)).unwrap();
    let x = Tensor::uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut rng(7));
    assert_eq!(encode(&a, &x), encode(&b, &x));
    assert_eq!(encode(&a, &x), encode(&a, &x));
}

#[test]
fn frames_are_encoded_independently() {
    let enc = VisionEncoder::new(tiny(), 8, 8, &mut rng(8)).unwrap();
    let x = Tensor::uniform(&[4, 8, 8, 1], 0.0, 1.0, &mut rng(9));
    let base = encode(&enc, &x);
    let changed = Tensor::from_fn(&[4, 8, 8, 1], |i| if i / 64 == 2 { 1.0 - x.data()[i] } else { x.data()[i] });
    let out = encode(&enc, &changed);
    for r in 0..4 {
        assert_eq!(out.row(r) == base.row(r), r != 2, "row {r}");
    }
    let perm = [3, 0, 2, 1];
    let frames: Vec<Tensor> = perm
        .iter()
        .map(|&i| Tensor::new(vec![1, 8, 8, 1], x.data()[i * 64..(i + 1) * 64].to_vec()).unwrap())
        .collect();
    let permuted = encode(&enc, &Tensor::stack_leading(&frames).unwrap());
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(permuted.row(r), base.row(i));
    }
}

#[test]
fn outputs_are_finite_on_unit_inputs() {
    let enc = VisionEncoder::new(EncoderConfig::default(), 32, 32, &mut rng(10)).unwrap();
    for v in [0.0, 1.0] {
        let out = encode(&enc, &Tensor::full(&[2, 32, 32, 3], v));
        assert!(out.data().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn indivisible_extent_is_rejected() {
    assert!(VisionEncoder::new(tiny(), 10, 8, &mut rng(0)).is_err());
    let enc = VisionEncoder::new(tiny(), 8, 8, &mut rng(0)).unwrap();
    let mut g = Graph::new();
    let b = enc.params.bind(&mut g, false);
    assert!(enc.forward(&mut g, &b, &Tensor::zeros(&[1, 12, 8, 3])).is_err());
}

#[test]
fn word_shapes_and_class_embedding() {
    let names: Vec<String> = ["apply lipstick", "jump", "jump jump"].iter().map(|s| s.to_string()).collect();
    let enc = TextEncoder::new(tiny(), &names, ClassEmbed::Mean, &mut rng(11)).unwrap();
    let (w, c) = words(&enc, "apply lipstick");
    assert_eq!((w.shape(), c.shape()), (&[2, 6][..], &[1, 6][..]));
    let (w, c) = words(&enc, "jump");
    assert_eq!(c.data(), w.row(0));
    let (w, c) = words(&enc, "jump jump");
    assert_eq!(w.row(0), w.row(1));
    for (a, b) in c.data().iter().zip(w.row(0)) {
        assert!((a - b).abs() < 1e-15);
    }
    match enc.token_ids("apply mascara") {
        Err(Error::UnknownWord(w)) => assert_eq!(w, "mascara"),
        other => panic!("{other:?}"),
    }
    assert_eq!(tokenize("  Raise   ARMS "), vec!["raise", "arms"]);
}

#[test]
fn encoder_head_gradients() {
    let enc = VisionEncoder::new(tiny(), 8, 8, &mut rng(12)).unwrap();
    let images = Tensor::uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut rng(13));
    let probe = Tensor::uniform(&[2, 6], -1.0, 1.0, &mut rng(14));
    let err = grad_check_many(
        |g, vars| {
            let b = enc.params.bind_vars(g, vars)?;
            let out = enc.forward(g, &b, &images)?;
            let p = g.constant(probe.clone());
            let y = g.mul(out, p)?;
            g.sum(y)
        },
        enc.params.tensors(),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let names = vec!["raise arms".to_string()];
    let text = TextEncoder::new(tiny(), &names, ClassEmbed::Mean, &mut rng(15)).unwrap();
    let err = grad_check_many(
        |g, vars| {
            let b = text.params.bind_vars(g, vars)?;
            let (w, c) = text.forward(g, &b, "raise arms")?;
            let w = g.sigmoid(w)?;
            let s = g.sum(w)?;
            let c = g.sum(c)?;
            let c = g.scale(c, 0.5)?;
            g.add(s, c)
        },
        text.params.tensors(),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let names = vec!["raise arms".to_string(), "clap hands".to_string()];
    let enc = Encoders::new(&tiny(), 8, 8, &names, ClassEmbed::LastWord, false, &mut rng(16)).unwrap();
    enc.save(dir.path()).unwrap();
    let back = Encoders::load(dir.path()).unwrap();
    assert_eq!(back, enc);

    let shared = Encoders::new(&tiny(), 8, 8, &names, ClassEmbed::Mean, true, &mut rng(16)).unwrap();
    assert!(shared.pose.is_none());
    assert!(shared.num_values() < enc.num_values());

    // A tensor whose shape disagrees with the descriptor is refused.
    let bad = dir.path().join("frame_encoder").join("head.w");
    trimodal_core::numerics::save_tensor(&bad, &Tensor::zeros(&[3, 3])).unwrap();
    assert!(matches!(Encoders::load(dir.path()), Err(Error::Checkpoint(_))));
}
