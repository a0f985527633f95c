mod common;

use common::{normal, small_model_config};
use varscan::block::{encoder_forward, tmb_forward, EncoderParams};
use varscan::config::{BlockKind, GateMode, ModelConfig};
use varscan::numerics::{ParamStore, SeedRng, Tape, Tensor};
use varscan::pipeline::{instance_normalize, Model};

fn encoder(depth: usize) -> (EncoderParams, ParamStore) {
    let enc = EncoderParams::new("encoder", BlockKind::Temporal, depth, 6, 2, 3, 4).unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut SeedRng::new(4)).unwrap();
    (enc, store)
}

fn run_encoder(enc: &EncoderParams, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut tape = Tape::no_grad();
    let v = tape.input(x.clone());
    let y = encoder_forward(&mut tape, store, v, enc, GateMode::Multiply, 0.2, false, &mut SeedRng::new(0)).unwrap();
    tape.value(y).clone()
}

#[test]
fn encoder_is_causal() {
    let (enc, store) = encoder(2);
    let mut rng = SeedRng::new(1);
    let x = normal(&mut rng, &[2, 12, 6]);
    let base = run_encoder(&enc, &store, &x);
    for k in [0, 5, 11] {
        let mut moved = x.clone();
        for b in 0..2 {
            for d in 0..6 {
                moved.set(&[b, k, d], x.at(&[b, k, d]) + 0.3 * (d as f64 + 1.0));
            }
        }
        let y = run_encoder(&enc, &store, &moved);
        for b in 0..2 {
            for t in 0..12 {
                let same = (0..6).all(|d| y.at(&[b, t, d]).to_bits() == base.at(&[b, t, d]).to_bits());
                assert_eq!(same, t < k, "token {t} after perturbing {k}");
            }
        }
    }
}

#[test]
fn zero_out_proj_leaves_final_norm_of_input() {
    let (enc, mut store) = encoder(2);
    for b in &enc.blocks {
        let name = b.name("out_proj");
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.set(&name, Tensor::zeros(&shape)).unwrap();
    }
    let x = normal(&mut SeedRng::new(2), &[1, 5, 6]);
    let y = run_encoder(&enc, &store, &x);
    for t in 0..5 {
        let row: Vec<f64> = (0..6).map(|d| x.at(&[0, t, d])).collect();
        let mu = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
        for d in 0..6 {
            let expected = (row[d] - mu) / (var + 1e-5).sqrt();
            assert!((y.at(&[0, t, d]) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn zeroed_second_block_equals_single_block() {
    let (enc2, mut store2) = encoder(2);
    let name = enc2.blocks[1].name("out_proj");
    let shape = store2.get(&name).unwrap().shape().to_vec();
    store2.set(&name, Tensor::zeros(&shape)).unwrap();
    let enc1 = EncoderParams {
        blocks: vec![enc2.blocks[0].clone()],
        prefix: "encoder".into(),
    };
    let x = normal(&mut SeedRng::new(3), &[2, 7, 6]);
    let a = run_encoder(&enc1, &store2, &x);
    let b = run_encoder(&enc2, &store2, &x);
    assert_eq!(a, b);
}

#[test]
fn single_block_encoder_is_block_then_norm() {
    let (enc, store) = encoder(1);
    let x = normal(&mut SeedRng::new(5), &[1, 6, 6]);
    let mut tape = Tape::no_grad();
    let v = tape.input(x.clone());
    let mut rng = SeedRng::new(0).split_indexed("block", 0);
    let h = tmb_forward(&mut tape, &store, v, &enc.blocks[0], GateMode::Multiply, 0.2, false, &mut rng).unwrap();
    let s = tape.param(&store, "encoder.norm_f.scale").unwrap();
    let bias = tape.param(&store, "encoder.norm_f.bias").unwrap();
    let y = tape.layer_norm(h, s, bias, 1e-5).unwrap();
    assert_eq!(tape.value(y), &run_encoder(&enc, &store, &x));
}

#[test]
fn tmb_output_ignores_conv_width() {
    let x = normal(&mut SeedRng::new(6), &[1, 5, 6]);
    let outputs: Vec<Tensor> = [2, 4, 7]
        .iter()
        .map(|&w| {
            let enc = EncoderParams::new("encoder", BlockKind::Temporal, 1, 6, 2, 3, w).unwrap();
            let mut store = ParamStore::new();
            enc.init(&mut store, &mut SeedRng::new(4)).unwrap();
            run_encoder(&enc, &store, &x)
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

fn model_setup(cfg: &ModelConfig) -> (Model, ParamStore, Tensor) {
    let model = Model::new(cfg).unwrap();
    let store = model.init_params(cfg.seed).unwrap();
    let x = normal(&mut SeedRng::new(9), &[3, cfg.lookback, cfg.n_vars]);
    (model, store, x)
}

#[test]
fn identity_encoder_makes_output_order_free() {
    let cfg = ModelConfig {
        n_vars: 4,
        ..small_model_config()
    };
    let (model, store, x) = model_setup(&cfg);
    let run = |perms: &[Vec<usize>]| {
        let mut tape = Tape::no_grad();
        let y = model.forward_with_encoder(&mut tape, &store, &x, perms, |_, t| Ok(t)).unwrap();
        tape.value(y).clone()
    };
    let id = run(&[vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![0, 1, 2, 3]]);
    let mixed = run(&[vec![3, 1, 0, 2], vec![1, 0, 3, 2], vec![2, 3, 1, 0]]);
    assert_eq!(id, mixed);
}

#[test]
fn forward_shape_and_determinism() {
    let cfg = small_model_config();
    let (model, store, x) = model_setup(&cfg);
    let run = |training: bool| {
        let mut tape = Tape::no_grad();
        let y = model
            .forward(&mut tape, &store, &x, &vec![vec![1, 0]; 3], training, &mut SeedRng::new(77))
            .unwrap();
        tape.value(y).clone()
    };
    let a = run(true);
    assert_eq!(a.shape(), &[3, cfg.horizon, cfg.n_vars]);
    assert_eq!(a, run(true));
    assert_eq!(run(false), run(false));
    assert!(a.is_finite());
}

#[test]
fn order_changes_the_forecast() {
    let cfg = ModelConfig {
        n_vars: 3,
        ..small_model_config()
    };
    let (model, store, x) = model_setup(&cfg);
    let run = |perm: Vec<usize>| {
        let mut tape = Tape::no_grad();
        let y = model.forward(&mut tape, &store, &x, &vec![perm; 3], false, &mut SeedRng::new(0)).unwrap();
        tape.value(y).clone()
    };
    assert_ne!(run(vec![0, 1, 2]), run(vec![2, 1, 0]));
}

#[test]
fn denormalized_scale_follows_input() {
    let cfg = small_model_config();
    let (model, store, x) = model_setup(&cfg);
    let shifted = x.map(|v| 10.0 * v + 50.0);
    let run = |x: &Tensor| {
        let mut tape = Tape::no_grad();
        let y = model.forward(&mut tape, &store, x, &vec![vec![0, 1]; 3], false, &mut SeedRng::new(0)).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(&x), run(&shifted));
    let (_, sa) = instance_normalize(&x).unwrap();
    let (_, sb) = instance_normalize(&shifted).unwrap();
    for bi in 0..3 {
        for t in 0..cfg.horizon {
            for c in 0..2 {
                let za = (a.at(&[bi, t, c]) - sa.mean.at(&[bi, c])) / (sa.std.at(&[bi, c]) + sa.epsilon);
                let zb = (b.at(&[bi, t, c]) - sb.mean.at(&[bi, c])) / (sb.std.at(&[bi, c]) + sb.epsilon);
                assert!((za - zb).abs() < 1e-4, "{za} vs {zb}");
            }
        }
    }
}

#[test]
fn per_variable_mode_runs_each_variable_alone() {
    let cfg = ModelConfig {
        n_vars: 3,
        vst: false,
        ..small_model_config()
    };
    let (model, store, x) = model_setup(&cfg);
    let run = |x: &Tensor| {
        let mut tape = Tape::no_grad();
        let y = model.forward(&mut tape, &store, x, &vec![vec![0, 1, 2]; 3], false, &mut SeedRng::new(0)).unwrap();
        tape.value(y).clone()
    };
    let base = run(&x);
    let mut moved = x.clone();
    for t in 0..cfg.lookback {
        moved.set(&[0, t, 2], x.at(&[0, t, 2]) * 3.0 + (t as f64).sin());
    }
    let y = run(&moved);
    for t in 0..cfg.horizon {
        for c in 0..2 {
            assert_eq!(y.at(&[0, t, c]), base.at(&[0, t, c]));
        }
    }
}

#[test]
fn wrong_input_shape_is_a_shape_error() {
    let cfg = small_model_config();
    let (model, store, _) = model_setup(&cfg);
    let x = Tensor::zeros(&[1, cfg.lookback + 1, cfg.n_vars]);
    let mut tape = Tape::no_grad();
    let err = model.forward(&mut tape, &store, &x, &[vec![0, 1]], false, &mut SeedRng::new(0)).unwrap_err();
    assert!(matches!(err, varscan::Error::Shape(_)));
}
