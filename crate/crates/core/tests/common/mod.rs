//! Oracles and fixtures shared by the integration and acceptance targets.
#![allow(dead_code)]

use varscan::block::{encoder_forward, tmb_forward, vanilla_block_forward, BlockParams, EncoderParams};
use varscan::config::{BlockKind, GateMode, ModelConfig};
use varscan::numerics::{grad_check, GradCheckReport, ParamStore, SeedRng, Tape, Tensor, Var};
use varscan::pipeline::Model;
use varscan::ssm::{selective_scan, ssm_forward, SsmParams};
use varscan::train::mse_loss_var;
use varscan::Result;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

pub fn normal(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

pub fn uniform(rng: &mut SeedRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

/// Plain nested-loop recurrence, written without any of the engine's helpers.
///
/// `u, delta: [B,S,D]`, `b, c: [B,S,N]`, `a: [D,N]` (negative), `d: [D]`.
pub fn naive_scan(u: &Tensor, delta: &Tensor, b: &Tensor, c: &Tensor, a: &Tensor, d: &Tensor) -> Tensor {
    let (bs, s, di) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = a.shape()[1];
    let mut y = vec![0.0; bs * s * di];
    for bi in 0..bs {
        let mut h = vec![vec![0.0; n]; di];
        for t in 0..s {
            for ch in 0..di {
                let x = u.at(&[bi, t, ch]);
                let dt = delta.at(&[bi, t, ch]);
                let mut out = d.at(&[ch]) * x;
                for st in 0..n {
                    let av = a.at(&[ch, st]);
                    let da = dt * av;
                    let decay = da.exp();
                    let gain = if da.abs() < 1e-8 { dt } else { (decay - 1.0) / av };
                    h[ch][st] = decay * h[ch][st] + gain * b.at(&[bi, t, st]) * x;
                    out += c.at(&[bi, t, st]) * h[ch][st];
                }
                y[(bi * s + t) * di + ch] = out;
            }
        }
    }
    Tensor::new(&[bs, s, di], y).unwrap()
}

/// Random scan operands: `(u, delta, b, c, a, d)`.
pub fn scan_instance(rng: &mut SeedRng, batch: usize, seq: usize, di: usize, n: usize) -> [Tensor; 6] {
    [
        normal(rng, &[batch, seq, di]),
        uniform(rng, &[batch, seq, di], 0.001, 1.0),
        normal(rng, &[batch, seq, n]),
        normal(rng, &[batch, seq, n]),
        uniform(rng, &[di, n], -3.0, -0.05),
        normal(rng, &[di]),
    ]
}

pub fn engine_scan(ops: &[Tensor; 6]) -> Tensor {
    let mut tape = Tape::no_grad();
    let v: Vec<Var> = ops.iter().map(|t| tape.input(t.clone())).collect();
    let y = selective_scan(&mut tape, v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
    tape.value(y).clone()
}

/// Random weighted sum of `out`, so every output element carries an O(1)
/// gradient.
pub fn projected(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = SeedRng::new(seed).split("projection");
    let w = normal(&mut rng, tape.shape(out));
    tape.weighted_sum(out, w)
}

fn store_of(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).unwrap();
    }
    s
}

/// One named gradient case.
pub struct GradCase {
    pub name: &'static str,
    pub run: fn() -> Result<GradCheckReport>,
}

fn check<F>(mut store: ParamStore, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check(&mut store, GRAD_STEP, f)
}

fn r(seed: u64) -> SeedRng {
    SeedRng::new(seed).split("grad_case")
}

fn case_linear() -> Result<GradCheckReport> {
    let mut g = r(1);
    let s = store_of(vec![("x", normal(&mut g, &[2, 3, 4])), ("w", normal(&mut g, &[5, 4])), ("b", normal(&mut g, &[5]))]);
    check(s, |t, s| {
        let (x, w, b) = (t.param(s, "x")?, t.param(s, "w")?, t.param(s, "b")?);
        let y = t.linear(x, w, Some(b))?;
        projected(t, y, 1)
    })
}

fn unary(seed: u64, op: fn(&mut Tape, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut g = r(seed);
    let s = store_of(vec![("x", normal(&mut g, &[3, 5]))]);
    check(s, move |t, s| {
        let x = t.param(s, "x")?;
        let y = op(t, x)?;
        projected(t, y, seed)
    })
}

fn case_silu() -> Result<GradCheckReport> {
    unary(2, |t, x| t.silu(x))
}

fn case_softplus() -> Result<GradCheckReport> {
    unary(3, |t, x| t.softplus(x))
}

fn case_neg_exp() -> Result<GradCheckReport> {
    unary(4, |t, x| t.neg_exp(x))
}

fn case_dropout() -> Result<GradCheckReport> {
    unary(5, |t, x| {
        let mut rng = SeedRng::new(77);
        t.dropout(x, 0.3, true, &mut rng)
    })
}

fn case_reshape() -> Result<GradCheckReport> {
    unary(6, |t, x| t.reshape(x, &[5, 3]))
}

fn case_sum_mean_squares() -> Result<GradCheckReport> {
    unary(7, |t, x| {
        let a = t.sum(x)?;
        let b = t.mean(x)?;
        let c = t.sum_squares(x)?;
        let ab = t.mul(a, b)?;
        t.add(ab, c)
    })
}

fn case_add_mul() -> Result<GradCheckReport> {
    let mut g = r(8);
    let s = store_of(vec![("a", normal(&mut g, &[4, 3])), ("b", normal(&mut g, &[4, 3]))]);
    check(s, |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        let p = t.mul(a, b)?;
        let q = t.add(p, a)?;
        projected(t, q, 8)
    })
}

fn case_affine_const() -> Result<GradCheckReport> {
    let mut g = r(9);
    let scale = normal(&mut g, &[2, 6]);
    let shift = normal(&mut g, &[2, 6]);
    let s = store_of(vec![("x", normal(&mut g, &[2, 6]))]);
    check(s, move |t, s| {
        let x = t.param(s, "x")?;
        let y = t.affine_const(x, scale.clone(), &shift)?;
        projected(t, y, 9)
    })
}

fn case_layer_norm() -> Result<GradCheckReport> {
    let mut g = r(10);
    let s = store_of(vec![
        ("x", normal(&mut g, &[2, 3, 6])),
        ("scale", normal(&mut g, &[6])),
        ("bias", normal(&mut g, &[6])),
    ]);
    check(s, |t, s| {
        let (x, a, b) = (t.param(s, "x")?, t.param(s, "scale")?, t.param(s, "bias")?);
        let y = t.layer_norm(x, a, b, 1e-5)?;
        projected(t, y, 10)
    })
}

fn case_gather_rows() -> Result<GradCheckReport> {
    let mut g = r(11);
    let s = store_of(vec![("x", normal(&mut g, &[4, 3]))]);
    check(s, |t, s| {
        let x = t.param(s, "x")?;
        let y = t.gather_rows(x, 3, vec![2, 0, 3, 1, 2], &[5, 3])?;
        projected(t, y, 11)
    })
}

fn case_causal_conv() -> Result<GradCheckReport> {
    let mut g = r(12);
    let s = store_of(vec![("x", normal(&mut g, &[2, 7, 3])), ("k", normal(&mut g, &[3, 4]))]);
    check(s, |t, s| {
        let (x, k) = (t.param(s, "x")?, t.param(s, "k")?);
        let y = t.causal_conv(x, k)?;
        projected(t, y, 12)
    })
}

fn case_mse() -> Result<GradCheckReport> {
    let mut g = r(13);
    let target = normal(&mut g, &[3, 4, 2]);
    let s = store_of(vec![("p", normal(&mut g, &[3, 4, 2]))]);
    check(s, move |t, s| {
        let p = t.param(s, "p")?;
        Ok(mse_loss_var(t, p, &target)?.0)
    })
}

fn case_scan() -> Result<GradCheckReport> {
    let mut g = r(14);
    let [u, delta, b, c, a, d] = scan_instance(&mut g, 2, 6, 3, 4);
    let s = store_of(vec![("u", u), ("delta", delta), ("b", b), ("c", c), ("a", a), ("d", d)]);
    check(s, |t, s| {
        let v: Vec<Var> = ["u", "delta", "b", "c", "a", "d"].iter().map(|n| t.param(s, n)).collect::<Result<_>>()?;
        let y = selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5])?;
        projected(t, y, 14)
    })
}

fn case_ssm_params() -> Result<GradCheckReport> {
    let mut g = r(15);
    let p = SsmParams::new("ssm", 4, 3).unwrap();
    let mut s = ParamStore::new();
    p.init(&mut s, &mut g).unwrap();
    s.insert("u", normal(&mut g, &[2, 5, 4])).unwrap();
    randomize(&mut s, &mut g);
    check(s, move |t, s| {
        let vars = p.bind(t, s)?;
        let u = t.param(s, "u")?;
        let mut rng = SeedRng::new(5);
        let y = ssm_forward(t, u, &vars, 0.2, true, &mut rng)?;
        projected(t, y, 15)
    })
}

/// Redraws every parameter from N(0, 1), with weight matrices scaled by
/// `1/sqrt(fan_in)` so activations stay O(1). The initial values (tiny step
/// sizes, zero biases, unit norms) leave some gradients near the
/// finite-difference noise floor, and unscaled weights blow the loss up until
/// round-off in the central difference dominates.
pub fn randomize(store: &mut ParamStore, rng: &mut SeedRng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        let mut t = normal(rng, &shape);
        let is_weight = ["proj", "W_", "weight", "conv_kernel"].iter().any(|k| name.contains(k));
        if is_weight && shape.len() == 2 {
            let scale = 1.0 / (shape[1] as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        store.set(&name, t).unwrap();
    }
}

fn perturbed_block(kind: BlockKind, seed: u64) -> (BlockParams, ParamStore) {
    let mut g = r(seed);
    let p = BlockParams::new("blk", kind, 4, 2, 3, 3).unwrap();
    let mut s = ParamStore::new();
    p.init(&mut s, &mut g).unwrap();
    randomize(&mut s, &mut g);
    s.insert("x", normal(&mut g, &[2, 5, 4])).unwrap();
    (p, s)
}

fn case_tmb() -> Result<GradCheckReport> {
    let (p, s) = perturbed_block(BlockKind::Temporal, 16);
    check(s, move |t, s| {
        let x = t.param(s, "x")?;
        let mut rng = SeedRng::new(6);
        let y = tmb_forward(t, s, x, &p, GateMode::Multiply, 0.2, true, &mut rng)?;
        projected(t, y, 16)
    })
}

fn case_tmb_additive() -> Result<GradCheckReport> {
    let (p, s) = perturbed_block(BlockKind::Temporal, 17);
    check(s, move |t, s| {
        let x = t.param(s, "x")?;
        let mut rng = SeedRng::new(7);
        let y = tmb_forward(t, s, x, &p, GateMode::Add, 0.0, false, &mut rng)?;
        projected(t, y, 17)
    })
}

fn case_vanilla_block() -> Result<GradCheckReport> {
    let (p, s) = perturbed_block(BlockKind::Vanilla, 18);
    check(s, move |t, s| {
        let x = t.param(s, "x")?;
        let mut rng = SeedRng::new(8);
        let y = vanilla_block_forward(t, s, x, &p, GateMode::Multiply, &mut rng)?;
        projected(t, y, 18)
    })
}

fn case_encoder_n2() -> Result<GradCheckReport> {
    let mut g = r(19);
    let enc = EncoderParams::new("encoder", BlockKind::Temporal, 2, 4, 2, 3, 4).unwrap();
    let mut s = ParamStore::new();
    enc.init(&mut s, &mut g).unwrap();
    randomize(&mut s, &mut g);
    s.insert("x", normal(&mut g, &[1, 16, 4])).unwrap();
    check(s, move |t, s| {
        let x = t.param(s, "x")?;
        let mut rng = SeedRng::new(9);
        let y = encoder_forward(t, s, x, &enc, GateMode::Multiply, 0.1, true, &mut rng)?;
        projected(t, y, 19)
    })
}

/// K=2, L=32, s=8, N=1 model configuration used by the full-model check.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        n_vars: 2,
        lookback: 32,
        horizon: 4,
        patch_len: 8,
        d_model: 6,
        depth: 1,
        d_state: 3,
        expand: 2,
        dropout_rate: 0.2,
        ..ModelConfig::default()
    }
}

fn case_full_model() -> Result<GradCheckReport> {
    let cfg = small_model_config();
    let model = Model::new(&cfg).unwrap();
    let mut s = model.init_params(3).unwrap();
    let mut g = r(20);
    randomize(&mut s, &mut g);
    let x = normal(&mut g, &[2, 32, 2]);
    let y = normal(&mut g, &[2, 4, 2]);
    check(s, move |t, s| {
        let mut rng = SeedRng::new(10);
        let pred = model.forward(t, s, &x, &[vec![1, 0], vec![0, 1]], true, &mut rng)?;
        Ok(mse_loss_var(t, pred, &y)?.0)
    })
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "linear", run: case_linear },
        GradCase { name: "silu", run: case_silu },
        GradCase { name: "softplus", run: case_softplus },
        GradCase { name: "neg_exp", run: case_neg_exp },
        GradCase { name: "dropout", run: case_dropout },
        GradCase { name: "reshape", run: case_reshape },
        GradCase { name: "sum/mean/sum_squares", run: case_sum_mean_squares },
        GradCase { name: "add/mul", run: case_add_mul },
        GradCase { name: "affine_const", run: case_affine_const },
        GradCase { name: "layer_norm", run: case_layer_norm },
        GradCase { name: "gather_rows", run: case_gather_rows },
        GradCase { name: "causal_conv", run: case_causal_conv },
        GradCase { name: "mse_loss", run: case_mse },
        GradCase { name: "selective_scan", run: case_scan },
        GradCase { name: "ssm parameters", run: case_ssm_params },
        GradCase { name: "tmb (multiply gate)", run: case_tmb },
        GradCase { name: "tmb (additive gate)", run: case_tmb_additive },
        GradCase { name: "vanilla block", run: case_vanilla_block },
        GradCase { name: "encoder N=2 seq=16", run: case_encoder_n2 },
        GradCase { name: "full model K=2 L=32 s=8 N=1", run: case_full_model },
    ]
}

/// Second enumerator over all orders (Heap's algorithm), independent of the
/// engine's solver; returns the minimal cost.
pub fn heap_min_cost(cost: &[f64], k: usize) -> f64 {
    let mut a: Vec<usize> = (0..k).collect();
    let eval = |a: &[usize]| a.windows(2).map(|w| cost[w[0] * k + w[1]]).sum::<f64>();
    let mut best = eval(&a);
    let mut c = vec![0usize; k];
    let mut i = 1;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            best = best.min(eval(&a));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}
