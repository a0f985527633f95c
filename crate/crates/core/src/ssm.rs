//! Selective state-space layer: input-dependent step size and projections,
//! zero-order-hold discretization of a diagonal state matrix, and the
//! sequential left-to-right scan.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{softplus_inverse, ParamStore, SeedRng, Tape, Tensor, Var};

/// Below this `|Δ·A|` the input coefficient uses its small-argument limit `Δ`.
pub const TAYLOR_THRESHOLD: f64 = 1e-8;

/// Zero-order-hold coefficients for one `(Δ, a)` pair: `(exp(Δa), (exp(Δa) - 1) / a)`.
#[inline]
pub fn zoh_scalar(delta: f64, a: f64) -> (f64, f64) {
    let x = delta * a;
    if x.abs() >= 1e-3 {
        // exp(x) - 1 loses at most ~1e-13 relative accuracy here
        let abar = x.exp();
        return (abar, (abar - 1.0) / a);
    }
    let em1 = x.exp_m1();
    let coef = if x.abs() < TAYLOR_THRESHOLD { zoh_taylor(delta, a).1 } else { em1 / a };
    (1.0 + em1, coef)
}

/// First-order small-`|Δa|` limit of [`zoh_scalar`]: `(1 + Δa, Δ)`.
#[inline]
pub fn zoh_taylor(delta: f64, a: f64) -> (f64, f64) {
    (1.0 + delta * a, delta)
}

/// `(x·eˣ − (eˣ − 1)) / x²`; scaled by `Δ²` this is `∂coef/∂a`.
#[inline]
fn coef_a_factor(x: f64, em1: f64) -> f64 {
    if x.abs() < 1e-2 {
        0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x / 144.0)))
    } else {
        (x * (1.0 + em1) - em1) / (x * x)
    }
}

/// Discretizes `A: [d_inner, d_state]` for every step of `delta: [batch, seq, d_inner]`.
///
/// Returns `(Ā, coef)`, both `[batch, seq, d_inner, d_state]`, with
/// `Ā = exp(Δ·A)` and `coef = (exp(Δ·A) − 1) / A`, so that the discretized
/// input matrix is `coef · B` at scan time.
pub fn discretize_zoh(a: &Tensor, delta: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let [batch, seq, d_inner] = dims3(delta, "delta")?;
    if a.rank() != 2 || a.shape()[0] != d_inner {
        return Err(Error::Shape(format!(
            "state matrix {:?} does not match d_inner {d_inner}",
            a.shape()
        )));
    }
    let d_state = a.shape()[1];
    b.expect_shape(&[batch, seq, d_state], "input projection B")?;
    if let Some(bad) = delta.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::Param(format!("step size must be positive, got {bad}")));
    }
    let shape = [batch, seq, d_inner, d_state];
    let mut abar = Tensor::zeros(&shape);
    let mut coef = Tensor::zeros(&shape);
    for (row, &dt) in delta.data().iter().enumerate() {
        let i = row % d_inner;
        for n in 0..d_state {
            let (ab, c) = zoh_scalar(dt, a.data()[i * d_state + n]);
            abar.data_mut()[row * d_state + n] = ab;
            coef.data_mut()[row * d_state + n] = c;
        }
    }
    Ok((abar, coef))
}

fn dims3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    match t.shape() {
        &[a, b, c] => Ok([a, b, c]),
        s => Err(Error::Shape(format!("{what} must be rank 3, got {s:?}"))),
    }
}

/// Names and sizes of one selective SSM's parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub prefix: String,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

/// Tape handles for an [`SsmParams`] set.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt_down: Var,
    pub w_dt_up: Var,
    pub dt_bias: Var,
}

impl SsmParams {
    pub fn new(prefix: impl Into<String>, d_inner: usize, d_state: usize) -> Result<Self> {
        if d_inner == 0 || d_state == 0 {
            return Err(Error::Config("d_inner and d_state must be at least 1".into()));
        }
        Ok(Self {
            prefix: prefix.into(),
            d_inner,
            d_state,
            dt_rank: d_inner.div_ceil(16),
        })
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    /// Registers freshly initialized parameters.
    ///
    /// `−A` spans `1..=d_state` in every channel, and `dt_bias` is chosen so
    /// the initial step size is log-uniform in `[0.001, 0.1]`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
        let (di, ds, dr) = (self.d_inner, self.d_state, self.dt_rank);
        let a_log = Tensor::from_fn(&[di, ds], |k| ((k % ds) as f64 + 1.0).ln());
        store.insert(self.name("A_log"), a_log)?;
        store.insert(self.name("D"), Tensor::ones(&[di]))?;
        let bound = 1.0 / (di as f64).sqrt();
        store.insert(self.name("W_B"), uniform(rng, &[ds, di], bound))?;
        store.insert(self.name("W_C"), uniform(rng, &[ds, di], bound))?;
        store.insert(self.name("W_dt_down"), uniform(rng, &[dr, di], bound))?;
        store.insert(self.name("W_dt_up"), uniform(rng, &[di, dr], (dr as f64).powf(-0.5)))?;
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let dt_bias = Tensor::from_fn(&[di], |_| softplus_inverse(rng.uniform_in(lo, hi).exp()));
        store.insert(self.name("dt_bias"), dt_bias)?;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<SsmVars> {
        Ok(SsmVars {
            a_log: tape.param(store, &self.name("A_log"))?,
            d_skip: tape.param(store, &self.name("D"))?,
            w_b: tape.param(store, &self.name("W_B"))?,
            w_c: tape.param(store, &self.name("W_C"))?,
            w_dt_down: tape.param(store, &self.name("W_dt_down"))?,
            w_dt_up: tape.param(store, &self.name("W_dt_up"))?,
            dt_bias: tape.param(store, &self.name("dt_bias"))?,
        })
    }
}

pub(crate) fn uniform(rng: &mut SeedRng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_in(-bound, bound))
}

/// Input-dependent SSM parameters for one sequence batch.
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    /// The scan input: `u` after dropout.
    pub input: Var,
    pub delta: Var,
    pub b: Var,
    pub c: Var,
}

/// Computes `Δ = softplus(dt_up(dt_down(u)) + dt_bias)`, `B = u·W_Bᵀ`, `C = u·W_Cᵀ`
/// from `u: [batch, seq, d_inner]`, with dropout applied to `u` first in training mode.
pub fn select_parameters(
    tape: &mut Tape,
    u: Var,
    vars: &SsmVars,
    dropout_rate: f64,
    training: bool,
    rng: &mut SeedRng,
) -> Result<Selection> {
    dims3(tape.value(u), "ssm input")?;
    let input = tape.dropout(u, dropout_rate, training, rng)?;
    let low = tape.linear(input, vars.w_dt_down, None)?;
    let dt = tape.linear(low, vars.w_dt_up, Some(vars.dt_bias))?;
    let delta = tape.softplus(dt)?;
    let b = tape.linear(input, vars.w_b, None)?;
    let c = tape.linear(input, vars.w_c, None)?;
    Ok(Selection { input, delta, b, c })
}

/// Hidden state of the recurrence, `[batch, d_inner, d_state]`, zero at sequence start.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub h: Tensor,
}

impl ScanState {
    pub fn zeros(batch: usize, d_inner: usize, d_state: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, d_inner, d_state]),
        }
    }
}

/// Runs the recurrence `h_k = Ā_k h_{k−1} + coef_k B_k u_k`, `y_k = C_k·h_k + D ⊙ u_k`
/// strictly left to right and records it on the tape.
///
/// Shapes: `u, delta: [batch, seq, d_inner]`, `b, c: [batch, seq, d_state]`,
/// `a: [d_inner, d_state]` (already negated), `d_skip: [d_inner]`.
pub fn selective_scan(
    tape: &mut Tape,
    u: Var,
    delta: Var,
    b: Var,
    c: Var,
    a: Var,
    d_skip: Var,
) -> Result<Var> {
    let [batch, seq, d_inner] = dims3(tape.value(u), "scan input")?;
    tape.value(delta).expect_shape(&[batch, seq, d_inner], "scan delta")?;
    let av = tape.value(a);
    if av.rank() != 2 || av.shape()[0] != d_inner {
        return Err(Error::Shape(format!("state matrix {:?} does not match d_inner {d_inner}", av.shape())));
    }
    let d_state = av.shape()[1];
    tape.value(b).expect_shape(&[batch, seq, d_state], "scan B")?;
    tape.value(c).expect_shape(&[batch, seq, d_state], "scan C")?;
    tape.value(d_skip).expect_shape(&[d_inner], "scan D")?;
    if let Some(bad) = tape.value(delta).data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::Param(format!("step size must be positive, got {bad}")));
    }

    let keep = tape.grad_enabled();
    let (ud, dd, bd, cd, ad, skip) = (
        tape.value(u).data(),
        tape.value(delta).data(),
        tape.value(b).data(),
        tape.value(c).data(),
        tape.value(a).data(),
        tape.value(d_skip).data(),
    );
    let per_step = d_inner * d_state;
    let mut states = if keep { vec![0.0; batch * seq * per_step] } else { Vec::new() };
    let mut decay = if keep { vec![0.0; batch * seq * per_step] } else { Vec::new() };
    let mut y = vec![0.0; batch * seq * d_inner];
    let mut state = ScanState::zeros(batch, d_inner, d_state);
    for bi in 0..batch {
        let h = &mut state.h.data_mut()[bi * per_step..(bi + 1) * per_step];
        for t in 0..seq {
            let row = bi * seq + t;
            let (bt, ct) = (&bd[row * d_state..(row + 1) * d_state], &cd[row * d_state..(row + 1) * d_state]);
            for i in 0..d_inner {
                let x = row * d_inner + i;
                let (dt, ut) = (dd[x], ud[x]);
                let hi = &mut h[i * d_state..(i + 1) * d_state];
                let ai = &ad[i * d_state..(i + 1) * d_state];
                let mut acc = 0.0;
                for n in 0..d_state {
                    let (abar, coef) = zoh_scalar(dt, ai[n]);
                    hi[n] = abar * hi[n] + coef * bt[n] * ut;
                    acc += ct[n] * hi[n];
                    if keep {
                        decay[row * per_step + i * d_state + n] = abar;
                    }
                }
                let out = acc + skip[i] * ut;
                if !out.is_finite() {
                    return Err(Error::Numeric(format!(
                        "selective scan diverged at step {t} (batch {bi}, channel {i})"
                    )));
                }
                y[x] = out;
            }
            if keep {
                let off = row * per_step;
                states[off..off + per_step].copy_from_slice(h);
            }
        }
    }
    let value = Tensor::new(&[batch, seq, d_inner], y)?;
    let states = Rc::new(states);
    let decay = Rc::new(decay);
    tape.push_op("selective_scan", value, &[u, delta, b, c, a, d_skip], move |ctx| {
        let (ud, dd, bd, cd, ad, skip) = (
            ctx.inputs[0].data(),
            ctx.inputs[1].data(),
            ctx.inputs[2].data(),
            ctx.inputs[3].data(),
            ctx.inputs[4].data(),
            ctx.inputs[5].data(),
        );
        let gy = ctx.grad.data();
        let mut gu = vec![0.0; ud.len()];
        let mut gdelta = vec![0.0; dd.len()];
        let mut gb = vec![0.0; bd.len()];
        let mut gc = vec![0.0; cd.len()];
        let mut ga = vec![0.0; ad.len()];
        let mut gskip = vec![0.0; skip.len()];
        let mut carry = vec![0.0; per_step];
        for bi in 0..batch {
            carry.fill(0.0);
            for t in (0..seq).rev() {
                let row = bi * seq + t;
                let hs = &states[row * per_step..(row + 1) * per_step];
                let abars = &decay[row * per_step..(row + 1) * per_step];
                let prev = (t > 0).then(|| &states[(row - 1) * per_step..row * per_step]);
                for i in 0..d_inner {
                    let x = row * d_inner + i;
                    let (dt, ut, g_out) = (dd[x], ud[x], gy[x]);
                    gskip[i] += g_out * ut;
                    let mut g_u = g_out * skip[i];
                    let mut g_dt = 0.0;
                    for n in 0..d_state {
                        let k = i * d_state + n;
                        let a = ad[k];
                        let (bn, cn) = (bd[row * d_state + n], cd[row * d_state + n]);
                        gc[row * d_state + n] += g_out * hs[k];
                        let g = cn * g_out + carry[k];
                        let xa = dt * a;
                        let abar = abars[k];
                        let taylor = xa.abs() < TAYLOR_THRESHOLD;
                        let em1 = if xa.abs() >= 1e-3 { abar - 1.0 } else { xa.exp_m1() };
                        let coef = if taylor { dt } else { em1 / a };
                        let h_prev = prev.map_or(0.0, |p| p[k]);
                        let g_abar = g * h_prev;
                        let g_coef = g * bn * ut;
                        g_u += g * coef * bn;
                        gb[row * d_state + n] += g * coef * ut;
                        let (dcoef_dt, dcoef_da) = if taylor {
                            (1.0, 0.5 * dt * dt)
                        } else {
                            (abar, dt * dt * coef_a_factor(xa, em1))
                        };
                        g_dt += g_abar * a * abar + g_coef * dcoef_dt;
                        ga[k] += g_abar * dt * abar + g_coef * dcoef_da;
                        carry[k] = abar * g;
                    }
                    gu[x] += g_u;
                    gdelta[x] += g_dt;
                }
            }
        }
        let shape = |i: usize| ctx.inputs[i].shape();
        Ok(vec![
            Some(Tensor::new(shape(0), gu)?),
            Some(Tensor::new(shape(1), gdelta)?),
            Some(Tensor::new(shape(2), gb)?),
            Some(Tensor::new(shape(3), gc)?),
            Some(Tensor::new(shape(4), ga)?),
            Some(Tensor::new(shape(5), gskip)?),
        ])
    })
}

/// Full selective SSM: parameter selection followed by the scan.
pub fn ssm_forward(
    tape: &mut Tape,
    u: Var,
    vars: &SsmVars,
    dropout_rate: f64,
    training: bool,
    rng: &mut SeedRng,
) -> Result<Var> {
    let sel = select_parameters(tape, u, vars, dropout_rate, training, rng)?;
    let a = tape.neg_exp(vars.a_log)?;
    selective_scan(tape, sel.input, sel.delta, sel.b, sel.c, a, vars.d_skip)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_closed_form() {
        let (abar, coef) = zoh_scalar(0.1, -1.0);
        assert!((abar - (-0.1f64).exp()).abs() < 1e-15);
        assert!((abar - 0.904_837).abs() < 1e-6);
        assert!((coef - 0.095_163).abs() < 1e-6);
    }

    #[test]
    fn zoh_limits() {
        let (abar, coef) = zoh_scalar(1e-12, -3.0);
        assert!((abar - 1.0).abs() < 1e-11);
        assert_eq!(coef, 1e-12);
        let (_, coef) = zoh_scalar(0.5, -1e-10);
        assert_eq!(coef, 0.5);
        let (_, coef) = zoh_scalar(0.5, 0.0);
        assert_eq!(coef, 0.5);
    }

    #[test]
    fn coefficient_derivative_series_matches_closed_form() {
        for x in [-9.9e-3, -5e-3, -1e-3, 1e-3, 9.9e-3] {
            let em1 = f64::exp_m1(x);
            let closed = (x * (1.0 + em1) - em1) / (x * x);
            assert!((coef_a_factor(x, em1) - closed).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn discretize_rejects_non_positive_step() {
        let a = Tensor::full(&[1, 1], -1.0);
        let delta = Tensor::new(&[1, 2, 1], vec![0.1, 0.0]).unwrap();
        let b = Tensor::ones(&[1, 2, 1]);
        assert!(matches!(discretize_zoh(&a, &delta, &b), Err(Error::Param(_))));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut tape = Tape::new();
        let (bt, s, di, ds) = (2, 5, 3, 2);
        let u = tape.constant(Tensor::zeros(&[bt, s, di]));
        let delta = tape.constant(Tensor::full(&[bt, s, di], 0.1));
        let b = tape.constant(Tensor::ones(&[bt, s, ds]));
        let c = tape.constant(Tensor::ones(&[bt, s, ds]));
        let a = tape.constant(Tensor::full(&[di, ds], -1.0));
        let d = tape.constant(Tensor::ones(&[di]));
        let y = selective_scan(&mut tape, u, delta, b, c, a, d).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[1, 1, 1], 2.0));
        let delta = tape.constant(Tensor::full(&[1, 1, 1], 0.3));
        let b = tape.constant(Tensor::full(&[1, 1, 1], 0.7));
        let c = tape.constant(Tensor::full(&[1, 1, 1], -1.5));
        let a = tape.constant(Tensor::full(&[1, 1], -2.0));
        let d = tape.constant(Tensor::full(&[1], 0.25));
        let y = selective_scan(&mut tape, u, delta, b, c, a, d).unwrap();
        let coef = (-0.6f64).exp_m1() / -2.0;
        let h1 = coef * 0.7 * 2.0;
        let expected = -1.5 * h1 + 0.25 * 2.0;
        assert!((tape.value(y).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn three_step_scalar_recurrence() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::ones(&[1, 3, 1]));
        let delta = tape.constant(Tensor::full(&[1, 3, 1], 0.1));
        let b = tape.constant(Tensor::ones(&[1, 3, 1]));
        let c = tape.constant(Tensor::ones(&[1, 3, 1]));
        let a = tape.constant(Tensor::full(&[1, 1], -1.0));
        let d = tape.constant(Tensor::zeros(&[1]));
        let y = selective_scan(&mut tape, u, delta, b, c, a, d).unwrap();
        // h1 = 0.0951626, h2 = 0.9048374 h1 + 0.0951626, h3 likewise
        let abar = (-0.1f64).exp();
        let bbar = 1.0 - abar;
        let h1 = bbar;
        let h2 = abar * h1 + bbar;
        let h3 = abar * h2 + bbar;
        let got = tape.value(y).data();
        for (g, e) in got.iter().zip([h1, h2, h3]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_selection() {
        let mut store = ParamStore::new();
        let p = SsmParams::new("ssm", 4, 3).unwrap();
        p.init(&mut store, &mut SeedRng::new(1)).unwrap();
        store.set("ssm.dt_bias", Tensor::zeros(&[4])).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &store).unwrap();
        let u = tape.constant(Tensor::zeros(&[2, 5, 4]));
        let sel = select_parameters(&mut tape, u, &vars, 0.0, true, &mut SeedRng::new(2)).unwrap();
        assert!(tape.value(sel.delta).data().iter().all(|&d| (d - std::f64::consts::LN_2).abs() < 1e-15));
        assert!(tape.value(sel.b).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(sel.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_step_range_and_stable_spectrum() {
        let mut store = ParamStore::new();
        let p = SsmParams::new("s", 32, 8).unwrap();
        assert_eq!(p.dt_rank, 2);
        p.init(&mut store, &mut SeedRng::new(3)).unwrap();
        for &b in store.get("s.dt_bias").unwrap().data() {
            let dt = crate::numerics::softplus_scalar(b);
            assert!((0.001 - 1e-12..=0.1 + 1e-12).contains(&dt));
        }
        let a_log = store.get("s.A_log").unwrap();
        assert_eq!(a_log.at(&[5, 0]).exp(), 1.0);
        assert!((a_log.at(&[5, 7]).exp() - 8.0).abs() < 1e-12);
    }
}
