//! The forecasting pipeline around the encoder:
//! instance normalization → patch embedding → variable scan along time →
//! encoder → restore per-variable layout → channel-independent head →
//! denormalization.

use crate::block::{encoder_forward, EncoderParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result, ResultExt};
use crate::numerics::{ParamStore, SeedRng, Tape, Tensor, Var};
use crate::ssm::uniform;

pub const NORM_EPSILON: f64 = 1e-5;

/// Per-window, per-channel statistics replayed by [`denormalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    /// `[batch, K]`
    pub mean: Tensor,
    /// Population standard deviation, `[batch, K]`.
    pub std: Tensor,
    pub epsilon: f64,
}

/// Standardizes each channel of `x: [batch, L, K]` over its window.
pub fn instance_normalize(x: &Tensor) -> Result<(Tensor, NormStats)> {
    let &[batch, len, k] = x.shape() else {
        return Err(Error::Shape(format!("expected [batch, L, K], got {:?}", x.shape())));
    };
    let mut mean = Tensor::zeros(&[batch, k]);
    let mut std = Tensor::zeros(&[batch, k]);
    let mut out = x.clone();
    let d = x.data();
    for b in 0..batch {
        for c in 0..k {
            let at = |t: usize| d[(b * len + t) * k + c];
            let mu = (0..len).map(at).sum::<f64>() / len as f64;
            let var = (0..len).map(|t| (at(t) - mu).powi(2)).sum::<f64>() / len as f64;
            let sigma = var.sqrt();
            mean.data_mut()[b * k + c] = mu;
            std.data_mut()[b * k + c] = sigma;
            let denom = sigma + NORM_EPSILON;
            for t in 0..len {
                let i = (b * len + t) * k + c;
                out.data_mut()[i] = (d[i] - mu) / denom;
            }
        }
    }
    Ok((
        out,
        NormStats {
            mean,
            std,
            epsilon: NORM_EPSILON,
        },
    ))
}

/// `y = y_norm · (std + ε) + mean` for `y_norm: [batch, T, K]`.
pub fn denormalize(tape: &mut Tape, y_norm: Var, stats: &NormStats) -> Result<Var> {
    let &[batch, horizon, k] = tape.shape(y_norm) else {
        return Err(Error::Shape(format!("expected [batch, T, K], got {:?}", tape.shape(y_norm))));
    };
    if stats.mean.shape() != [batch, k] || stats.std.shape() != [batch, k] {
        return Err(Error::Shape(format!(
            "statistics {:?} do not match forecast [batch={batch}, K={k}]",
            stats.mean.shape()
        )));
    }
    let shape = [batch, horizon, k];
    let scale = Tensor::from_fn(&shape, |i| {
        let (b, c) = (i / (horizon * k), i % k);
        stats.std.data()[b * k + c] + stats.epsilon
    });
    let shift = Tensor::from_fn(&shape, |i| {
        let (b, c) = (i / (horizon * k), i % k);
        stats.mean.data()[b * k + c]
    });
    tape.affine_const(y_norm, scale, &shift)
}

/// Splits each channel of `x_norm: [batch, L, K]` into `M = L / s` non-overlapping
/// patches and embeds each to `d_model`, giving `[batch, K, M, d_model]`.
pub fn patchify_embed(tape: &mut Tape, x_norm: &Tensor, embed_w: Var, embed_b: Option<Var>) -> Result<Var> {
    let &[batch, len, k] = x_norm.shape() else {
        return Err(Error::Shape(format!("expected [batch, L, K], got {:?}", x_norm.shape())));
    };
    let &[d_model, s] = tape.shape(embed_w) else {
        return Err(Error::Shape("embedding weight must be [d_model, s]".into()));
    };
    if len % s != 0 {
        return Err(Error::Config(format!("lookback {len} is not divisible by patch length {s}")));
    }
    let m = len / s;
    let d = x_norm.data();
    let patches = Tensor::from_fn(&[batch, k, m, s], |i| {
        let j = i % s;
        let p = (i / s) % m;
        let c = (i / (s * m)) % k;
        let b = i / (s * m * k);
        d[(b * len + p * s + j) * k + c]
    });
    let x = tape.constant(patches);
    let y = tape.linear(x, embed_w, embed_b)?;
    debug_assert_eq!(tape.shape(y), &[batch, k, m, d_model]);
    Ok(y)
}

/// Token layout fed to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[batch, K·M, d]`: all variables of patch 0 (in permutation order), then patch 1, ...
    Vst,
    /// `[batch·K, M, d]`: each variable is its own sequence.
    PerVariable,
}

/// Encoder input plus the bookkeeping needed to undo the arrangement.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    /// Variable order per sample; `perms[b][r]` is the variable at rank `r`.
    pub perms: Vec<Vec<usize>>,
    pub layout: Layout,
    pub n_vars: usize,
    pub n_patches: usize,
    pub d_model: usize,
}

pub fn is_permutation(perm: &[usize], k: usize) -> bool {
    if perm.len() != k {
        return false;
    }
    let mut seen = vec![false; k];
    perm.iter().all(|&v| v < k && !std::mem::replace(&mut seen[v], true))
}

fn dims4(tape: &Tape, v: Var) -> Result<[usize; 4]> {
    match tape.shape(v) {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::Shape(format!("expected [batch, K, M, d], got {s:?}"))),
    }
}

/// Interleaves `tokens: [batch, K, M, d]` so flat position `m·K + r` holds
/// variable `perms[b][r]` at patch `m`.
pub fn vst_arrange(tape: &mut Tape, tokens: Var, perms: &[Vec<usize>]) -> Result<TokenSequence> {
    let [batch, k, m, d] = dims4(tape, tokens)?;
    if perms.len() != batch {
        return Err(Error::Param(format!("{} permutations for a batch of {batch}", perms.len())));
    }
    if let Some(bad) = perms.iter().find(|p| !is_permutation(p, k)) {
        return Err(Error::Param(format!("{bad:?} is not a permutation of 0..{k}")));
    }
    let mut index = Vec::with_capacity(batch * k * m);
    for (b, perm) in perms.iter().enumerate() {
        for p in 0..m {
            for &v in perm {
                index.push((b * k + v) * m + p);
            }
        }
    }
    let arranged = tape.gather_rows(tokens, d, index, &[batch, k * m, d])?;
    Ok(TokenSequence {
        tokens: arranged,
        perms: perms.to_vec(),
        layout: Layout::Vst,
        n_vars: k,
        n_patches: m,
        d_model: d,
    })
}

/// Per-variable layout: `[batch·K, M, d]`, a pure reshape.
pub fn per_variable_arrange(tape: &mut Tape, tokens: Var) -> Result<TokenSequence> {
    let [batch, k, m, d] = dims4(tape, tokens)?;
    let seq = tape.reshape(tokens, &[batch * k, m, d])?;
    Ok(TokenSequence {
        tokens: seq,
        perms: vec![(0..k).collect(); batch],
        layout: Layout::PerVariable,
        n_vars: k,
        n_patches: m,
        d_model: d,
    })
}

/// Inverse of [`vst_arrange`]: back to `[batch, K, M, d]`.
pub fn vst_restore(tape: &mut Tape, seq: &TokenSequence, encoded: Var) -> Result<Var> {
    if seq.layout != Layout::Vst {
        return Err(Error::State("vst_restore called on a per-variable sequence".into()));
    }
    let (k, m, d) = (seq.n_vars, seq.n_patches, seq.d_model);
    let batch = seq.perms.len();
    tape.value(encoded).expect_shape(&[batch, k * m, d], "encoded tokens")?;
    let mut index = vec![0; batch * k * m];
    for (b, perm) in seq.perms.iter().enumerate() {
        for p in 0..m {
            for (r, &v) in perm.iter().enumerate() {
                index[(b * k + v) * m + p] = b * k * m + p * k + r;
            }
        }
    }
    tape.gather_rows(encoded, d, index, &[batch, k, m, d])
}

pub fn per_variable_restore(tape: &mut Tape, seq: &TokenSequence, encoded: Var) -> Result<Var> {
    if seq.layout != Layout::PerVariable {
        return Err(Error::State("per-variable restore called on an interleaved sequence".into()));
    }
    let batch = seq.perms.len();
    tape.reshape(encoded, &[batch, seq.n_vars, seq.n_patches, seq.d_model])
}

/// Shared linear head applied to each variable's flattened tokens:
/// `[batch, K, M, d] → [batch, T, K]`.
pub fn predict_head(tape: &mut Tape, encoded: Var, head_w: Var, head_b: Option<Var>) -> Result<Var> {
    let [batch, k, m, d] = dims4(tape, encoded)?;
    let flat = tape.reshape(encoded, &[batch, k, m * d])?;
    let y = tape.linear(flat, head_w, head_b)?;
    let horizon = tape.shape(head_w)[0];
    let mut index = Vec::with_capacity(batch * horizon * k);
    for b in 0..batch {
        for t in 0..horizon {
            for c in 0..k {
                index.push((b * k + c) * horizon + t);
            }
        }
    }
    tape.gather_rows(y, 1, index, &[batch, horizon, k])
}

/// Parameter layout and forward pass of the full forecaster.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::new(
            "encoder",
            config.block,
            config.depth,
            config.d_model,
            config.expand,
            config.d_state,
            config.conv_width,
        )?;
        Ok(Self {
            config: config.clone(),
            encoder,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let mut rng = SeedRng::new(seed).split("init");
        let mut store = ParamStore::new();
        let s = c.patch_len;
        store.insert("embed.weight", uniform(&mut rng, &[c.d_model, s], 1.0 / (s as f64).sqrt()))?;
        store.insert("embed.bias", uniform(&mut rng, &[c.d_model], 1.0 / (s as f64).sqrt()))?;
        self.encoder.init(&mut store, &mut rng)?;
        let fan_in = c.n_patches() * c.d_model;
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert("head.weight", uniform(&mut rng, &[c.horizon, fan_in], bound))?;
        store.insert("head.bias", uniform(&mut rng, &[c.horizon], bound))?;
        Ok(store)
    }

    /// Forecast `[batch, T, K]` for `x: [batch, L, K]`, scanning sample `b`'s
    /// variables in the order `perms[b]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        perms: &[Vec<usize>],
        training: bool,
        rng: &mut SeedRng,
    ) -> Result<Var> {
        let c = &self.config;
        self.forward_with_encoder(tape, store, x, perms, |tape, tokens| {
            encoder_forward(tape, store, tokens, &self.encoder, c.gate_mode, c.dropout_rate, training, rng)
        })
    }

    /// Same pipeline with a caller-supplied encoder over the arranged tokens.
    pub fn forward_with_encoder<E>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        perms: &[Vec<usize>],
        encode: E,
    ) -> Result<Var>
    where
        E: FnOnce(&mut Tape, Var) -> Result<Var>,
    {
        let c = &self.config;
        match x.shape() {
            &[_, l, k] if l == c.lookback && k == c.n_vars => {}
            s => {
                return Err(Error::Shape(format!(
                    "model input must be [batch, {}, {}], got {s:?}",
                    c.lookback, c.n_vars
                )))
            }
        }
        let (x_norm, stats) = instance_normalize(x).stage("instance_normalize")?;
        let embed_w = tape.param(store, "embed.weight")?;
        let embed_b = tape.param(store, "embed.bias")?;
        let tokens = patchify_embed(tape, &x_norm, embed_w, Some(embed_b)).stage("patchify_embed")?;
        let seq = if c.vst {
            vst_arrange(tape, tokens, perms).stage("vst_arrange")?
        } else {
            per_variable_arrange(tape, tokens).stage("per_variable_arrange")?
        };
        let encoded = encode(tape, seq.tokens).stage("encoder")?;
        let restored = match seq.layout {
            Layout::Vst => vst_restore(tape, &seq, encoded).stage("vst_restore")?,
            Layout::PerVariable => per_variable_restore(tape, &seq, encoded).stage("per_variable_restore")?,
        };
        let head_w = tape.param(store, "head.weight")?;
        let head_b = tape.param(store, "head.bias")?;
        let y_norm = predict_head(tape, restored, head_w, Some(head_b)).stage("predict_head")?;
        denormalize(tape, y_norm, &stats).stage("denormalize")
    }
}
