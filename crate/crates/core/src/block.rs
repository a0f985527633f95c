//! Residual blocks built around the selective SSM, and the stacked encoder.
//!
//! Both block variants share the layout
//! `x + out_proj(ssm(pre(in_proj_ssm(x̂))) ⊙ silu(in_proj_gate(x̂)))` with
//! `x̂ = layer_norm(x)`. The temporal block uses dropout for `pre`; the
//! vanilla block uses a causal depthwise convolution.

use crate::config::{BlockKind, GateMode};
use crate::error::{Error, Result, ResultExt};
use crate::numerics::{ParamStore, SeedRng, Tape, Tensor, Var};
use crate::ssm::{ssm_forward, uniform, SsmParams};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub prefix: String,
    pub kind: BlockKind,
    pub d_model: usize,
    pub d_inner: usize,
    pub conv_width: usize,
    pub ssm: SsmParams,
}

impl BlockParams {
    pub fn new(
        prefix: impl Into<String>,
        kind: BlockKind,
        d_model: usize,
        expand: usize,
        d_state: usize,
        conv_width: usize,
    ) -> Result<Self> {
        if expand == 0 || d_model == 0 {
            return Err(Error::Config("d_model and expand must be at least 1".into()));
        }
        let prefix = prefix.into();
        let d_inner = expand * d_model;
        Ok(Self {
            ssm: SsmParams::new(format!("{prefix}.ssm"), d_inner, d_state)?,
            prefix,
            kind,
            d_model,
            d_inner,
            conv_width,
        })
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
        let (dm, di) = (self.d_model, self.d_inner);
        store.insert(self.name("norm.scale"), Tensor::ones(&[dm]))?;
        store.insert(self.name("norm.bias"), Tensor::zeros(&[dm]))?;
        let in_bound = 1.0 / (dm as f64).sqrt();
        store.insert(self.name("in_proj_ssm"), uniform(rng, &[di, dm], in_bound))?;
        store.insert(self.name("in_proj_gate"), uniform(rng, &[di, dm], in_bound))?;
        store.insert(self.name("out_proj"), uniform(rng, &[dm, di], 1.0 / (di as f64).sqrt()))?;
        if self.kind == BlockKind::Vanilla {
            if self.conv_width == 0 {
                return Err(Error::Config("conv_width must be at least 1".into()));
            }
            let bound = 1.0 / (self.conv_width as f64).sqrt();
            store.insert(self.name("conv_kernel"), uniform(rng, &[di, self.conv_width], bound))?;
        }
        self.ssm.init(store, rng)
    }
}

enum Mixer {
    Dropout { rate: f64, training: bool },
    Conv,
}

fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    p: &BlockParams,
    gate_mode: GateMode,
    mixer: Mixer,
    rng: &mut SeedRng,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != p.d_model {
        return Err(Error::Shape(format!(
            "block input must be [batch, seq, {}], got {shape:?}",
            p.d_model
        )));
    }
    let scale = tape.param(store, &p.name("norm.scale"))?;
    let bias = tape.param(store, &p.name("norm.bias"))?;
    let xn = tape.layer_norm(x, scale, bias, NORM_EPS)?;
    let w_ssm = tape.param(store, &p.name("in_proj_ssm"))?;
    let w_gate = tape.param(store, &p.name("in_proj_gate"))?;
    let w_out = tape.param(store, &p.name("out_proj"))?;
    let vars = p.ssm.bind(tape, store)?;

    let u = tape.linear(xn, w_ssm, None)?;
    let y = match mixer {
        Mixer::Dropout { rate, training } => ssm_forward(tape, u, &vars, rate, training, rng)?,
        Mixer::Conv => {
            let name = p.name("conv_kernel");
            if !store.contains(&name) {
                return Err(Error::Config(format!("vanilla block needs parameter {name}")));
            }
            let kernel = tape.param(store, &name)?;
            let conv = tape.causal_conv(u, kernel)?;
            ssm_forward(tape, conv, &vars, 0.0, false, rng)?
        }
    };
    let gate_pre = tape.linear(xn, w_gate, None)?;
    let gate = tape.silu(gate_pre)?;
    let merged = match gate_mode {
        GateMode::Multiply => tape.mul(y, gate)?,
        GateMode::Add => tape.add(y, gate)?,
    };
    let out = tape.linear(merged, w_out, None)?;
    tape.add(x, out)
}

/// Temporal block: dropout on the SSM input, no convolution.
#[allow(clippy::too_many_arguments)]
pub fn tmb_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    p: &BlockParams,
    gate_mode: GateMode,
    dropout_rate: f64,
    training: bool,
    rng: &mut SeedRng,
) -> Result<Var> {
    block_forward(tape, store, x, p, gate_mode, Mixer::Dropout { rate: dropout_rate, training }, rng)
}

/// Baseline block: causal depthwise convolution ahead of the SSM.
pub fn vanilla_block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    p: &BlockParams,
    gate_mode: GateMode,
    rng: &mut SeedRng,
) -> Result<Var> {
    block_forward(tape, store, x, p, gate_mode, Mixer::Conv, rng)
}

/// `depth` blocks followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    pub prefix: String,
}

impl EncoderParams {
    pub fn new(
        prefix: &str,
        kind: BlockKind,
        depth: usize,
        d_model: usize,
        expand: usize,
        d_state: usize,
        conv_width: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        let blocks = (0..depth)
            .map(|i| BlockParams::new(format!("{prefix}.blocks.{i}"), kind, d_model, expand, d_state, conv_width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            prefix: prefix.to_string(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.blocks[0].d_model
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        let dm = self.d_model();
        store.insert(format!("{}.norm_f.scale", self.prefix), Tensor::ones(&[dm]))?;
        store.insert(format!("{}.norm_f.bias", self.prefix), Tensor::zeros(&[dm]))?;
        Ok(())
    }
}

pub fn encoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    enc: &EncoderParams,
    gate_mode: GateMode,
    dropout_rate: f64,
    training: bool,
    rng: &mut SeedRng,
) -> Result<Var> {
    let mut h = x;
    for (i, block) in enc.blocks.iter().enumerate() {
        let mut block_rng = rng.split_indexed("block", i as u64);
        h = match block.kind {
            BlockKind::Temporal => tmb_forward(tape, store, h, block, gate_mode, dropout_rate, training, &mut block_rng),
            BlockKind::Vanilla => vanilla_block_forward(tape, store, h, block, gate_mode, &mut block_rng),
        }
        .stage(&format!("block {i}"))?;
    }
    let scale = tape.param(store, &format!("{}.norm_f.scale", enc.prefix))?;
    let bias = tape.param(store, &format!("{}.norm_f.bias", enc.prefix))?;
    tape.layer_norm(h, scale, bias, NORM_EPS)
}
