//! Model and training hyperparameters, and the flat `key=value` config format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys
//! are the field names of [`ModelConfig`] and [`TrainConfig`]; the short
//! symbols `K`, `L`, `T`, `s` and `N` are accepted for `n_vars`, `lookback`,
//! `horizon`, `patch_len` and `depth`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the SSM branch and the gate branch of a block are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Multiply,
    Add,
}

/// Block variant used by the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Dropout on the SSM input, no convolution.
    Temporal,
    /// Causal depthwise convolution before the SSM.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_vars: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub depth: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub dropout_rate: f64,
    pub gate_mode: GateMode,
    pub block: BlockKind,
    /// Interleave all variables into one sequence; off runs each variable as its own sequence.
    pub vst: bool,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_vars: 7,
            lookback: 96,
            horizon: 96,
            patch_len: 16,
            d_model: 64,
            depth: 2,
            d_state: 16,
            expand: 2,
            conv_width: 4,
            dropout_rate: 0.2,
            gate_mode: GateMode::Multiply,
            block: BlockKind::Temporal,
            vst: true,
            beta: 0.99,
            seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        self.lookback / self.patch_len
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_vars == 0 {
            return fail("n_vars must be at least 1".into());
        }
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if self.patch_len == 0 || self.lookback == 0 {
            return fail("lookback and patch_len must be positive".into());
        }
        if self.lookback % self.patch_len != 0 {
            return fail(format!(
                "lookback {} is not divisible by patch_len {}",
                self.lookback, self.patch_len
            ));
        }
        if self.d_model == 0 || self.depth == 0 || self.d_state == 0 || self.expand == 0 {
            return fail("d_model, depth, d_state and expand must be at least 1".into());
        }
        if self.block == BlockKind::Vanilla && self.conv_width == 0 {
            return fail("conv_width must be at least 1 for the vanilla block".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return fail(format!("beta {} outside (0, 1)", self.beta));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Per-sample variable permutations during training (feeds the cost graph).
    pub vpt: bool,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Standardize every column with training-split statistics at load time.
    pub standardize: bool,
    /// Cap on training batches per epoch; 0 means every window.
    pub max_batches_per_epoch: usize,
    /// Cap on validation batches per epoch; 0 means every window.
    pub max_val_batches: usize,
    /// Initial annealing temperature; 0 derives it from the spread of edge costs.
    pub sa_t0: f64,
    pub sa_alpha: f64,
    pub sa_iters_per_var: usize,
    pub sa_restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 10,
            patience: 3,
            clip_norm: 1.0,
            vpt: true,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            standardize: true,
            max_batches_per_epoch: 0,
            max_val_batches: 0,
            sa_t0: 0.0,
            sa_alpha: 0.995,
            sa_iters_per_var: 2000,
            sa_restarts: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be at least 1".into());
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            return fail("clip_norm must be non-negative".into());
        }
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| !(*r > 0.0)) || ratios.iter().sum::<f64>() > 1.0 + 1e-9 {
            return fail(format!("split ratios {ratios:?} must be positive and sum to at most 1"));
        }
        if self.sa_t0 < 0.0 || !(self.sa_alpha > 0.0 && self.sa_alpha < 1.0) {
            return fail("annealing needs sa_t0 >= 0 and sa_alpha in (0, 1)".into());
        }
        if self.sa_iters_per_var == 0 || self.sa_restarts == 0 {
            return fail("sa_iters_per_var and sa_restarts must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything a run needs, stored together in config files and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses the flat text format on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let key = canonical_key(key.trim());
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match canonical_key(key) {
            "n_vars" => m.n_vars = num(key, value)?,
            "lookback" => m.lookback = num(key, value)?,
            "horizon" => m.horizon = num(key, value)?,
            "patch_len" => m.patch_len = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "depth" => m.depth = num(key, value)?,
            "d_state" => m.d_state = num(key, value)?,
            "expand" => m.expand = num(key, value)?,
            "conv_width" => m.conv_width = num(key, value)?,
            "dropout_rate" => m.dropout_rate = num(key, value)?,
            "gate_mode" => {
                m.gate_mode = match value {
                    "multiply" => GateMode::Multiply,
                    "add" => GateMode::Add,
                    _ => return Err(format!("gate_mode must be multiply or add, got {value:?}")),
                }
            }
            "block" => {
                m.block = match value {
                    "tmb" => BlockKind::Temporal,
                    "vanilla" => BlockKind::Vanilla,
                    _ => return Err(format!("block must be tmb or vanilla, got {value:?}")),
                }
            }
            "vst" => m.vst = flag(key, value)?,
            "beta" => m.beta = num(key, value)?,
            "seed" => m.seed = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "adam_beta1" => t.adam_beta1 = num(key, value)?,
            "adam_beta2" => t.adam_beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "vpt" => t.vpt = flag(key, value)?,
            "train_ratio" => t.train_ratio = num(key, value)?,
            "val_ratio" => t.val_ratio = num(key, value)?,
            "test_ratio" => t.test_ratio = num(key, value)?,
            "standardize" => t.standardize = flag(key, value)?,
            "max_batches_per_epoch" => t.max_batches_per_epoch = num(key, value)?,
            "max_val_batches" => t.max_val_batches = num(key, value)?,
            "sa_t0" => t.sa_t0 = num(key, value)?,
            "sa_alpha" => t.sa_alpha = num(key, value)?,
            "sa_iters_per_var" => t.sa_iters_per_var = num(key, value)?,
            "sa_restarts" => t.sa_restarts = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, values that parse back exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("n_vars", m.n_vars.to_string());
        kv("lookback", m.lookback.to_string());
        kv("horizon", m.horizon.to_string());
        kv("patch_len", m.patch_len.to_string());
        kv("d_model", m.d_model.to_string());
        kv("depth", m.depth.to_string());
        kv("d_state", m.d_state.to_string());
        kv("expand", m.expand.to_string());
        kv("conv_width", m.conv_width.to_string());
        kv("dropout_rate", m.dropout_rate.to_string());
        kv(
            "gate_mode",
            match m.gate_mode {
                GateMode::Multiply => "multiply",
                GateMode::Add => "add",
            }
            .into(),
        );
        kv(
            "block",
            match m.block {
                BlockKind::Temporal => "tmb",
                BlockKind::Vanilla => "vanilla",
            }
            .into(),
        );
        kv("vst", m.vst.to_string());
        kv("beta", m.beta.to_string());
        kv("seed", m.seed.to_string());
        kv("lr", t.lr.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("vpt", t.vpt.to_string());
        kv("train_ratio", t.train_ratio.to_string());
        kv("val_ratio", t.val_ratio.to_string());
        kv("test_ratio", t.test_ratio.to_string());
        kv("standardize", t.standardize.to_string());
        kv("max_batches_per_epoch", t.max_batches_per_epoch.to_string());
        kv("max_val_batches", t.max_val_batches.to_string());
        kv("sa_t0", t.sa_t0.to_string());
        kv("sa_alpha", t.sa_alpha.to_string());
        kv("sa_iters_per_var", t.sa_iters_per_var.to_string());
        kv("sa_restarts", t.sa_restarts.to_string());
        s
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "K" => "n_vars",
        "L" => "lookback",
        "T" => "horizon",
        "s" => "patch_len",
        "N" => "depth",
        other => other,
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = Config::default();
        cfg.model.dropout_rate = 0.1 + 0.2;
        cfg.train.lr = 3.3e-7;
        cfg.model.gate_mode = GateMode::Add;
        let back = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parses_comments_and_symbol_keys() {
        let cfg = Config::parse("# desk\nK=2\nL = 32 # lookback\ns=8\nT=4\n\nN=1\n").unwrap();
        assert_eq!(cfg.model.n_vars, 2);
        assert_eq!(cfg.model.lookback, 32);
        assert_eq!(cfg.model.n_patches(), 4);
        assert_eq!(cfg.model.depth, 1);
    }

    #[test]
    fn rejects_indivisible_lookback() {
        let err = Config::parse("lookback=30\npatch_len=8\n").unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Config::parse("lookback\n").is_err());
        assert!(Config::parse("nope=1\n").is_err());
        assert!(Config::parse("seed=1\nseed=2\n").is_err());
        assert!(Config::parse("K=1\nn_vars=2\n").is_err());
        assert!(Config::parse("dropout_rate=1.0\n").is_err());
        assert!(Config::parse("beta=1\n").is_err());
        assert!(Config::parse("vst=maybe\n").is_err());
    }
}
