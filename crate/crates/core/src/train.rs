//! Optimization loop, metrics and the persistence baseline.

use std::collections::BTreeMap;

use crate::config::Config;
use crate::data::{make_windows, Split, Standardization, TimeSeriesDataset};
use crate::error::{Error, Result, ResultExt};
use crate::numerics::{ParamStore, SeedRng, Tape, Tensor, Var};
use crate::pipeline::Model;
use crate::vast::{centralize_losses, sample_permutation, CostGraph, PermutationRecord};

/// Per-sample MSE over the `T × K` forecast of each sample, and their mean.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
    pred.expect_same_shape(target)?;
    let b = pred.shape().first().copied().unwrap_or(1).max(1);
    let per = pred.len() / b;
    let per_sample: Vec<f64> = pred
        .data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / per as f64)
        .collect();
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok((mean, per_sample))
}

/// Differentiable batch MSE recorded on the tape, plus the per-sample values.
pub fn mse_loss_var(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<(Var, Vec<f64>)> {
    let (mean, per_sample) = mse_loss(tape.value(pred), target)?;
    let target = target.clone();
    let n = target.len() as f64;
    let loss = tape.push_op("mse", Tensor::scalar(mean), &[pred], move |ctx| {
        let g = 2.0 * ctx.grad.data()[0] / n;
        Ok(vec![Some(ctx.inputs[0].zip_map(&target, |p, t| g * (p - t))?)])
    })?;
    Ok((loss, per_sample))
}

/// Mean absolute error over every element.
pub fn mae_metric(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let total: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            lr: cfg.train.lr,
            beta1: cfg.train.adam_beta1,
            beta2: cfg.train.adam_beta2,
            eps: cfg.train.adam_eps,
        }
    }
}

/// First and second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update from the gradients held in `params`. The step
/// is rejected before any change if a gradient is non-finite.
pub fn adam_step(state: &mut AdamState, params: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        let m = state
            .m
            .get(name)
            .ok_or_else(|| Error::State(format!("no optimizer moments for {name}")))?;
        m.expect_same_shape(&p.value)?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("moments are created together");
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for i in 0..w.len() {
            let gi = g[i];
            let mi = &mut m.data_mut()[i];
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Everything a run carries between steps and into a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub params: ParamStore,
    pub adam: AdamState,
    pub graph: CostGraph,
    pub best_val: f64,
    pub epochs_without_improvement: usize,
    pub epochs_completed: usize,
    /// Column statistics of the data the model was trained on.
    pub standardization: Option<Standardization>,
}

impl TrainState {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model)?;
        let params = model.init_params(config.model.seed)?;
        Ok(Self {
            config: config.clone(),
            adam: AdamState::new(&params),
            params,
            graph: CostGraph::new(config.model.n_vars, config.model.beta)?,
            best_val: f64::INFINITY,
            epochs_without_improvement: 0,
            epochs_completed: 0,
            standardization: None,
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(&self.config.model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub improved: bool,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    /// Tab-separated table with a header row; numbers use round-trip formatting.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_mse\tval_mae\timproved\tbatches\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{}\t{:?}\t{:?}\t{:?}\t{}\t{}\n",
                r.epoch, r.train_loss, r.val_mse, r.val_mae, r.improved, r.batches
            ));
        }
        s
    }
}

/// Aggregated forecast error over the windows of one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Every sample scans its variables in `order`.
fn shared_order(order: &PermutationRecord, batch: usize) -> Vec<Vec<usize>> {
    vec![order.order.clone(); batch]
}

fn run_eval(
    model: &Model,
    params: &ParamStore,
    ds: &TimeSeriesDataset,
    split: Split,
    order: &PermutationRecord,
    batch_size: usize,
    max_batches: usize,
    stride: usize,
) -> Result<EvalReport> {
    let c = &model.config;
    if order.order.len() != c.n_vars {
        return Err(Error::Param(format!(
            "order over {} variables for a {}-variable model",
            order.order.len(),
            c.n_vars
        )));
    }
    let windows = make_windows(ds, split, c.lookback, c.horizon, batch_size, None)?.every(stride);
    let limit = if max_batches == 0 { usize::MAX } else { max_batches };
    let (mut se, mut ae, mut count, mut n_windows) = (0.0, 0.0, 0usize, 0usize);
    let mut rng = SeedRng::new(0);
    for batch in windows.take(limit) {
        let mut tape = Tape::no_grad();
        let b = batch.x.shape()[0];
        let pred = model.forward(&mut tape, params, &batch.x, &shared_order(order, b), false, &mut rng)?;
        let p = tape.value(pred);
        for (a, t) in p.data().iter().zip(batch.y.data()) {
            se += (a - t) * (a - t);
            ae += (a - t).abs();
        }
        count += p.len();
        n_windows += b;
    }
    Ok(EvalReport {
        mse: se / count as f64,
        mae: ae / count as f64,
        windows: n_windows,
    })
}

/// Eval-mode pass over every window of `split` with one shared variable order.
pub fn evaluate(
    state: &TrainState,
    ds: &TimeSeriesDataset,
    split: Split,
    order: &PermutationRecord,
) -> Result<EvalReport> {
    if state.epochs_completed == 0 {
        return Err(Error::State("model has not been trained".into()));
    }
    evaluate_strided(state, ds, split, order, 1)
}

/// [`evaluate`] over every `stride`-th window of the split.
pub fn evaluate_strided(
    state: &TrainState,
    ds: &TimeSeriesDataset,
    split: Split,
    order: &PermutationRecord,
    stride: usize,
) -> Result<EvalReport> {
    if state.epochs_completed == 0 {
        return Err(Error::State("model has not been trained".into()));
    }
    let model = state.model()?;
    run_eval(&model, &state.params, ds, split, order, state.config.train.batch_size, 0, stride)
}

/// Repeat-last-value forecast over every window of `split`.
pub fn persistence_baseline(ds: &TimeSeriesDataset, split: Split, lookback: usize, horizon: usize) -> Result<EvalReport> {
    let windows = make_windows(ds, split, lookback, horizon, 1, None)?;
    let k = ds.n_vars();
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for &s in windows.starts() {
        let last = s + lookback - 1;
        for t in s + lookback..s + lookback + horizon {
            for v in 0..k {
                let e = ds.value(t, v) - ds.value(last, v);
                se += e * e;
                ae += e.abs();
            }
        }
        count += horizon * k;
    }
    Ok(EvalReport {
        mse: se / count as f64,
        mae: ae / count as f64,
        windows: windows.n_windows(),
    })
}

/// Trains from the seed in `cfg`; see [`train_with`].
pub fn train(cfg: &Config, ds: &TimeSeriesDataset) -> Result<(TrainState, History)> {
    train_with(cfg, ds, |_| {})
}

/// Runs up to `epochs` epochs of shuffled mini-batch Adam with per-sample
/// variable permutations feeding the cost graph, validating with the
/// identity order after each epoch and stopping after `patience`
/// non-improving epochs. The returned parameters are those of the best
/// validation epoch; optimizer moments and the cost graph are from the last
/// step taken.
pub fn train_with<F>(cfg: &Config, ds: &TimeSeriesDataset, mut on_epoch: F) -> Result<(TrainState, History)>
where
    F: FnMut(&EpochRecord),
{
    let mut state = TrainState::new(cfg)?;
    let c = &cfg.model;
    let tc = &cfg.train;
    if ds.n_vars() != c.n_vars {
        return Err(Error::Config(format!("dataset has {} variables, config n_vars={}", ds.n_vars(), c.n_vars)));
    }
    state.standardization = ds.standardization.clone();
    let model = state.model()?;
    let adam = AdamConfig::from_config(cfg);
    let root = SeedRng::new(c.seed).split("train");
    let identity = PermutationRecord::identity(c.n_vars);
    let mut best_params = state.params.clone();
    let mut history = History::default();
    // fail on short splits before spending time on training
    make_windows(ds, Split::Val, c.lookback, c.horizon, tc.batch_size, None)?;

    for epoch in 1..=tc.epochs {
        let erng = root.split_indexed("epoch", epoch as u64);
        let mut shuffle = erng.split("shuffle");
        let windows = make_windows(ds, Split::Train, c.lookback, c.horizon, tc.batch_size, Some(&mut shuffle))?;
        let limit = if tc.max_batches_per_epoch == 0 { usize::MAX } else { tc.max_batches_per_epoch };
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (bi, batch) in windows.take(limit).enumerate() {
            let label = format!("epoch {epoch} batch {bi}");
            let brng = erng.split_indexed("batch", bi as u64);
            let b = batch.x.shape()[0];
            let perms: Vec<PermutationRecord> = if tc.vpt {
                let mut prng = brng.split("perm");
                (0..b).map(|_| sample_permutation(&mut prng, c.n_vars)).collect()
            } else {
                vec![identity.clone(); b]
            };
            let orders: Vec<Vec<usize>> = perms.iter().map(|p| p.order.clone()).collect();
            let mut tape = Tape::new();
            let mut drop_rng = brng.split("dropout");
            let pred = model.forward(&mut tape, &state.params, &batch.x, &orders, true, &mut drop_rng).stage(&label)?;
            let (loss, per_sample) = mse_loss_var(&mut tape, pred, &batch.y).stage(&label)?;
            let grads = tape.backward(loss).stage(&label)?;
            drop(tape);
            state.params.zero_grad();
            grads.accumulate_into(&mut state.params)?;
            if tc.clip_norm > 0.0 {
                state.params.clip_grad_norm(tc.clip_norm);
            }
            adam_step(&mut state.adam, &mut state.params, &adam).stage(&label)?;
            if tc.vpt {
                state.graph.update(&perms, &centralize_losses(&per_sample)).stage(&label)?;
            }
            loss_sum += per_sample.iter().sum::<f64>() / b as f64;
            batches += 1;
        }
        let val = run_eval(&model, &state.params, ds, Split::Val, &identity, tc.batch_size, tc.max_val_batches, 1)
            .stage(&format!("epoch {epoch} validation"))?;
        let improved = val.mse < state.best_val;
        if improved {
            state.best_val = val.mse;
            state.epochs_without_improvement = 0;
            best_params = state.params.clone();
            history.best_epoch = epoch;
        } else {
            state.epochs_without_improvement += 1;
        }
        state.epochs_completed = epoch;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            improved,
            batches,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if state.epochs_without_improvement >= tc.patience {
            history.stopped_early = epoch < tc.epochs;
            break;
        }
    }
    state.params = best_params;
    // gradients are scratch; the returned state matches what a checkpoint restores
    state.params.zero_grad();
    Ok((state, history))
}

/// Early-stopping bookkeeping on a precomputed validation curve: returns the
/// number of epochs run and the 1-based best epoch.
pub fn patience_schedule(val_losses: &[f64], patience: usize) -> (usize, usize) {
    let (mut best, mut best_epoch, mut bad) = (f64::INFINITY, 0, 0);
    for (i, &v) in val_losses.iter().enumerate() {
        if v < best {
            best = v;
            best_epoch = i + 1;
            bad = 0;
        } else {
            bad += 1;
        }
        if bad >= patience {
            return (i + 1, best_epoch);
        }
    }
    (val_losses.len(), best_epoch)
}
