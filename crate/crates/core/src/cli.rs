//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data or
//! checkpoint input error, 3 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{BlockKind, Config};
use crate::data::{self, parse_csv, Split, SplitRatios, TimeSeriesDataset};
use crate::error::Error;
use crate::manifest::{fingerprint, RunManifest};
use crate::numerics::SeedRng;
use crate::train::{evaluate, persistence_baseline, train_with, EvalReport, TrainState};
use crate::vast::{format_order, parse_order, path_cost, sample_permutation, solve, PermutationRecord, SaSchedule, Solver};

#[derive(Parser, Debug)]
#[command(name = "varscan", version, about = "Selective state-space forecaster with learned variable scan orders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, history and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Decode a scan order from a checkpoint's cost graph.
    DecodeOrder(DecodeArgs),
    /// Component grid and/or dropout-rate sweep.
    Ablate(AblateArgs),
    /// Repeat-last-value forecast errors.
    Baseline(BaselineArgs),
    /// Write a synthetic dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "T")]
    horizon: Option<usize>,
    #[arg(long, value_name = "L")]
    lookback: Option<usize>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// identity, random:N, decoded, or file:PATH
    #[arg(long, default_value = "identity")]
    order: String,
    /// Solver used by `--order decoded`.
    #[arg(long, default_value = "sa")]
    solver: String,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// greedy, ls, sa or bruteforce
    #[arg(long, default_value = "sa")]
    solver: String,
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run the VST × block × VAST grid.
    #[arg(long)]
    grid: bool,
    /// Run the dropout-rate sweep.
    #[arg(long)]
    dropout_sweep: bool,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    #[arg(long, value_name = "T")]
    horizon: Option<usize>,
    #[arg(long, value_name = "L")]
    lookback: Option<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// ett, sinusoid or ar1
    #[arg(long, default_value = "ett")]
    kind: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    vars: usize,
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
    /// Output CSV file.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn data(e: impl std::fmt::Display) -> Self {
        Self { code: 2, message: e.to_string() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Config(_) | Error::Param(_) | Error::State(_) => 1,
            Error::Parse { .. } | Error::Io(_) | Error::Checkpoint(_) | Error::Shape(_) => 2,
            Error::Numeric(_) => 3,
            Error::Stage { .. } => unreachable!("root skips stage labels"),
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let command_line = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a.run, &command_line),
        Command::Eval(a) => cmd_eval(&a, &command_line),
        Command::DecodeOrder(a) => cmd_decode_order(&a, &command_line),
        Command::Ablate(a) => cmd_ablate(&a, &command_line),
        Command::Baseline(a) => cmd_baseline(&a, &command_line),
        Command::Generate(a) => cmd_generate(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn resolve_config(run: &RunArgs) -> CliResult<Config> {
    let mut cfg = Config::load(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.model.seed = seed;
    }
    if let Some(t) = run.horizon {
        cfg.model.horizon = t;
    }
    if let Some(l) = run.lookback {
        cfg.model.lookback = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct LoadedData {
    ds: TimeSeriesDataset,
    fingerprint: String,
}

fn read_data(path: &Path, n_vars: usize, ratios: SplitRatios) -> CliResult<LoadedData> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("cannot read data {}: {e}", path.display())))?;
    let ds = parse_csv(bytes.as_slice(), Some(n_vars), ratios).map_err(|e| CliError::from(e.at(path.display().to_string())))?;
    Ok(LoadedData {
        ds,
        fingerprint: fingerprint(&bytes),
    })
}

fn load_training_data(path: &Path, cfg: &Config) -> CliResult<LoadedData> {
    let mut d = read_data(path, cfg.model.n_vars, SplitRatios::from_config(cfg))?;
    if cfg.train.standardize {
        d.ds.standardize()?;
    }
    Ok(d)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn parse_split(s: &str) -> CliResult<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown split {s:?}; expected train, val or test")).into())
}

fn manifest_for(command: &str, cfg: &Config, data: &Path, fp: &str) -> RunManifest {
    let mut m = RunManifest::new(command, cfg.model.seed);
    m.config = Some(cfg.clone());
    m.dataset = Some(data.display().to_string());
    m.fingerprint = Some(fp.to_string());
    m
}

/// Renders rows as an aligned plain-text table.
fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, header.to_vec());
    for r in rows {
        line(&mut s, r.iter().map(String::as_str).collect());
    }
    s
}

fn render_tsv(manifest: &RunManifest, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = manifest.header();
    s.push_str(&header.join("\t"));
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    s
}

fn cmd_train(run: &RunArgs, command: &str) -> CliResult<()> {
    let cfg = resolve_config(run)?;
    let t0 = Instant::now();
    let data = load_training_data(&run.data, &cfg)?;
    let mut manifest = manifest_for(command, &cfg, &run.data, &data.fingerprint);
    manifest.time("load", t0.elapsed());
    ensure_dir(&run.out)?;
    let t1 = Instant::now();
    let (state, history) = train_with(&cfg, &data.ds, |r| {
        eprintln!(
            "epoch {:>2}  train {:.6}  val mse {:.6}  val mae {:.6}{}",
            r.epoch,
            r.train_loss,
            r.val_mse,
            r.val_mae,
            if r.improved { "  *" } else { "" }
        );
    })?;
    manifest.time("train", t1.elapsed());
    save_checkpoint(&state, &run.out.join("checkpoint.ssmf"))?;
    write_file(&run.out.join("history.tsv"), history.to_tsv())?;
    manifest.note("best_epoch", history.best_epoch);
    manifest.note("best_val_mse", format!("{:?}", state.best_val));
    manifest.note("stopped_early", history.stopped_early);
    write_file(&run.out.join("manifest.txt"), manifest.header())?;
    println!(
        "trained {} epochs, best validation MSE {:.6} at epoch {}; artifacts in {}",
        history.epochs.len(),
        state.best_val,
        history.best_epoch,
        run.out.display()
    );
    Ok(())
}

fn checkpoint_data(path: &Path, state: &TrainState) -> CliResult<LoadedData> {
    let cfg = &state.config;
    let mut d = read_data(path, cfg.model.n_vars, SplitRatios::from_config(cfg))?;
    if let Some(stats) = &state.standardization {
        d.ds.apply_standardization(stats.clone())?;
    }
    Ok(d)
}

fn decode_with(state: &TrainState, solver: Solver, seed: u64) -> CliResult<PermutationRecord> {
    let schedule = SaSchedule::from_config(&state.config.train);
    Ok(solve(&state.graph, solver, &schedule, seed)?)
}

fn report_cells(r: &EvalReport) -> [String; 2] {
    [format!("{:?}", r.mse), format!("{:?}", r.mae)]
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn cmd_eval(a: &EvalArgs, command: &str) -> CliResult<()> {
    let t0 = Instant::now();
    let state = load_checkpoint(&a.checkpoint)?;
    let data = checkpoint_data(&a.data, &state)?;
    let split = parse_split(&a.split)?;
    let k = state.config.model.n_vars;
    let mut manifest = manifest_for(command, &state.config, &a.data, &data.fingerprint);
    manifest.seed = a.seed;
    manifest.note("checkpoint", a.checkpoint.display());
    manifest.note("split", split.name());
    manifest.time("load", t0.elapsed());
    let horizon = state.config.model.horizon.to_string();
    let header = ["order", "horizon", "mse", "mae", "mse_std", "mae_std", "runs", "permutation"];
    let mut rows = Vec::new();
    let t1 = Instant::now();
    let row = |label: String, r: &EvalReport, order: &PermutationRecord| {
        let [mse, mae] = report_cells(r);
        let perm = order.order.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        vec![label, horizon.clone(), mse, mae, "0".into(), "0".into(), "1".into(), perm]
    };
    if let Some(n) = a.order.strip_prefix("random:") {
        let n: usize = n
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("--order random:N needs a positive N, got {n:?}")))?;
        let mut rng = SeedRng::new(a.seed).split("eval_orders");
        let (mut mses, mut maes) = (Vec::new(), Vec::new());
        for i in 0..n {
            let mut order = sample_permutation(&mut rng, k);
            order.per_sample = false;
            let r = evaluate(&state, &data.ds, split, &order)?;
            rows.push(row(format!("random#{i}"), &r, &order));
            mses.push(r.mse);
            maes.push(r.mae);
        }
        let (mm, ms) = mean_std(&mses);
        let (am, as_) = mean_std(&maes);
        rows.push(vec![
            format!("random:{n}"),
            horizon.clone(),
            format!("{mm:?}"),
            format!("{am:?}"),
            format!("{ms:?}"),
            format!("{as_:?}"),
            n.to_string(),
            "-".into(),
        ]);
    } else {
        let (label, order) = match a.order.as_str() {
            "identity" => ("identity".to_string(), PermutationRecord::identity(k)),
            "decoded" => {
                let solver: Solver = a.solver.parse()?;
                manifest.note("solver", solver.name());
                (format!("decoded:{}", solver.name()), decode_with(&state, solver, a.seed)?)
            }
            other => match other.strip_prefix("file:") {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::data(format!("cannot read order file {p}: {e}")))?;
                    (format!("file:{p}"), parse_order(&text, Some(k))?)
                }
                None => {
                    return Err(Error::Config(format!(
                        "unknown --order {other:?}; expected identity, random:N, decoded or file:PATH"
                    ))
                    .into())
                }
            },
        };
        let r = evaluate(&state, &data.ds, split, &order)?;
        rows.push(row(label, &r, &order));
    }
    manifest.time("eval", t1.elapsed());
    ensure_dir(&a.out)?;
    write_file(&a.out.join("eval.tsv"), render_tsv(&manifest, &header, &rows))?;
    print!("{}", render_table(&header, &rows));
    Ok(())
}

fn cmd_decode_order(a: &DecodeArgs, command: &str) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let solver: Solver = a.solver.parse()?;
    let t0 = Instant::now();
    let order = decode_with(&state, solver, a.seed)?;
    let cost = path_cost(&state.graph, &order.order);
    let mut manifest = RunManifest::new(command, a.seed);
    manifest.config = Some(state.config.clone());
    manifest.note("checkpoint", a.checkpoint.display());
    manifest.note("solver", solver.name());
    manifest.time("decode", t0.elapsed());
    ensure_dir(&a.out)?;
    write_file(&a.out.join("order.txt"), format_order(&order.order))?;
    let perm = order.order.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let header = ["solver", "path_cost", "order"];
    let rows = vec![vec![solver.name().to_string(), format!("{cost:?}"), perm]];
    write_file(&a.out.join("decode.tsv"), render_tsv(&manifest, &header, &rows))?;
    print!("{}", render_table(&header, &rows));
    Ok(())
}

/// Final test-split metrics of one ablation cell: the decoded order when the
/// cost graph was learned, identity otherwise.
fn run_cell(cfg: &Config, ds: &TimeSeriesDataset) -> CliResult<(f64, EvalReport)> {
    let (state, _) = train_with(cfg, ds, |_| {})?;
    let order = if cfg.train.vpt {
        decode_with(&state, Solver::Annealing, cfg.model.seed)?
    } else {
        PermutationRecord::identity(cfg.model.n_vars)
    };
    Ok((state.best_val, evaluate(&state, ds, Split::Test, &order)?))
}

fn cmd_ablate(a: &AblateArgs, command: &str) -> CliResult<()> {
    let cfg = resolve_config(&a.run)?;
    let data = load_training_data(&a.run.data, &cfg)?;
    let (grid, sweep) = if !a.grid && !a.dropout_sweep { (true, true) } else { (a.grid, a.dropout_sweep) };
    ensure_dir(&a.run.out)?;
    if grid {
        let mut manifest = manifest_for(command, &cfg, &a.run.data, &data.fingerprint);
        let t0 = Instant::now();
        let header = ["vst", "block", "vast", "val_mse", "test_mse", "test_mae"];
        let mut rows = Vec::new();
        for vst in [false, true] {
            for block in [BlockKind::Vanilla, BlockKind::Temporal] {
                for vast in [false, true] {
                    let mut c = cfg.clone();
                    c.model.vst = vst;
                    c.model.block = block;
                    c.train.vpt = vast;
                    let (val, test) = run_cell(&c, &data.ds)?;
                    let block_name = if block == BlockKind::Temporal { "tmb" } else { "vanilla" };
                    eprintln!("cell vst={vst} block={block_name} vast={vast}: test mse {:.6}", test.mse);
                    let [mse, mae] = report_cells(&test);
                    rows.push(vec![vst.to_string(), block_name.into(), vast.to_string(), format!("{val:?}"), mse, mae]);
                }
            }
        }
        manifest.time("grid", t0.elapsed());
        write_file(&a.run.out.join("ablation_grid.tsv"), render_tsv(&manifest, &header, &rows))?;
        print!("{}", render_table(&header, &rows));
    }
    if sweep {
        let mut manifest = manifest_for(command, &cfg, &a.run.data, &data.fingerprint);
        let t0 = Instant::now();
        let header = ["dropout_rate", "val_mse", "test_mse", "test_mae"];
        let mut rows = Vec::new();
        for rate in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5] {
            let mut c = cfg.clone();
            c.model.dropout_rate = rate;
            let (val, test) = run_cell(&c, &data.ds)?;
            eprintln!("dropout {rate}: val mse {val:.6}");
            let [mse, mae] = report_cells(&test);
            rows.push(vec![rate.to_string(), format!("{val:?}"), mse, mae]);
        }
        manifest.time("dropout_sweep", t0.elapsed());
        write_file(&a.run.out.join("dropout_sweep.tsv"), render_tsv(&manifest, &header, &rows))?;
        print!("{}", render_table(&header, &rows));
    }
    Ok(())
}

fn cmd_baseline(a: &BaselineArgs, command: &str) -> CliResult<()> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(t) = a.horizon {
        cfg.model.horizon = t;
    }
    if let Some(l) = a.lookback {
        cfg.model.lookback = l;
    }
    cfg.validate()?;
    let data = load_training_data(&a.data, &cfg)?;
    let split = parse_split(&a.split)?;
    let t0 = Instant::now();
    let r = persistence_baseline(&data.ds, split, cfg.model.lookback, cfg.model.horizon)?;
    let mut manifest = manifest_for(command, &cfg, &a.data, &data.fingerprint);
    manifest.note("split", split.name());
    manifest.time("baseline", t0.elapsed());
    let header = ["method", "horizon", "mse", "mae", "windows"];
    let [mse, mae] = report_cells(&r);
    let rows = vec![vec!["persistence".into(), cfg.model.horizon.to_string(), mse, mae, r.windows.to_string()]];
    ensure_dir(&a.out)?;
    write_file(&a.out.join("baseline.tsv"), render_tsv(&manifest, &header, &rows))?;
    print!("{}", render_table(&header, &rows));
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let ratios = SplitRatios::default();
    let ds = match a.kind.as_str() {
        "ett" => data::ett_surrogate(a.seed),
        "sinusoid" => data::synthetic_sinusoid(a.steps, a.vars, a.seed, ratios)?,
        "ar1" => data::synthetic_ar1(a.steps, a.vars, 0.9, 1.0, a.seed, ratios)?,
        other => return Err(Error::Config(format!("unknown --kind {other:?}; expected ett, sinusoid or ar1")).into()),
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_file(&a.out, ds.to_csv())?;
    println!("wrote {} rows × {} columns to {}", ds.n_steps(), ds.n_vars(), a.out.display());
    Ok(())
}
