use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bginet_core::data::{
    binarize, load_dataset, load_mask, load_rgb, render_comparison_map, save_dataset, save_mask, save_rgb,
    synth_generate, tile, PseudoChange, SynthConfig,
};
use bginet_core::train::{count_params, evaluate, predict, train, write_npy, Checkpoint, TrainConfig};
use bginet_core::verify::{check_ablation, format_table, run_ablation, run_quick_suite, AblationConfig, PARAM_ANCHOR};
use bginet_core::BgiNet;

#[derive(Parser)]
#[command(name = "bginet", version, about = "Bitemporal change detection with graph interaction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a `key = value` config; writes best.ckpt, last.ckpt and history.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on `<data_dir>/<split>`.
    Eval(EvalArgs),
    /// Predict a change map for one image pair.
    Predict(PredictArgs),
    /// Cut a dataset into square tiles.
    Tile(TileArgs),
    /// Generate a synthetic dataset with train/val/test splits.
    Synth(SynthArgs),
    /// Color-coded comparison of a predicted mask against ground truth.
    RenderDiff(RenderArgs),
    /// Count trainable parameters of the configured model.
    Params(ParamsArgs),
    /// Run the verification checks and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides in `key=value` form, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Subdirectory of the dataset root, e.g. `test` or `val`.
    #[arg(long)]
    split: String,
    /// Dataset root; defaults to the `data_dir` stored in the checkpoint.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Report stem; `.txt` and `.json` are appended. Defaults to `<ckpt dir>/<split>_metrics`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-tile prediction, probability and comparison maps.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Binary change map PNG; probabilities go to the same path with `.npy`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct TileArgs {
    /// Dataset root with `A/`, `B/`, `label/`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Defaults to `size` (non-overlapping).
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 40)]
    val: usize,
    #[arg(long, default_value_t = 40)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    changes: usize,
    /// Disable brightness, tint and shadow distortions.
    #[arg(long)]
    no_pseudo_change: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    /// Defaults to the built-in configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Also run the baseline versus graph-interaction ablation (slow).
    #[arg(long)]
    ablation: bool,
    /// Scratch directory for the determinism check; a temporary one by default.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Predict(a) => cmd_predict(a)?,
        Command::Tile(a) => cmd_tile(a)?,
        Command::Synth(a) => cmd_synth(a)?,
        Command::RenderDiff(a) => cmd_render(a)?,
        Command::Params(a) => cmd_params(a)?,
        Command::Verify(a) => return cmd_verify(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_file(&a.config)?;
    for o in &a.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let outcome = train(&cfg)?;
    match outcome.best.best_val_f1 {
        Some(f1) => println!("best val f1 = {f1:.4} (epoch {})", outcome.best.epoch),
        None => println!("no validation split; kept the last epoch"),
    }
    println!("checkpoints written to {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let root = a
        .data_dir
        .or_else(|| ckpt.config.data_dir.clone())
        .context("no --data-dir given and the checkpoint does not record one")?;
    let records = load_dataset(&root.join(&a.split))?;
    let threshold = a.threshold.unwrap_or(ckpt.config.threshold);
    let report = evaluate(&ckpt.model, &records, threshold, &a.split, a.dump.as_deref())?;
    let stem = a.out.unwrap_or_else(|| sibling(&a.ckpt, &format!("{}_metrics", a.split)));
    report.write(&stem)?;
    print!("{}", report.to_text());
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (t1, t2) = (load_rgb(&a.a)?, load_rgb(&a.b)?);
    let map = predict(&ckpt.model, &t1, &t2)?;
    let threshold = a.threshold.unwrap_or(ckpt.config.threshold);
    save_mask(&a.out, &binarize(&map.probabilities, threshold))?;
    write_npy(&a.out.with_extension("npy"), &map.probabilities)?;
    Ok(())
}

fn cmd_tile(a: TileArgs) -> Result<()> {
    let records = load_dataset(&a.input)?;
    let stride = a.stride.unwrap_or(a.size);
    let mut tiles = Vec::new();
    for r in &records {
        tiles.extend(tile(r, a.size, stride)?);
    }
    if tiles.is_empty() {
        bail!("no image is at least {}x{}", a.size, a.size);
    }
    save_dataset(&tiles, &a.out)?;
    println!("{} tiles from {} images", tiles.len(), records.len());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        canvas_size: a.size,
        pairs: a.train + a.val + a.test,
        n_true_changes: a.changes,
        pseudo_change: if a.no_pseudo_change { PseudoChange::NONE } else { PseudoChange::ALL },
        seed: a.seed,
        ..SynthConfig::default()
    };
    let records = synth_generate(&cfg)?;
    let (train, rest) = records.split_at(a.train);
    let (val, test) = rest.split_at(a.val);
    for (name, part) in [("train", train), ("val", val), ("test", test)] {
        if !part.is_empty() {
            save_dataset(part, &a.out.join(name))?;
        }
    }
    println!(
        "wrote {} train, {} val, {} test pairs to {}",
        train.len(),
        val.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let (pred, gt) = (load_mask(&a.pred)?, load_mask(&a.gt)?);
    save_rgb(&a.out, &render_comparison_map(pred.view(), gt.view())?)?;
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let cfg = match a.config {
        Some(path) => TrainConfig::from_file(&path)?,
        None => TrainConfig::default(),
    };
    let model = BgiNet::<f32>::new(&cfg.model, cfg.seed)?;
    let n = count_params(&model);
    println!("params = {n}");
    println!("params_m = {:.4}", n as f64 / 1e6);
    println!("reference_m = {PARAM_ANCHOR}");
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let (work_dir, owned) = match a.work_dir {
        Some(d) => (d, false),
        None => (std::env::temp_dir().join(format!("bginet-verify-{}", std::process::id())), true),
    };
    std::fs::create_dir_all(&work_dir).with_context(|| format!("creating {}", work_dir.display()))?;
    let mut rows = run_quick_suite(&work_dir);
    if a.ablation {
        let report = run_ablation(&AblationConfig::default())?;
        rows.push(check_ablation(&report));
        rows.sort_by_key(|r| r.id);
    }
    if owned {
        let _ = std::fs::remove_dir_all(&work_dir);
    }
    print!("{}", format_table(&rows));
    Ok(if rows.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
