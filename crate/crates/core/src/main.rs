use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use dan::ablate::{run_grid, write_csv, GridSpec};
use dan::dataset::synth::{generate, SynthConfig};
use dan::dataset::Dataset;
use dan::eval::{average, evaluate, evaluate_scores, report_rows, score_all, write_metrics, MetricsRow};
use dan::gradcheck::{grad_check, GradCheckConfig};
use dan::model::DanModel;
use dan::train::{train_with, TrainConfig};
use dan::{Error, Result};

#[derive(Parser)]
#[command(name = "dan", version, about = "Dual attention networks for visual dialog")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic dialog splits with planted pronoun references.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints and a training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more splits.
    Eval(EvalArgs),
    /// Average the answer distributions of several models.
    Ensemble(EnsembleArgs),
    /// Train and evaluate every cell of an ablation grid.
    Ablate(AblateArgs),
    /// Dump the history and region attention of one dialog round.
    AttnDump(AttnDumpArgs),
    /// Compare analytic gradients with central differences on a small model.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator config; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated `name=count` pairs.
    #[arg(long, default_value = "train=200,val=100,test=100")]
    splits: String,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding `<split>.dialogs.json` and `<split>.features.json`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "train")]
    train_split: String,
    /// Validation split; pass an empty string to skip validation.
    #[arg(long, default_value = "val")]
    val_split: String,
    /// JSON training config; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated split names.
    #[arg(long, default_value = "val")]
    split: String,
    /// Label for the `model` column; defaults to the checkpoint directory name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Comma-separated checkpoint directories.
    #[arg(long, conflicts_with = "heads", required_unless_present = "heads")]
    checkpoints: Option<String>,
    /// Train one member per head count, e.g. `1..6` or `1,2,4`.
    #[arg(long)]
    heads: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "val")]
    split: String,
    /// Base training config for `--heads`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON grid with `axes` and/or explicit `cells`.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    grid: Option<PathBuf>,
    /// `table4` or `fig3`.
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "val")]
    split: String,
    /// Image id, or a zero-based position in the split.
    #[arg(long)]
    dialog: String,
    /// One-based round; all rounds when omitted.
    #[arg(long)]
    round: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: p.to_path_buf(),
                source: e,
            })
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn parse_splits(spec: &str) -> Result<Vec<(String, usize)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (name, n) = pair
                .split_once('=')
                .ok_or_else(|| usage(format!("split `{pair}` is not name=count")))?;
            let n = n
                .trim()
                .parse()
                .map_err(|_| usage(format!("split `{pair}`: bad count")))?;
            Ok((name.trim().to_string(), n))
        })
        .collect()
}

fn parse_heads(spec: &str) -> Result<Vec<usize>> {
    let bad = || usage(format!("bad head list `{spec}`"));
    if let Some((a, b)) = spec.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a == 0 || a > b {
            return Err(bad());
        }
        Ok((a..=b).collect())
    } else {
        spec.split(',').map(|h| h.trim().parse().map_err(|_| bad())).collect()
    }
}

fn list(spec: &str) -> Vec<String> {
    spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn train_config(path: Option<&Path>, seed: Option<u64>, epochs: Option<usize>) -> Result<TrainConfig> {
    let mut config: TrainConfig = read_json(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    Ok(config)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut config: SynthConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let splits = parse_splits(&a.splits)?;
    if splits.is_empty() {
        return Err(usage("no splits requested"));
    }
    write_json(&a.out.join("synth.json"), &config)?;
    for (name, n) in splits {
        let ds = generate(&config, &name, n)?;
        ds.save_split(&a.out, &name)?;
        println!("{name}: {} dialogs, {} rounds", ds.dialogs.dialogs.len(), ds.dialogs.round_count());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = train_config(a.config.as_deref(), a.seed, a.epochs)?;
    let train = Dataset::load_split(&a.data.data, &a.train_split)?;
    let val = if a.val_split.is_empty() {
        None
    } else {
        Some(Dataset::load_split(&a.data.data, &a.val_split)?)
    };
    let outcome = train_with(&config, &train, val.as_ref(), Some(&a.out), |log| match &log.val {
        Some(m) => println!(
            "epoch {:3}  lr {:.6}  loss {:.4}  val mrr {:.4}  r@1 {:.4}",
            log.epoch, log.lr, log.train_loss, m.mrr, m.r1
        ),
        None => println!("epoch {:3}  lr {:.6}  loss {:.4}", log.epoch, log.lr, log.train_loss),
    })?;
    if let Some(best) = outcome.best_epoch {
        println!("best epoch {best}");
    }
    Ok(())
}

fn dir_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn print_rows(rows: &[MetricsRow]) {
    for r in rows {
        let m = &r.metrics;
        println!(
            "{:<16} {:<12} n={:<6} mrr {:.4}  r@1 {:.4}  r@5 {:.4}  r@10 {:.4}  mean {:.3}",
            r.model, r.split, m.n, m.mrr, m.r1, m.r5, m.r10, m.mean_rank
        );
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = DanModel::load(&a.checkpoint)?;
    let name = a.name.unwrap_or_else(|| dir_label(&a.checkpoint));
    let mut rows = Vec::new();
    for split in list(&a.split) {
        let data = Dataset::load_split(&a.data.data, &split)?;
        let report = evaluate(&model, &data)?.report;
        rows.extend(report_rows(&name, &split, &report));
    }
    write_metrics(&a.out, &rows)?;
    print_rows(&rows);
    Ok(())
}

fn cmd_ensemble(a: EnsembleArgs) -> Result<()> {
    let mut members: Vec<(String, DanModel)> = if let Some(spec) = &a.checkpoints {
        list(spec)
            .into_iter()
            .map(|p| {
                let p = PathBuf::from(p);
                Ok((dir_label(&p), DanModel::load(&p)?))
            })
            .collect::<Result<_>>()?
    } else {
        let heads = parse_heads(a.heads.as_deref().unwrap_or_default())?;
        let base = train_config(a.config.as_deref(), a.seed, None)?;
        let train = Dataset::load_split(&a.data.data, &a.train_split)?;
        heads
            .into_iter()
            .map(|h| {
                let mut config = base.clone();
                config.model.heads = h;
                let name = format!("h{h}");
                let dir = a.out.join(&name);
                println!("training member {name}");
                let outcome = train_with(&config, &train, None, Some(&dir), |_| {})?;
                Ok((name, outcome.model))
            })
            .collect::<Result<_>>()?
    };
    if members.is_empty() {
        return Err(usage("ensemble needs at least one member"));
    }
    // Repeated checkpoint names get their position appended.
    for i in 0..members.len() {
        if members[..i].iter().any(|(n, _)| *n == members[i].0) {
            members[i].0 = format!("{}-{}", members[i].0, i + 1);
        }
    }
    let mut rows = Vec::new();
    for split in list(&a.split) {
        let data = Dataset::load_split(&a.data.data, &split)?;
        let per_member = members
            .iter()
            .map(|(_, m)| score_all(m, &data))
            .collect::<Result<Vec<_>>>()?;
        for ((name, _), scores) in members.iter().zip(&per_member) {
            rows.extend(report_rows(name, &split, &evaluate_scores(&data, scores)?.report));
        }
        let averaged = (0..data.dialogs.dialogs.len())
            .map(|d| {
                let per_dialog: Vec<_> = per_member.iter().map(|m| m[d].clone()).collect();
                average(&per_dialog)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(report_rows("ensemble", &split, &evaluate_scores(&data, &averaged)?.report));
    }
    write_metrics(&a.out, &rows)?;
    print_rows(&rows);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let spec = match (&a.grid, &a.preset) {
        (Some(path), _) => read_json::<GridSpec>(Some(path))?,
        (None, Some(p)) => GridSpec::preset(p)?,
        (None, None) => return Err(usage("pass --grid or --preset")),
    };
    let base = train_config(a.config.as_deref(), a.seed, None)?;
    let train = Dataset::load_split(&a.data.data, &a.train_split)?;
    let eval_data = Dataset::load_split(&a.data.data, &a.split)?;
    let results = run_grid(&base, &spec, &train, &eval_data);
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_csv(&a.out.join("ablation.csv"), &results)?;
    for r in &results {
        match &r.outcome {
            Ok(m) => println!("{:<28} mrr {:.4}  r@1 {:.4}", r.label, m.overall.mrr, m.overall.r1),
            Err(e) => println!("{:<28} error: {}: {e}", r.label, e.kind()),
        }
    }
    Ok(())
}

fn cmd_attn_dump(a: AttnDumpArgs) -> Result<()> {
    let model = DanModel::load(&a.checkpoint)?;
    let data = Dataset::load_split(&a.data.data, &a.split)?;
    let dialogs = &data.dialogs.dialogs;
    let dialog = dialogs
        .iter()
        .find(|d| d.image_id == a.dialog)
        .or_else(|| a.dialog.parse::<usize>().ok().and_then(|i| dialogs.get(i)))
        .ok_or_else(|| usage(format!("no dialog `{}` in split {}", a.dialog, a.split)))?;
    let mut traces = model.trace_dialog(&data, dialog)?;
    if let Some(t) = a.round {
        if t < 1 || t > traces.len() {
            return Err(usage(format!("round {t} outside 1..={}", traces.len())));
        }
        traces = vec![traces.swap_remove(t - 1)];
    }
    match &a.out {
        Some(path) => write_json(path, &traces),
        None => {
            let text = serde_json::to_string_pretty(&traces).map_err(|e| Error::Json {
                path: PathBuf::from("<stdout>"),
                source: e,
            })?;
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    let mut config: GradCheckConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let report = grad_check(&config)?;
    for p in &report.params {
        println!("{:<28} {:>6}  max rel {:.3e}", p.name, p.elements, p.max_rel_error);
    }
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e}): {}",
        report.max_rel_error,
        report.tolerance,
        if report.passed { "ok" } else { "FAILED" }
    );
    if report.passed {
        Ok(())
    } else {
        Err(usage("gradient check exceeded tolerance"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::AttnDump(a) => cmd_attn_dump(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
