mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use enprune::criteria::{self, Criterion, ScoreTable};
use enprune::data::Dataset;
use enprune::engine;
use enprune::graph::{ChannelAnalysis, ModelGraph};
use enprune::io;
use enprune::metrics::{self, count_complexity};
use enprune::pruner;
use enprune::toybench::{self, build_reference_arch, build_toy_mlp, build_zoo_graph, toy_experiment};
use enprune::Error;

use config::Config;

#[derive(Parser)]
#[command(name = "enprune", version, about = "Energy-aware structured channel pruning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; may repeat.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scoring (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/test dataset pair.
    GenData {
        /// `blobs` (2-D Gaussian blobs) or `patterns` (small images).
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Train a freshly initialised model.
    Train {
        /// `toy-mlp` or a zoo graph name.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Score every prunable channel with one criterion.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        criterion: Option<Criterion>,
        /// Score on the first N samples only.
        #[arg(long)]
        samples: Option<usize>,
        /// `.json` writes the full table; anything else writes CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan and apply a pruning.
    Prune {
        #[arg(long)]
        model: PathBuf,
        /// Scoring samples (scores are computed on them).
        #[arg(long, required_unless_present = "scores")]
        data: Option<PathBuf>,
        /// Precomputed score table (JSON) instead of scoring samples.
        #[arg(long, conflicts_with = "data")]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the removal list.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        criterion: Option<Criterion>,
    },
    /// Continue training an existing model.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Accuracy and loss of a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOPs and parameter counts.
    Count {
        #[arg(long, required_unless_present = "model", conflicts_with = "model")]
        arch: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Report reductions against this model.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kendall distance between rankings from nested sample sets.
    Stability {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated increasing sample counts.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long)]
        criterion: Option<Criterion>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the 3x1000 MLP on blobs and compare criteria at 1000 removed neurons.
    ToyExperiment {
        /// Write the machine-readable report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render a CSV report as an aligned table.
    Report { input: PathBuf },
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Write the per-epoch history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

fn config(common: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.set_opt("seed", common.seed)?;
    for pair in &common.overrides {
        cfg.assign(pair)?;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn build_arch(arch: &str, data: &Dataset, seed: u64) -> anyhow::Result<ModelGraph> {
    let g = match arch {
        "toy-mlp" => {
            if data.sample_shape() != [2] {
                bail!(Error::Data(format!("toy-mlp needs 2-D samples, got {:?}", data.sample_shape())));
            }
            build_toy_mlp(data.classes, seed)?
        }
        _ => match data.sample_shape() {
            &[c, h, w] if h == w => build_zoo_graph(arch, c, h, data.classes, seed)?,
            s => bail!(Error::Data(format!("{arch} needs square image samples, got {s:?}"))),
        },
    };
    Ok(g)
}

fn fit(g: &ModelGraph, data: &Dataset, cfg: &mut Config, args: &FitArgs, out: &Path) -> anyhow::Result<()> {
    cfg.set_opt("train.max_epochs", args.epochs)?;
    cfg.set_opt("train.lr", args.lr)?;
    let outcome = engine::train(g, data, &cfg.train()?)?;
    io::save_model(&outcome.graph, out)?;
    if let Some(h) = &args.history {
        write(h, &outcome.history_csv())?;
    }
    println!(
        "trained {} epochs; best epoch {} with validation accuracy {:.2}%",
        outcome.history.len(),
        outcome.best_epoch,
        100.0 * outcome.best_val_acc
    );
    Ok(())
}

fn save_scores(t: &ScoreTable, out: &Path) -> anyhow::Result<()> {
    let text = if out.extension().is_some_and(|e| e == "json") {
        t.to_json()?
    } else {
        t.to_csv()
    };
    write(out, &text)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = config(&cli.common)?;
    match cli.command {
        Command::GenData { kind, train, test } => {
            cfg.set_opt("data.kind", kind)?;
            let kind: String = cfg.get("data.kind")?.unwrap_or_else(|| "blobs".into());
            let (tr, te) = match kind.as_str() {
                "blobs" => toybench::gen_blobs(&cfg.blobs()?)?,
                "patterns" => toybench::gen_patterns(&cfg.patterns()?)?,
                other => bail!(Error::Config(format!("unknown dataset kind '{other}'"))),
            };
            io::save_dataset(&tr, &train)?;
            io::save_dataset(&te, &test)?;
            println!("wrote {} training and {} test samples", tr.len(), te.len());
        }
        Command::Train { arch, data, out, fit: args } => {
            let d = io::load_dataset(&data)?;
            let g = build_arch(&arch, &d, cfg.train()?.seed)?;
            fit(&g, &d, &mut cfg, &args, &out)?;
        }
        Command::Finetune { model, data, out, fit: args } => {
            let g = io::load_model(&model)?;
            let d = io::load_dataset(&data)?;
            fit(&g, &d, &mut cfg, &args, &out)?;
        }
        Command::Score {
            model,
            data,
            criterion,
            samples,
            out,
        } => {
            cfg.set_opt("prune.criterion", criterion)?;
            cfg.set_opt("score.samples", samples)?;
            let spec = cfg.pruning()?;
            let g = io::load_model(&model)?;
            let mut d = io::load_dataset(&data)?;
            if let Some(n) = cfg.get::<usize>("score.samples")? {
                d = d.range(0, n);
            }
            let an = ChannelAnalysis::with_protected(&g, &spec.protected)?;
            let t = criteria::score(&g, &an, spec.criterion, &d.x, &d.y, spec.seed)?;
            save_scores(&t, &out)?;
            println!("scored {} channels with {} on {} samples", t.channel_count(), t.criterion, t.samples);
        }
        Command::Prune {
            model,
            data,
            scores,
            out,
            plan,
            mode,
            ratio,
            threshold,
            criterion,
        } => {
            cfg.set_opt("prune.mode", mode)?;
            cfg.set_opt("prune.ratio", ratio)?;
            cfg.set_opt("prune.threshold", threshold)?;
            cfg.set_opt("prune.criterion", criterion)?;
            let spec = cfg.pruning()?;
            let g = io::load_model(&model)?;
            let (pruned, plan_text) = match (scores, data) {
                (Some(path), _) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                    let table = ScoreTable::from_json(&text)?;
                    let p = pruner::plan(&g, &table, &spec)?;
                    println!("{p}");
                    (pruner::execute(&g, &p)?, p.to_text(&g))
                }
                (None, Some(path)) => {
                    let d = io::load_dataset(&path)?;
                    let r = pruner::prune_pipeline(&g, &d, &spec, None)?;
                    let removed: usize = r.rounds.iter().map(|x| x.removed_channels).sum();
                    println!(
                        "{} rounds, {removed} channels removed: flops {} -> {}, params {} -> {}",
                        r.rounds.len(),
                        r.before.flops,
                        r.after.flops,
                        r.before.params,
                        r.after.params
                    );
                    let text = r.rounds.iter().map(|x| x.plan_text.as_str()).collect::<Vec<_>>().join("");
                    (r.graph, text)
                }
                (None, None) => bail!(Error::Config("prune needs --data or --scores".into())),
            };
            io::save_model(&pruned, &out)?;
            if let Some(p) = plan {
                write(&p, &plan_text)?;
            }
        }
        Command::Eval { model, data, out } => {
            let g = io::load_model(&model)?;
            let d = io::load_dataset(&data)?;
            let acc = engine::accuracy(&g, &d)?;
            let loss = engine::evaluate_loss(&g, &d)?;
            println!("accuracy {:.4}% loss {loss:.6} samples {}", 100.0 * acc, d.len());
            if let Some(p) = out {
                let v = serde_json::json!({ "accuracy": acc, "loss": loss, "samples": d.len() });
                write(&p, &(serde_json::to_string_pretty(&v)? + "\n"))?;
            }
        }
        Command::Count {
            arch,
            model,
            reference,
            out,
        } => {
            let g = match (arch, model) {
                (Some(a), _) => build_reference_arch(&a)?,
                (None, Some(p)) => io::load_model(&p)?,
                (None, None) => bail!(Error::Config("count needs --arch or --model".into())),
            };
            let mut r = count_complexity(&g)?;
            if let Some(p) = reference {
                r = r.with_reference(&count_complexity(&io::load_model(&p)?)?);
            }
            print!("{}", r.to_table());
            if let Some(p) = out {
                write(&p, &(serde_json::to_string_pretty(&r)? + "\n"))?;
            }
        }
        Command::Stability {
            model,
            data,
            sizes,
            criterion,
            out,
        } => {
            cfg.set_opt("prune.criterion", criterion)?;
            let spec = cfg.pruning()?;
            let g = io::load_model(&model)?;
            let d = io::load_dataset(&data)?;
            let an = ChannelAnalysis::with_protected(&g, &spec.protected)?;
            let rows = metrics::stability_curve(&g, &an, &d, spec.criterion, &sizes, spec.seed)?;
            let csv = metrics::stability_csv(&rows);
            print!("{}", aligned(&csv)?);
            if let Some(p) = out {
                write(&p, &csv)?;
            }
        }
        Command::ToyExperiment { out, epochs } => {
            cfg.set_opt("train.max_epochs", epochs)?;
            if epochs.is_some() {
                cfg.set_opt("train.patience", epochs)?;
            }
            let report = toy_experiment(&cfg.toy()?)?;
            print!("{}", report.to_table());
            if let Some(p) = out {
                write(&p, &report.to_csv())?;
            }
        }
        Command::Report { input } => {
            let text = fs::read_to_string(&input).map_err(|e| Error::Io(format!("{}: {e}", input.display())))?;
            print!("{}", aligned(&text)?);
        }
    }
    Ok(())
}

/// Pads every CSV column to its widest cell; numeric columns are right-aligned.
fn aligned(csv_text: &str) -> anyhow::Result<String> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_reader(csv_text.as_bytes());
    let rows: Vec<Vec<String>> = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Data(format!("bad report: {e}")))?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let numeric: Vec<bool> = (0..cols)
        .map(|c| rows.iter().skip(1).filter_map(|r| r.get(c)).all(|v| v.parse::<f64>().is_ok()))
        .collect();
    let mut s = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if numeric[c] {
                    format!("{v:>w$}", w = widths[c])
                } else {
                    format!("{v:<w$}", w = widths[c])
                }
            })
            .collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    Ok(s)
}

/// Exit status per failure class.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Domain(_) | Error::Unsupported(_)) => 2,
        Some(Error::Data(_) | Error::Io(_) | Error::Shape(_)) => 3,
        Some(Error::Numerical(_)) => 4,
        Some(Error::Refused(_) | Error::Structural(_)) => 5,
        Some(Error::Consistency(_)) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
