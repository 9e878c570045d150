use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fastmoco::config::{write_atomic, AblationMatrix, CellOutcome, RunConfig, KEYS};
use fastmoco::data::{synth_dataset, write_cifar};
use fastmoco::gradcheck;
use fastmoco::tensor::set_relu_backward_fault;
use fastmoco::train::{
    checkpoint_config, knn_checkpoint, linear_eval_checkpoint, load_datasets, pretrain, probe_config, Checkpoint,
    MetricsRecord, SYNTH_TEST_SEED, SYNTH_TRAIN_SEED,
};
use fastmoco::Error;

pub const LEDGER_HEADER: &str = "command,checkpoint,config_hash,dataset,metric,value";

/// Keys that may be changed at evaluation time without changing which
/// pre-training run a result belongs to.
const EVAL_KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "synth_train",
    "synth_test",
    "train_subset",
    "probe_epochs",
    "probe_lr",
    "probe_batch",
    "knn_k",
];

fn key_table() -> String {
    let mut s = String::from("Run-config keys (key = value, `#` starts a comment):\n");
    for (k, legal) in KEYS {
        s.push_str(&format!("  {k:<20} {legal}\n"));
    }
    s.push_str("\nExit codes: 0 ok, 1 runtime failure, 2 config error.\n");
    s
}

#[derive(Parser)]
#[command(name = "fastmoco", version, about = "Momentum contrastive pre-training with combinatorial patches", after_help = key_table())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train from a config file, writing config, metrics and checkpoints
    #[command(after_help = key_table())]
    Pretrain {
        config: PathBuf,
        /// key=value overrides, applied after the file
        #[arg(long = "set", num_args = 1..)]
        set: Vec<String>,
    },
    /// Linear-probe top-1 of a checkpoint's frozen encoder
    LinearEval {
        checkpoint: PathBuf,
        /// Evaluation-side overrides (dataset, probe_*, ...)
        #[arg(long = "set", num_args = 1..)]
        set: Vec<String>,
        /// Append-only results ledger
        #[arg(long, default_value = "results.csv")]
        results: PathBuf,
    },
    /// Cosine k-NN top-1 of a checkpoint's frozen encoder
    Knn {
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "set", num_args = 1..)]
        set: Vec<String>,
        #[arg(long, default_value = "results.csv")]
        results: PathBuf,
    },
    /// Finite-difference check of every differentiable op at f64
    Gradcheck {
        /// Break the relu backward rule to show the suite notices
        #[arg(long, hide = true)]
        inject_relu_fault: bool,
    },
    /// Run every cell of an ablation matrix, resuming a partial summary
    Ablate {
        matrix: PathBuf,
        /// Summary CSV, default `<output_dir>/summary.csv`
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Write the synthetic dataset as CIFAR-10 binary batches
    SynthData {
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn read_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig), Failure> {
    let ckpt = Checkpoint::load(path).map_err(|e| Failure::Runtime(format!("refusing to load {}: {e}", path.display())))?;
    let cfg = checkpoint_config(&ckpt)?;
    Ok((ckpt, cfg))
}

fn eval_config(base: &RunConfig, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut cfg = base.clone();
    for o in overrides {
        let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k.trim());
        if !EVAL_KEYS.contains(&key) {
            return Err(Failure::Config(format!(
                "config error in `{key}`: not an evaluation key (allowed: {})",
                EVAL_KEYS.join(", ")
            )));
        }
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Appends one row to the results ledger, writing the header first if the
/// file is new.
fn append_result(ledger: &Path, row: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Runtime(format!("results ledger {}: {e}", ledger.display()));
    let fresh = !ledger.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(ledger).map_err(io)?;
    if fresh {
        writeln!(f, "{LEDGER_HEADER}").map_err(io)?;
    }
    writeln!(f, "{row}").map_err(io)
}

fn dataset_name(cfg: &RunConfig) -> String {
    cfg.get("dataset").unwrap_or_default()
}

fn print_metrics(r: &MetricsRecord) {
    eprintln!(
        "epoch {:>3} step {:>6}  lr {:.5}  loss {:.4}  emb_std {:.4}  grad {:.3}",
        r.epoch, r.step, r.lr, r.loss, r.embedding_std, r.grad_norm
    );
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Pretrain { config, set } => {
            let cfg = read_config(&config, &set)?;
            let (train, _) = load_datasets(&cfg)?;
            eprintln!("config {} -> {}", cfg.short_hash(), cfg.output_dir);
            let out = pretrain(&cfg, &train, &mut print_metrics)?;
            println!(
                "{} steps, final loss {:.6}, checkpoint {}/final.fmck",
                out.steps, out.final_loss, cfg.output_dir
            );
        }
        Cmd::LinearEval { checkpoint, set, results } => {
            let (ckpt, base) = load_checkpoint(&checkpoint)?;
            let cfg = eval_config(&base, &set)?;
            let (train, test) = load_datasets(&cfg)?;
            let top1 = linear_eval_checkpoint(&ckpt, &train, &test, &probe_config(&cfg))?;
            println!("linear-probe top-1 {top1:.2}%");
            append_result(
                &results,
                &format!("linear-eval,{},{},{},top1,{top1:.4}", checkpoint.display(), base.hash(), dataset_name(&cfg)),
            )?;
        }
        Cmd::Knn { checkpoint, k, set, results } => {
            let (ckpt, base) = load_checkpoint(&checkpoint)?;
            let cfg = eval_config(&base, &set)?;
            let k = k.unwrap_or(cfg.knn_k);
            if k == 0 {
                return Err(Failure::Config("config error in `k`: must be at least 1".into()));
            }
            let (train, test) = load_datasets(&cfg)?;
            let top1 = knn_checkpoint(&ckpt, &train, &test, k)?;
            println!("{k}-NN top-1 {top1:.2}%");
            append_result(
                &results,
                &format!("knn,{},{},{},knn{k}_top1,{top1:.4}", checkpoint.display(), base.hash(), dataset_name(&cfg)),
            )?;
        }
        Cmd::Gradcheck { inject_relu_fault } => {
            set_relu_backward_fault(inject_relu_fault);
            let report = gradcheck::run_suite()?;
            for op in &report.ops {
                println!(
                    "{:<28} max rel-err {:.3e}  tol {:.0e}  {:>5} inputs  {}",
                    op.name,
                    op.max_rel_err,
                    op.tol,
                    op.checked,
                    if op.passed() { "ok" } else { "FAIL" }
                );
            }
            let worst = report.worst().expect("suite is non-empty");
            if !report.passed() {
                return Err(Failure::Runtime(format!(
                    "gradient check failed; worst op {} with rel-err {:.3e} (tol {:.0e})",
                    worst.name, worst.max_rel_err, worst.tol
                )));
            }
            println!("all {} checks passed; worst {} at {:.3e}", report.ops.len(), worst.name, worst.max_rel_err);
        }
        Cmd::Ablate { matrix, summary } => {
            let m = AblationMatrix::load(&matrix).map_err(|e| match e {
                Error::Io { .. } => Failure::Config(e.to_string()),
                e => e.into(),
            })?;
            let (cells, skipped) = m.cells();
            for (assign, why) in &skipped {
                let a: Vec<String> = assign.iter().map(|(k, v)| format!("{k}={v}")).collect();
                eprintln!("skipping {}: {why}", a.join(" "));
            }
            eprintln!("{} cells", cells.len());
            let summary = summary.unwrap_or_else(|| Path::new(&m.base.output_dir).join("summary.csv"));
            let ran = m.run(&summary, |cell| {
                eprintln!("{} {}", cell.id, cell.config.short_hash());
                let cfg = &cell.config;
                let (train, test) = load_datasets(cfg)?;
                let out = pretrain(cfg, &train, &mut |_| {})?;
                let top1 = linear_eval_checkpoint(&out.checkpoint, &train, &test, &probe_config(cfg))?;
                eprintln!("{} top-1 {top1:.2}", cell.id);
                Ok(CellOutcome { top1, loss_final: out.final_loss })
            })?;
            println!("ran {ran} cells; summary in {}", summary.display());
        }
        Cmd::SynthData { out, train, test } => {
            write_cifar(out.join("data_batch_1.bin"), &synth_dataset(train, SYNTH_TRAIN_SEED, true))?;
            write_cifar(out.join("test_batch.bin"), &synth_dataset(test, SYNTH_TEST_SEED, true))?;
            write_atomic(
                &out.join("batches.meta.txt"),
                format!("{}\n", fastmoco::data::SHAPE_NAMES.join("\n")).as_bytes(),
            )?;
            println!("wrote {train} training and {test} test images to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
