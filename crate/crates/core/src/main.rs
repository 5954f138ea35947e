use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use rca_core::data::{apply_feature_map, load_sparse, save_sparse, split, synth_generate, topk_map};
use rca_core::eval::{alignment_report, evaluate, run_ablation, Arm};
use rca_core::gradcheck::{run_suite, TOLERANCE};
use rca_core::trainer::train_with;
use rca_core::{Checkpoint, Corpus, Error, Result, SynthConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "rca", version, about = "Contrastive multi-domain text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a sparse corpus and save the best-dev checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One JSON record per epoch.
        #[arg(long)]
        log: PathBuf,
    },
    /// Per-domain and average accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic multi-domain corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every arm on every seed and write a JSON table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: full, no_dscl, no_cscl, no_al, baseline.
        #[arg(long, value_delimiter = ',', default_value = "full,no_dscl,no_cscl,no_al")]
        arms: Vec<Arm>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation over ten
    /// seeds starting at `--seed`.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Metrics, alignment diagnostics and a per-domain table.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Exit status and one-line diagnostic for a failed command.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.exit_code() as u8, e.to_string())
    }
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure(2, format!("no such file: {}", path.display())))
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable value")
}

/// Loads a corpus and remaps it through the checkpoint's feature
/// selection when the corpus still has its original feature space.
fn corpus_for(ckpt: &Checkpoint, data: &Path) -> Result<Corpus, Failure> {
    require(data)?;
    let corpus = load_sparse(data)?;
    match &ckpt.feature_map {
        Some(map) if corpus.feature_dim != ckpt.model.input_dim() => {
            if map.iter().any(|&i| i >= corpus.feature_dim) {
                return Err(Error::Dimension(format!(
                    "corpus has {} features, fewer than the checkpoint's selection needs",
                    corpus.feature_dim
                ))
                .into());
            }
            Ok(apply_feature_map(&corpus, map))
        }
        _ => Ok(corpus),
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    require(path)?;
    Ok(Checkpoint::load(path)?)
}

fn run(cmd: Command) -> Result<(), Failure> {
    let mut stdout = std::io::stdout().lock();
    match cmd {
        Command::Train { data, config, out, log } => {
            require(&data)?;
            require(&config)?;
            let cfg = TrainConfig::load(&config)?;
            let corpus = load_sparse(&data)?;
            let mut splits = split(&corpus, cfg.split, cfg.hp.seed)?;
            let mut feature_map = None;
            if let Some(k) = cfg.top_k {
                let map = topk_map(&splits.train, k);
                if map.is_empty() {
                    return Err(Error::InvalidParam("top_k selected no features".into()).into());
                }
                for part in [&mut splits.train, &mut splits.dev, &mut splits.test] {
                    *part = apply_feature_map(part, &map);
                }
                feature_map = Some(map);
            }
            let model = cfg.hp.build_model(splits.train.feature_dim, corpus.num_classes)?;
            let mut log_file = BufWriter::new(File::create(&log).map_err(Error::from)?);
            let (best, history) = train_with(model, &splits.train, &splits.dev, &cfg.hp, |rec| {
                writeln!(log_file, "{}", to_json(rec))?;
                Ok(())
            })?;
            log_file.flush().map_err(Error::from)?;
            let metrics = evaluate(&best, &splits.test)?;
            Checkpoint {
                model: best,
                feature_map,
            }
            .save(&out)?;
            let summary = json!({
                "best_epoch": history.best_epoch,
                "counters": history.counters,
                "test": metrics,
            });
            writeln!(stdout, "{summary}").map_err(Error::from)?;
        }
        Command::Eval { ckpt, data } => {
            let ckpt = load_ckpt(&ckpt)?;
            let corpus = corpus_for(&ckpt, &data)?;
            writeln!(stdout, "{}", to_json(&evaluate(&ckpt.model, &corpus)?)).map_err(Error::from)?;
        }
        Command::Synth { config, out } => {
            require(&config)?;
            let cfg = SynthConfig::load(&config)?;
            let corpus = synth_generate(&cfg)?;
            save_sparse(&corpus, &out)?;
            writeln!(stdout, "wrote {} instances to {}", corpus.len(), out.display()).map_err(Error::from)?;
        }
        Command::Ablate {
            data,
            config,
            arms,
            seeds,
            out,
        } => {
            require(&data)?;
            require(&config)?;
            let cfg = TrainConfig::load(&config)?;
            let mut corpus = load_sparse(&data)?;
            if let Some(k) = cfg.top_k {
                corpus = apply_feature_map(&corpus, &topk_map(&corpus, k));
            }
            let table = run_ablation(&corpus, &cfg.hp, cfg.split, &arms, &seeds)?;
            std::fs::write(&out, serde_json::to_string_pretty(&table).expect("serializable table"))
                .map_err(Error::from)?;
            for s in &table.summary {
                writeln!(
                    stdout,
                    "{:<10} runs={} mean={:.4} std={:.4}",
                    s.arm.name(),
                    s.runs,
                    s.mean_accuracy,
                    s.std_accuracy
                )
                .map_err(Error::from)?;
            }
        }
        Command::Gradcheck { seed } => {
            let seeds: Vec<u64> = (seed..seed + 10).collect();
            let checks = run_suite(&seeds)?;
            let mut ok = true;
            for c in &checks {
                let pass = c.max_rel_error <= TOLERANCE;
                ok &= pass;
                writeln!(
                    stdout,
                    "{:<14} {:.3e} {}",
                    c.op,
                    c.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                )
                .map_err(Error::from)?;
            }
            if !ok {
                return Err(Failure(4, format!("gradient check above {TOLERANCE:e}")));
            }
        }
        Command::Report { ckpt, data } => {
            let ckpt = load_ckpt(&ckpt)?;
            let corpus = corpus_for(&ckpt, &data)?;
            let metrics = evaluate(&ckpt.model, &corpus)?;
            let alignment = alignment_report(&ckpt.model, &corpus)?;
            writeln!(stdout, "{}", json!({ "metrics": metrics, "alignment": alignment })).map_err(Error::from)?;
            writeln!(stdout, "domain\tname\tn\taccuracy").map_err(Error::from)?;
            for (d, acc) in &metrics.per_domain_accuracy {
                let name = corpus.domain_names.get(*d).map(String::as_str).unwrap_or("-");
                writeln!(stdout, "{d}\t{name}\t{}\t{acc}", metrics.n_per_domain[d]).map_err(Error::from)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("rca: {msg}");
            ExitCode::from(code)
        }
    }
}
