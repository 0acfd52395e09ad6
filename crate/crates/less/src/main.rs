use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use less::config::RunConfig;
use less::corpus::{group_by_subtask, read_jsonl, write_jsonl};
use less::datastore::{read_checkpoints, write_checkpoints, Datastore};
use less::pipeline::{self, Corpus, Counters, SeedSetup, Selection, STORE_KINDS};
use less::report;
use less_core::Kernel;

#[derive(Parser)]
#[command(
    name = "less",
    about = "Optimizer-aware influence-based data selection"
)]
struct Cli {
    /// JSON run config; defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write pool.jsonl, val.jsonl and test.jsonl.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up the selection model and save its per-epoch checkpoints.
    Warmup {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute training-side features for every pool example into the datastores.
    Featurize {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a store against the validation split and write the top fraction.
    Score {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        kernel: Option<String>,
        /// Output directory for scores.csv and selection.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline selections: random, tfidf or rds.
    Select {
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Needed for rds.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the target model on a selection and report test metrics.
    Train {
        #[arg(long)]
        selection: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the transfer target model instead of the default one.
        #[arg(long)]
        transfer: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every method over every configured seed.
    Experiment {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle checks; exits nonzero if any fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect a datastore file.
    Datastore {
        #[command(subcommand)]
        action: StoreAction,
    },
}

#[derive(Subcommand)]
enum StoreAction {
    /// Header and records as JSON lines.
    Dump { path: PathBuf },
    /// Structural and numeric checks; exits nonzero on any fault.
    Validate { path: PathBuf },
}

fn parse_kernel(s: &str) -> Result<Kernel> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .with_context(|| format!("unknown kernel {s:?} (adam_cosine, sgd_dot, sign_gd_cosine)"))
}

fn load_val(cfg: &RunConfig) -> Result<Vec<Vec<less_core::Example>>> {
    Ok(match &cfg.val_path {
        Some(p) => group_by_subtask(&read_jsonl(p)?)?,
        None => Corpus::generate(&cfg.data)?.val,
    })
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData { out } => {
            let c = Corpus::generate(&cfg.data)?;
            std::fs::create_dir_all(&out)?;
            write_jsonl(out.join("pool.jsonl"), &c.pool)?;
            write_jsonl(out.join("val.jsonl"), &c.val.concat())?;
            write_jsonl(out.join("test.jsonl"), &c.test.concat())?;
            println!(
                "pool {} val {} test {}",
                c.pool.len(),
                c.val.concat().len(),
                c.test.concat().len()
            );
        }
        Command::Warmup { seed, out } => {
            let corpus = Corpus::load(&cfg)?;
            let setup = SeedSetup::new(&cfg, seed)?;
            std::fs::create_dir_all(&out)?;
            let (cks, summary) = pipeline::warmup(
                &setup.selection,
                &corpus.pool,
                cfg.warmup_fraction,
                &setup.warmup,
            )?;
            write_checkpoints(out.join("checkpoints.bin"), &cks)?;
            report::write_json(out.join("warmup.json"), &summary)?;
            println!(
                "{} checkpoints, epoch losses {:?}",
                cks.len(),
                summary.epoch_losses
            );
        }
        Command::Featurize {
            seed,
            checkpoints,
            out,
        } => {
            let corpus = Corpus::load(&cfg)?;
            let setup = SeedSetup::new(&cfg, seed)?;
            let cks = read_checkpoints(&checkpoints)?;
            let counters = Counters::default();
            let s = pipeline::featurize(
                &setup.selection,
                &cks,
                &corpus.pool,
                &setup.projection,
                &setup.warmup.adam,
                &STORE_KINDS,
                &out,
                &counters,
            )?;
            for p in &s.stores {
                println!("{} ({} records)", p.display(), s.records_per_store);
            }
        }
        Command::Score {
            seed,
            checkpoints,
            store,
            kernel,
            out,
        } => {
            let kernel = kernel
                .as_deref()
                .map(parse_kernel)
                .transpose()?
                .unwrap_or(cfg.kernel);
            let val = load_val(&cfg)?;
            let setup = SeedSetup::new(&cfg, seed)?;
            let cks = read_checkpoints(&checkpoints)?;
            let store = Datastore::open(&store)?;
            let counters = Counters::default();
            let (scores, sel, diag) = pipeline::score_and_select(
                &setup.selection,
                &cks,
                &store,
                &val,
                &setup.projection,
                kernel,
                cfg.select_fraction,
                &counters,
            )?;
            std::fs::create_dir_all(&out)?;
            report::write_scores_csv(out.join("scores.csv"), &scores)?;
            report::write_json(out.join("selection.json"), &sel)?;
            println!(
                "selected {} of {} ({} zero-norm terms of {})",
                sel.ids.len(),
                scores.len(),
                diag.zero_norm_terms,
                diag.terms
            );
        }
        Command::Select {
            method,
            seed,
            checkpoints,
            out,
        } => {
            let corpus = Corpus::load(&cfg)?;
            let setup = SeedSetup::new(&cfg, seed)?;
            let sel = match method.as_str() {
                "random" => {
                    pipeline::select_random(&corpus.pool, cfg.select_fraction, setup.random_seed)?
                }
                "tfidf" => {
                    pipeline::select_tfidf(&corpus.pool, &corpus.val, cfg.select_fraction)?.1
                }
                "rds" => {
                    let path = checkpoints.context("rds needs --checkpoints")?;
                    let cks = read_checkpoints(path)?;
                    pipeline::select_rds(
                        &setup.selection,
                        &cks,
                        &corpus.pool,
                        &corpus.val,
                        cfg.select_fraction,
                    )?
                    .1
                }
                other => bail!("unknown method {other:?} (random, tfidf, rds)"),
            };
            report::write_json(&out, &sel)?;
            println!("selected {} examples into {}", sel.ids.len(), out.display());
        }
        Command::Train {
            selection,
            seed,
            transfer,
            out,
        } => {
            let corpus = Corpus::load(&cfg)?;
            let setup = SeedSetup::new(&cfg, seed)?;
            let text = std::fs::read_to_string(&selection)
                .with_context(|| format!("reading {}", selection.display()))?;
            let sel: Selection = serde_json::from_str(&text)?;
            let model = if transfer {
                &cfg.models.transfer_target
            } else {
                &cfg.models.target
            };
            let result = pipeline::train_target(
                model,
                setup.target_init,
                &sel.examples(&corpus.pool)?,
                &corpus.val,
                &corpus.test,
                &setup.target,
            )?;
            for e in &result.test {
                println!(
                    "{:<16} loss {:.4} token_acc {:.3} exact {:.3}",
                    e.name, e.metrics.loss, e.metrics.token_accuracy, e.metrics.exact_match
                );
            }
            println!(
                "mean test loss {:.4} (best epoch {})",
                result.mean_test_loss, result.best_epoch
            );
            if let Some(out) = out {
                report::write_json(out, &result)?;
            }
        }
        Command::Experiment { out } => {
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let corpus = Corpus::load(&cfg)?;
            let rep = pipeline::run_experiment(&cfg, &corpus)?;
            print!("{}", report::format_summary(&rep));
            println!(
                "report written to {}",
                cfg.output_dir.join("report.json").display()
            );
        }
        Command::Verify { seed, trials, out } => {
            let corpus = Corpus::load(&cfg)?;
            let v = pipeline::run_verify(&cfg, &corpus, seed, trials)?;
            for c in &v.report.checks {
                println!(
                    "{:<32} {:?} statistic {:.4} band [{}, {}] n={}",
                    c.name,
                    c.status,
                    c.statistic,
                    c.lower.map_or("-".into(), |x| format!("{x:.3}")),
                    c.upper.map_or("-".into(), |x| format!("{x:.3}")),
                    c.samples
                );
            }
            if let Some(out) = out {
                report::write_json(out, &v)?;
            }
            return Ok(v.report.all_passed());
        }
        Command::Datastore { action } => match action {
            StoreAction::Dump { path } => {
                let store = Datastore::open(&path)?;
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                store.dump_jsonl(&mut lock)?;
                lock.flush()?;
            }
            StoreAction::Validate { path } => return validate_store(&path),
        },
    }
    Ok(true)
}

fn validate_store(path: &Path) -> Result<bool> {
    let store = Datastore::open(path)?;
    let faults = store.validate();
    let h = store.header();
    println!(
        "{}: kind {:?}, d {}, P {}, {} epochs, {} examples, {} records",
        path.display(),
        h.kind,
        h.dim,
        h.input_dim,
        h.num_epochs(),
        h.example_count,
        store.record_count()
    );
    for f in &faults {
        println!("fault: {}", serde_json::to_string(f)?);
    }
    if faults.is_empty() {
        println!("ok");
    }
    Ok(faults.is_empty())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
