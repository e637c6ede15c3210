use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use e3lab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use e3lab::config::{load_config, Method, Protocol, RunConfig};
use e3lab::error::{E3Error, Result};
use e3lab::protocol::train_baseline;
use e3lab::report::{read_csv, recompute_summary, write_csv, SummaryRow, SUMMARY_FILE, SUMMARY_HEADER};
use e3lab::runner::{execute, parse_variant, Inputs, RunKind, RunRequest};
use e3lab::synthgen::{build_corpus, Corpus};

/// Continual learning lab for synthetic image detection.
#[derive(Parser)]
#[command(name = "e3lab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the corpus described by a config and export it.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline detector on an exported corpus.
    TrainBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a protocol and write results and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// single, sequential or arch; defaults to the config's protocol.
        #[arg(long)]
        protocol: Option<String>,
        /// Comma-separated methods, e.g. e3,finetune,er,lwf,majority.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Sequential E3 runs over several new-generator budgets.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sequential E3 with a chosen fusion network variant and depth.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// full, mlp_only or no_weighting.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        layers: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the summary table of a run directory from its detail CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated master seeds; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Exported corpus to use instead of regenerating it.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Baseline detector checkpoint to use instead of retraining it.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    no_checkpoints: bool,
}

fn request(name: &str, cfg: RunConfig, kind: RunKind, common: &Common) -> Result<(RunRequest, Inputs)> {
    let mut req = RunRequest::new(name, cfg);
    req.kind = kind;
    req.checkpoints = !common.no_checkpoints;
    if !common.seeds.is_empty() {
        req.seeds = common.seeds.clone();
    }
    let inputs = Inputs {
        corpus: common.corpus.as_deref().map(Corpus::import).transpose()?,
        baseline: common
            .baseline
            .as_deref()
            .map(|p| load_checkpoint(p)?.into_detector())
            .transpose()?,
    };
    Ok((req, inputs))
}

fn run_and_print(req: RunRequest, inputs: Inputs, out: &Path) -> Result<()> {
    req.cfg.validate()?;
    let results = execute(&req, inputs, out)?;
    for r in &results {
        let mut methods: Vec<Method> = r.episodes.iter().map(|e| e.method).collect();
        methods.dedup();
        for m in methods {
            if let Some(last) = r.final_report(m) {
                println!(
                    "{} seed={} {} final avg AUC {:.4} acc {:.4}",
                    r.label,
                    r.master_seed,
                    m.name(),
                    last.average_auc,
                    last.average_accuracy
                );
            }
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenCorpus { config, out } => {
            let cfg = load_config(&config)?;
            let corpus = build_corpus(&cfg.corpus, cfg.master_seed)?;
            corpus.export(&out)?;
            println!("{}", corpus.pixel_checksum());
            Ok(())
        }
        Cmd::TrainBaseline { config, corpus, out } => {
            let cfg = load_config(&config)?;
            let corpus = Corpus::import(&corpus)?;
            let f0 = train_baseline(&cfg, &corpus)?;
            save_checkpoint(&Checkpoint::Detector(f0.clone()), &out)?;
            println!("{}", f0.checksum());
            Ok(())
        }
        Cmd::Run {
            config,
            protocol,
            methods,
            common,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = protocol {
                cfg.protocol = Protocol::parse(&p)?;
                if cfg.protocol == Protocol::Sweep {
                    return Err(E3Error::config("protocol", "use the sweep subcommand for budget sweeps"));
                }
            }
            if !methods.is_empty() {
                cfg.methods = methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
            }
            let (req, inputs) = request("run", cfg, RunKind::Protocol, &common)?;
            run_and_print(req, inputs, &common.out)
        }
        Cmd::Sweep { config, budgets, common } => {
            let mut cfg = load_config(&config)?;
            cfg.protocol = Protocol::Sweep;
            if !budgets.is_empty() {
                cfg.sweep_budgets = budgets;
            }
            let (req, inputs) = request("sweep", cfg, RunKind::Protocol, &common)?;
            run_and_print(req, inputs, &common.out)
        }
        Cmd::Ablate {
            config,
            variant,
            layers,
            common,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.ekfn.variant = parse_variant(&variant)?;
            if let Some(l) = layers {
                cfg.ekfn.n_layers = l;
            }
            let (req, inputs) = request("ablate", cfg, RunKind::Ablate, &common)?;
            run_and_print(req, inputs, &common.out)
        }
        Cmd::Report { input, format } => {
            if format != "csv" {
                return Err(E3Error::config("format", format!("unsupported format `{format}`")));
            }
            let rows = recompute_summary(&input)?;
            let written = input.join(SUMMARY_FILE);
            if written.exists() {
                let stored: Vec<SummaryRow> = read_csv(&written, &SUMMARY_HEADER)?;
                if stored != rows {
                    return Err(E3Error::Data(format!("{} disagrees with the detail CSV", written.display())));
                }
            }
            write_csv(io::stdout().lock(), &SUMMARY_HEADER, &rows)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
