//! `mvec` command-line entry point.
//!
//! Failures print one line to stderr, `error: kind=<kind> message=<text>`,
//! and exit with [`EXIT_RUNTIME`], or [`EXIT_USAGE`] for bad flags.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::ExperimentConfig;
use crate::data::{build_trials, generate, read_features, write_features, TrialList};
use crate::error::MvecError;
use crate::eval::dimension_sweep;
use crate::experiment;
use crate::math::Prng;
use crate::model::{extract_embeddings, read_checkpoint, train, write_checkpoint, TrainMode};
use crate::store::{bench, BenchOptions, FunnelStage, Neighbor, VectorStore};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const SEED_ENV: &str = "MVEC_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "mvec",
    version,
    about = "Matryoshka speaker embeddings: train, evaluate, search"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Experiment config (key = value with [section] headers). Built-in desk-scale defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its verification trial list.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Feature file to write (MVFT).
        #[arg(long)]
        out: PathBuf,
        /// Trial list to write (enroll<TAB>test<TAB>1|0).
        #[arg(long)]
        trials_out: PathBuf,
    },
    /// Train an encoder on the train split of a feature file.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Feature file (MVFT).
        #[arg(long)]
        data: PathBuf,
        /// `mrl` trains one head per schedule prefix, `baseline` only the full dimension.
        #[arg(long, default_value = "mrl", value_parser = ["mrl", "baseline"])]
        mode: String,
        /// Checkpoint to write (MVEC).
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch loss CSV.
        #[arg(long)]
        history_out: Option<PathBuf>,
    },
    /// Embed every utterance of a feature file.
    Extract {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint (MVEC).
        #[arg(long)]
        model: PathBuf,
        /// Feature file (MVFT).
        #[arg(long)]
        data: PathBuf,
        /// Embedding file to write (MVST layout, ids = utterance ids).
        #[arg(long)]
        out: PathBuf,
    },
    /// EER per system and prefix dimension.
    EvalEer {
        #[command(flatten)]
        config: ConfigArg,
        /// System embeddings as NAME=PATH; repeat for several systems.
        #[arg(long = "embeds", required = true, value_name = "NAME=PATH")]
        embeds: Vec<String>,
        /// Trial list.
        #[arg(long)]
        trials: PathBuf,
        /// Comma-separated prefix dims [default: schedule dims from the config, 4,8,16,32,64]
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        /// Report CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k search for every row of a query file.
    Search {
        #[command(flatten)]
        config: ConfigArg,
        /// Store file (MVST).
        #[arg(long)]
        store: PathBuf,
        /// Query vectors (MVST layout).
        #[arg(long)]
        queries: PathBuf,
        /// Prefix dimension searched.
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Coarse-to-fine stages DIM:CANDIDATES,...; the last dim must be the store dim. Replaces --dim.
        #[arg(long, value_delimiter = ',', value_name = "DIM:COUNT")]
        funnel: Vec<String>,
        /// Result CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Storage and query-latency table per prefix dimension.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        /// Store file (MVST) to benchmark.
        #[arg(
            long,
            conflicts_with = "synthetic_count",
            required_unless_present = "synthetic_count"
        )]
        store: Option<PathBuf>,
        /// Benchmark an in-memory store of this many random unit vectors instead.
        #[arg(long)]
        synthetic_count: Option<usize>,
        /// Dimension of the synthetic store.
        #[arg(long, default_value_t = 64)]
        synthetic_dim: usize,
        /// Comma-separated prefix dims [default: 64,32,16,8,4 from the config]
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        /// Neighbors per query [default: 10 from the config]
        #[arg(long)]
        k: Option<usize>,
        /// Timed queries, taken from the stored rows [default: 200 from the config]
        #[arg(long)]
        queries: Option<usize>,
        /// Row count used for the storage column [default: the store size]
        #[arg(long)]
        storage_count: Option<u64>,
        /// Report CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment in one process: data, both trainings, EER sweep.
    Experiment {
        #[command(flatten)]
        config: ConfigArg,
        /// Report CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved config in normalized form.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArg,
    },
}

/// Error surfaced to the user: usage problems versus runtime failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(MvecError),
}

impl From<MvecError> for CliError {
    fn from(e: MvecError) -> Self {
        CliError::Runtime(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(MvecError::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// The single-line message printed on failure.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Runtime(e) => (e.kind(), e.to_string()),
        };
        format!("error: kind={kind} message={}", msg.replace('\n', " "))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        CliError::Runtime(MvecError::Io(io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        CliError::Runtime(MvecError::Io(io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

fn output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// Reads the config (or defaults), applies `MVEC_SEED`, and logs the result.
pub fn load_config(arg: &ConfigArg) -> CliResult<ExperimentConfig> {
    let mut cfg = match &arg.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Runtime(MvecError::Io(io::Error::new(
                    e.kind(),
                    format!("{}: {e}", path.display()),
                )))
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{seed}' is not a u64")))?;
        cfg.set_seed(seed);
    }
    info!("seed {}", cfg.seed);
    info!(
        "config: {}",
        cfg.to_text()
            .lines()
            .filter(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join("; ")
    );
    Ok(cfg)
}

fn parse_stage(s: &str) -> CliResult<FunnelStage> {
    let bad = || CliError::Usage(format!("funnel stage '{s}' is not DIM:COUNT"));
    let (d, c) = s.split_once(':').ok_or_else(bad)?;
    Ok(FunnelStage {
        dim: d.trim().parse().map_err(|_| bad())?,
        candidates: c.trim().parse().map_err(|_| bad())?,
    })
}

fn parse_system(s: &str) -> CliResult<(String, PathBuf)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(CliError::Usage(format!(
            "--embeds expects NAME=PATH, got '{s}'"
        ))),
    }
}

fn write_neighbors<W: Write>(mut w: W, results: &[(u64, Vec<Neighbor>)]) -> CliResult<()> {
    writeln!(w, "query_id,rank,id,distance")?;
    for (qid, neighbors) in results {
        for (rank, n) in neighbors.iter().enumerate() {
            writeln!(w, "{qid},{},{},{:.6}", rank + 1, n.id, n.distance)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Store of `count` random unit vectors, ids `0..count`.
pub fn synthetic_store(count: usize, dim: usize, seed: u64) -> crate::Result<VectorStore> {
    let mut rng = Prng::for_purpose(seed, "bench/vectors");
    let mut store = VectorStore::new(dim)?;
    store.reserve(count);
    let mut v = vec![0.0; dim];
    for id in 0..count as u64 {
        v.iter_mut().for_each(|x| *x = rng.normal());
        store.ingest(id, &v)?;
    }
    Ok(store)
}

pub fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData {
            config,
            out,
            trials_out,
        } => {
            let cfg = load_config(&config)?;
            let corpus = generate(&cfg.data)?;
            let trials = build_trials(
                &corpus,
                cfg.eval.targets_per_speaker,
                cfg.eval.nontargets_per_speaker,
                cfg.seed,
            )?;
            write_features(&corpus, create(&out)?)?;
            trials.write(create(&trials_out)?)?;
            info!(
                "wrote {} utterances to {} and {} trials to {}",
                corpus.utterances.len(),
                out.display(),
                trials.len(),
                trials_out.display()
            );
        }
        Command::Train {
            config,
            data,
            mode,
            out,
            history_out,
        } => {
            let cfg = load_config(&config)?;
            let mode = TrainMode::parse(&mode).map_err(|e| CliError::Usage(e.to_string()))?;
            let corpus = read_features(open(&data)?)?;
            let model = train(&corpus, &cfg.train, mode)?;
            write_checkpoint(&model.encoder, &model.heads, create(&out)?)?;
            if let Some(path) = history_out {
                let mut w = create(&path)?;
                writeln!(w, "epoch,loss")?;
                for (i, l) in model.history.iter().enumerate() {
                    writeln!(w, "{i},{l:.9}")?;
                }
                w.flush()?;
            }
            info!(
                "{} training done, final loss {:.6}, checkpoint {}",
                mode.as_str(),
                model.history.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Extract {
            config,
            model,
            data,
            out,
        } => {
            load_config(&config)?;
            let (encoder, _) = read_checkpoint(open(&model)?)?;
            let corpus = read_features(open(&data)?)?;
            let embeddings = extract_embeddings(&encoder, &corpus)?;
            let mut store = VectorStore::new(encoder.embed_dim())?;
            store.reserve(embeddings.len());
            for (u, e) in corpus.utterances.iter().zip(&embeddings) {
                store.ingest(u.id, e)?;
            }
            store.write(create(&out)?)?;
            info!(
                "wrote {} embeddings of dim {} to {}",
                store.len(),
                store.dim(),
                out.display()
            );
        }
        Command::EvalEer {
            config,
            embeds,
            trials,
            dims,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dims = if dims.is_empty() {
                cfg.eval_dims()
            } else {
                dims
            };
            let trials = TrialList::read(open(&trials)?)?;
            let mut systems = Vec::with_capacity(embeds.len());
            for spec in &embeds {
                let (name, path) = parse_system(spec)?;
                let store = VectorStore::read(open(&path)?)?;
                let map: HashMap<u64, Vec<f64>> = store.rows_f64().collect();
                systems.push((name, map));
            }
            let report = dimension_sweep(&systems, &trials, &dims)?;
            report.write_csv(output(&out)?)?;
        }
        Command::Search {
            config,
            store,
            queries,
            dim,
            k,
            funnel,
            out,
        } => {
            load_config(&config)?;
            let store = VectorStore::read(open(&store)?)?;
            let queries = VectorStore::read(open(&queries)?)?;
            let stages = funnel
                .iter()
                .map(|s| parse_stage(s))
                .collect::<CliResult<Vec<_>>>()?;
            let mut results = Vec::with_capacity(queries.len());
            for (qid, q) in queries.rows_f64() {
                let hits = if stages.is_empty() {
                    store.search(&q, dim, k)?
                } else {
                    store.funnel_search(&q, &stages, k)?
                };
                results.push((qid, hits));
            }
            write_neighbors(output(&out)?, &results)?;
        }
        Command::Bench {
            config,
            store,
            synthetic_count,
            synthetic_dim,
            dims,
            k,
            queries,
            storage_count,
            out,
        } => {
            let cfg = load_config(&config)?;
            let store = match (store, synthetic_count) {
                (Some(path), None) => VectorStore::read(open(&path)?)?,
                (None, Some(n)) => synthetic_store(n, synthetic_dim, cfg.seed)?,
                _ => {
                    return Err(CliError::Usage(
                        "give exactly one of --store, --synthetic-count".into(),
                    ))
                }
            };
            let dims = if dims.is_empty() {
                cfg.bench
                    .dims
                    .iter()
                    .copied()
                    .filter(|&m| m <= store.dim())
                    .collect()
            } else {
                dims
            };
            let n_queries = queries.unwrap_or(cfg.bench.queries).min(store.len());
            let query_rows: Vec<Vec<f64>> =
                store.rows_f64().take(n_queries).map(|(_, v)| v).collect();
            let opts = BenchOptions {
                k: k.unwrap_or(cfg.bench.k),
                warmup_rounds: cfg.bench.warmup_rounds,
                storage_count,
            };
            let report = bench(&store, &dims, &query_rows, opts)?;
            report.write_csv(output(&out)?)?;
        }
        Command::Experiment { config, out } => {
            let cfg = load_config(&config)?;
            let outcome = experiment::run(&cfg)?;
            outcome.report.write_csv(output(&out)?)?;
        }
        Command::ShowConfig { config } => {
            let cfg = load_config(&config)?;
            print!("{}", cfg.to_text());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let msg = text
                .lines()
                .take_while(|l| !l.trim_start().starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            eprintln!(
                "{}",
                CliError::Usage(msg.trim_start_matches("error: ").to_string()).line()
            );
            return EXIT_USAGE;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    run_with_args(std::env::args_os())
}
