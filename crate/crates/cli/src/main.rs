mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use subformer::config::CONFIG_KEYS;

use commands::CliError;

fn config_help() -> String {
    let mut s = String::from("Config keys (JSON file sections `model` and `train`; override with --set key=value):\n");
    for (key, row) in CONFIG_KEYS {
        s.push_str(&format!("  {key:<28} {row}\n"));
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "subformer", version, about = "Junction-tree graph transformer: train, evaluate and diagnose")]
#[command(after_long_help = config_help(), after_help = config_help())]
struct Cli {
    /// Worker threads for parallel sections (1 keeps runs strictly sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// One molecule: a SMILES string or a record of a corpus file.
#[derive(Args, Debug, Clone)]
pub struct MoleculeArgs {
    #[arg(long, conflicts_with = "data")]
    pub smiles: Option<String>,
    /// Corpus file (JSON lines with a header line).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Record id within --data (default: the first record).
    #[arg(long, requires = "data")]
    pub id: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a SMILES string or validate a corpus file.
    Parse {
        #[arg(long, conflicts_with = "data")]
        smiles: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the normalized corpus (explicit graphs, vocabulary in the header).
        #[arg(long, requires = "data")]
        out: Option<PathBuf>,
    },
    /// Junction-tree decomposition as JSON (and optionally DOT).
    Decompose {
        #[command(flatten)]
        mol: MoleculeArgs,
        /// Decompose every record of --data, one JSON line each.
        #[arg(long, requires = "data")]
        all: bool,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.json, log.csv, config.json and splits.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config override `key=value`, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// mae, roc-auc or ap (default: mae for regression, roc-auc for classification).
        #[arg(long)]
        metric: Option<String>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Energy profiles and Jacobian sensitivity maps for one molecule.
    Diagnose {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        mol: MoleculeArgs,
        /// Dirichlet energy of the encoder's tree tokens per layer.
        #[arg(long)]
        energy: bool,
        /// Also profile a weight-free GCN stack of this depth on the atom embeddings.
        #[arg(long, requires = "energy")]
        gcn_layers: Option<usize>,
        /// Jacobian map of the reference atom's final representation.
        #[arg(long)]
        jacobian: bool,
        /// Reference atom (default: the peripheral node).
        #[arg(long)]
        reference: Option<usize>,
        #[arg(long, default_value_t = subformer::diagnostics::SQUASH_THRESHOLD)]
        threshold: f64,
        /// Probe only the first K message-passing layers instead of the full model.
        #[arg(long)]
        mp_only: Option<usize>,
        /// Directory for CSV outputs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention maps (JSON) and CLS-colored DOT graphs.
    Attention {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        mol: MoleculeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// 1-WL and junction-tree WL verdicts for graph pairs.
    WlTest {
        /// JSON lines `{"id", "a", "b"}`; molecules as SMILES or `{"nodes", "edges"}`.
        #[arg(long)]
        pairs: PathBuf,
        /// Fold bond labels into the neighbor multisets.
        #[arg(long)]
        edge_labels: bool,
    },
    /// Histogram of hop distances from each graph's peripheral node.
    Hops {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A trained checkpoint, or a config whose model is built with random weights.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match cli.command {
        Command::Parse { smiles, data, out } => commands::parse(smiles, data, out),
        Command::Decompose { mol, all, json, dot } => commands::decompose(&mol, all, json, dot),
        Command::Train { config, data, out, overrides } => commands::train(&config, &data, &out, &overrides),
        Command::Eval { checkpoint, data, metric, batch_size } => commands::eval(&checkpoint, &data, metric, batch_size),
        Command::Diagnose { source, mol, energy, gcn_layers, jacobian, reference, threshold, mp_only, out } => {
            commands::diagnose(&source, &mol, commands::DiagnoseFlags { energy, gcn_layers, jacobian, reference, threshold, mp_only }, out)
        }
        Command::Attention { source, mol, out } => commands::attention(&source, &mol, &out),
        Command::WlTest { pairs, edge_labels } => commands::wl_test(&pairs, edge_labels),
        Command::Hops { data, out } => commands::hops(&data, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            commands::report(&CliError::Usage(e.to_string().trim_end().to_string()));
            return ExitCode::from(2);
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            commands::report(&e);
            ExitCode::FAILURE
        }
    }
}
