//! `ocelstore`: import, query, mine and benchmark object-centric event logs.
//!
//! Results go to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 usage or configuration error, 2 bad input data, 3 I/O or store error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ocelstore::gen::GenSpec;
use ocelstore::io::Format;
use ocelstore::mining::{self, render, TypeSelection};
use ocelstore::store::{Store, StoreOptions};
use ocelstore::{bench, Error, MemoryBudget};

#[derive(Parser)]
#[command(name = "ocelstore", version, about = "Disk-backed storage and process mining for OCEL 1.0 logs")]
struct Cli {
    /// More log output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StoreArg {
    /// Store directory.
    #[arg(long, env = "OCELSTORE_DB")]
    db: PathBuf,
}

#[derive(Args)]
struct MemoryArgs {
    /// Memory budget for aggregation, e.g. 512KiB, 64MiB, 2GiB.
    #[arg(long, default_value = "64MiB", value_parser = parse_size)]
    budget: u64,

    /// Directory for spill files. Defaults to the system temp directory.
    #[arg(long)]
    spill_dir: Option<PathBuf>,
}

impl MemoryArgs {
    fn budget(&self) -> ocelstore::Result<MemoryBudget> {
        MemoryBudget::new(self.budget)
    }

    fn spill_dir(&self) -> PathBuf {
        self.spill_dir.clone().unwrap_or_else(std::env::temp_dir)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Json,
    Xml,
    Auto,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Xml,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Json,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsKind {
    Activities,
    ObjectTypes,
    Times,
}

#[derive(Subcommand)]
enum Command {
    /// Load a JSON-OCEL or XML-OCEL file (optionally gzipped) into a new store.
    Import {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        format: InputFormat,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Write the stored log as an OCEL document ("-" for stdout).
    Export {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: OutputFormat,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Directly-follows graphs per object type.
    Dfg {
        /// Object type to include; repeatable.
        #[arg(long = "object-type", required_unless_present = "all", conflicts_with = "all")]
        object_types: Vec<String>,
        /// Include every object type.
        #[arg(long)]
        all: bool,
        #[arg(long, value_enum, default_value = "json")]
        format: GraphFormat,
        #[command(flatten)]
        store: StoreArg,
        #[command(flatten)]
        memory: MemoryArgs,
    },
    /// Activity, object-type or time-between-activities statistics.
    Stats {
        #[arg(value_enum)]
        kind: StatsKind,
        #[arg(long, value_enum, default_value = "json")]
        format: TableFormat,
        #[command(flatten)]
        store: StoreArg,
        #[command(flatten)]
        memory: MemoryArgs,
    },
    /// Activities of one object, in order.
    Lifecycle {
        object_id: String,
        /// Print event ids and timestamps too.
        #[arg(long)]
        steps: bool,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Check segments and indexes for consistency.
    Audit {
        #[command(flatten)]
        store: StoreArg,
    },
    /// Generate logs of the given sizes and time ingest and multi-DFG discovery.
    Bench {
        /// Event counts, ascending.
        #[arg(long, value_delimiter = ',', default_value = "10000,100000")]
        sizes: Vec<u64>,
        /// Memory budget for the multi-DFG step.
        #[arg(long, default_value = "64MiB", value_parser = parse_size)]
        budget: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Scratch directory. Defaults to the system temp directory.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
}

/// Parses `123`, `512KiB`, `64MiB`, `2GiB` (also `K`, `KB`, `M`, `MB`, ...
/// as binary units).
fn parse_size(text: &str) -> Result<u64, String> {
    let text = text.trim();
    let split = text.find(|c: char| !c.is_ascii_digit()).unwrap_or(text.len());
    let (digits, unit) = text.split_at(split);
    let n: u64 = digits.parse().map_err(|_| format!("invalid size {text:?}"))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        other => return Err(format!("unknown size unit {other:?}; use KiB, MiB or GiB")),
    };
    n.checked_mul(1 << shift).ok_or_else(|| format!("size {text:?} is too large"))
}

fn exit_code(err: &Error) -> u8 {
    if err.is_data_error() {
        2
    } else if matches!(err, Error::Config(_)) {
        1
    } else {
        3
    }
}

fn open_output(path: &Path) -> io::Result<Box<dyn Write>> {
    if path == Path::new("-") {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }
}

fn print(text: &str) -> ocelstore::Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn run(command: Command) -> ocelstore::Result<()> {
    match command {
        Command::Import { file, format, store } => {
            let format = match format {
                InputFormat::Json => Some(Format::Json),
                InputFormat::Xml => Some(Format::Xml),
                InputFormat::Auto => None,
            };
            let stream = ocelstore::io::parse_path(&file, format)?;
            let stats = Store::create(&store.db, StoreOptions::default())?.ingest(stream)?;
            print(&format!("{stats}\n"))
        }
        Command::Export { file, format, store } => {
            let store = Store::open(&store.db)?;
            let format = match format {
                OutputFormat::Json => Format::Json,
                OutputFormat::Xml => Format::Xml,
            };
            let mut out = open_output(&file)?;
            ocelstore::io::serialize(store.export(), &mut out, format)?;
            out.flush()?;
            Ok(())
        }
        Command::Dfg {
            object_types,
            all,
            format,
            store,
            memory,
        } => {
            let store = Store::open(&store.db)?;
            let selection = if all {
                TypeSelection::All
            } else {
                TypeSelection::only(object_types)
            };
            let m = mining::mdfg(&store, &selection, &memory.budget()?, &memory.spill_dir())?;
            print(&match format {
                GraphFormat::Json => render::mdfg_json(&m),
                GraphFormat::Dot => render::mdfg_dot(&m),
            })
        }
        Command::Stats {
            kind,
            format,
            store,
            memory,
        } => {
            let store = Store::open(&store.db)?;
            let text = match kind {
                StatsKind::Activities => {
                    let s = mining::activity_stats(&store, &memory.budget()?, &memory.spill_dir())?;
                    match format {
                        TableFormat::Json => render::activity_stats_json(&s),
                        TableFormat::Csv => render::activity_stats_csv(&s),
                    }
                }
                StatsKind::ObjectTypes => {
                    let s = mining::object_type_stats(&store)?;
                    match format {
                        TableFormat::Json => render::object_type_stats_json(&s),
                        TableFormat::Csv => render::object_type_stats_csv(&s),
                    }
                }
                StatsKind::Times => {
                    let s = mining::time_between_activities(&store, &memory.budget()?, &memory.spill_dir())?;
                    match format {
                        TableFormat::Json => render::times_json(&s),
                        TableFormat::Csv => render::times_csv(&s),
                    }
                }
            };
            print(&text)
        }
        Command::Lifecycle { object_id, steps, store } => {
            let store = Store::open(&store.db)?;
            let text = match mining::lifecycle(&store, &object_id)? {
                None => "null\n".to_owned(),
                Some(entry) if steps => render::lifecycle_json(&entry),
                Some(entry) => {
                    let activities: Vec<&str> = entry.activities().collect();
                    format!("{}\n", serde_json::to_string(&activities).expect("strings serialize"))
                }
            };
            print(&text)
        }
        Command::Audit { store } => {
            let report = Store::open(&store.db)?.audit();
            print(&report.to_string())?;
            if report.is_healthy() {
                Ok(())
            } else {
                Err(Error::Corruption {
                    file: store.db,
                    offset: 0,
                    message: format!("audit found {} violation(s)", report.violations.len()),
                })
            }
        }
        Command::Bench {
            sizes,
            budget,
            seed,
            work_dir,
        } => {
            let template = GenSpec {
                seed,
                ..GenSpec::default()
            };
            let work_dir = work_dir.unwrap_or_else(std::env::temp_dir);
            let report = bench::run_bench(&sizes, &template, budget, &work_dir)?;
            eprint!("{}", report.to_table());
            print(&report.to_csv())?;
            match report.rows.iter().find(|r| r.error.is_some()) {
                Some(r) => Err(Error::Io(io::Error::other(format!(
                    "benchmark of {} events failed",
                    r.size
                )))),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
