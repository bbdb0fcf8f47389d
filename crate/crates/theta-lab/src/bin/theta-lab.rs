use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use theta_lab::cli::{
    batch, identity_scenario, reports_csv, reports_json, run_file, run_scenario, summary_csv, summary_table, worst, write_entry,
    Entry, Format, Overrides, Status,
};

#[derive(Parser)]
#[command(name = "theta-lab", version, about = "Theta functions, pole systems and soliton residual checks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threshold for every upper-bound residual not named in the scenario.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Directory for reports and artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (falls back to THETA_LAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Theta quasi-periodicity and addition-formula battery.
    CheckIdentities {
        /// Genus; repeat for several.
        #[arg(long = "g", default_values_t = [1usize, 2, 3])]
        g: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Calogero-Moser tools.
    Cm {
        #[command(subcommand)]
        action: CmAction,
    },
    /// Run the scenarios of one file.
    Run {
        /// Scenario file.
        file: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every scenario file of a directory.
    Batch {
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum CmAction {
    /// Integrate a pole-system scenario and report isospectrality.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn threads(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| std::env::var("THETA_LAB_THREADS").ok().and_then(|v| v.trim().parse().ok()))
}

fn format_of(f: FormatArg) -> Format {
    match f {
        FormatArg::Json => Format::Json,
        FormatArg::Csv => Format::Csv,
    }
}

// A closed pipe on stdout is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_reports(entries: &[Entry], format: Format) {
    match format {
        Format::Json => emit(&format!("{}\n", reports_json(entries))),
        Format::Csv => emit(&reports_csv(entries)),
    }
}

fn report_errors(entries: &[Entry]) {
    for e in entries {
        if let Err(m) = &e.result {
            eprintln!("error: {}: {m}", e.label);
        }
    }
}

// Scenario `outputs.dir` applies when `--out` is absent.
fn out_dir(flag: &Option<PathBuf>, e: &Entry) -> Option<PathBuf> {
    if let Some(d) = flag {
        return Some(d.clone());
    }
    let o = e.result.as_ref().ok()?;
    o.report.provenance.scenario.outputs.dir.as_ref().map(PathBuf::from)
}

fn persist(entries: &[Entry], common: &Common) -> Result<(), String> {
    let format = format_of(common.format);
    for e in entries {
        if let Some(dir) = out_dir(&common.out, e) {
            write_entry(&dir, e, format).map_err(|err| err.to_string())?;
        }
    }
    Ok(())
}

fn finish(entries: &[Entry], common: &Common) -> ExitCode {
    report_errors(entries);
    print_reports(entries, format_of(common.format));
    if let Err(m) = persist(entries, common) {
        eprintln!("error: {m}");
        return ExitCode::from(Status::Error.code());
    }
    ExitCode::from(worst(entries).code())
}

fn run_path(path: &Path, common: &Common, ov: &Overrides) -> ExitCode {
    let entries = run_file(path, ov);
    finish(&entries, common)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.common.clone();
    if let Some(n) = threads(common.threads) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(Status::Error.code());
        }
    }
    let ov = Overrides {
        seed: common.seed,
        tol: common.tol,
    };
    match cli.command {
        Command::CheckIdentities { g, samples } => {
            let mut sc = identity_scenario(g, samples, 0);
            ov.apply(&mut sc);
            let result = sc.validate().and_then(|_| run_scenario(&sc)).map_err(|e| e.to_string());
            let entries = vec![Entry {
                file: PathBuf::new(),
                label: sc.label(),
                result,
            }];
            finish(&entries, &common)
        }
        Command::Cm {
            action: CmAction::Simulate { config },
        } => run_path(&config, &common, &ov),
        Command::Run { file, config } => match file.or(config) {
            Some(p) => run_path(&p, &common, &ov),
            None => {
                eprintln!("error: run needs a scenario file or --config");
                ExitCode::from(Status::Error.code())
            }
        },
        Command::Batch { dir } => {
            let entries = match batch(&dir, &ov) {
                Ok(e) => e,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(Status::Error.code());
                }
            };
            emit(&summary_table(&entries));
            if let Some(out) = &common.out {
                let format = format_of(common.format);
                let write = || -> theta_lab::Result<()> {
                    std::fs::create_dir_all(out)?;
                    std::fs::write(out.join("summary.csv"), summary_csv(&entries))?;
                    for e in &entries {
                        write_entry(out, e, format)?;
                    }
                    Ok(())
                };
                if let Err(e) = write() {
                    eprintln!("error: {e}");
                    return ExitCode::from(Status::Error.code());
                }
            }
            ExitCode::from(worst(&entries).code())
        }
    }
}
