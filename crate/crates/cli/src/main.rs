use clap::{Parser, Subcommand};
use labelloop::deid::SiteSecret;
use labelloop::ingest::{serve_tcp, FileStore, Hub};
use labelloop::registry::{verify_audit_file, AuditVerdict};
use labelloop::sim::{run_scenario_with, summary_rows, ScenarioConfig};
use labelloop::to_canonical;
use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

const EXIT_INTERNAL: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_AUDIT: u8 = 3;
const EXIT_ASSERTION: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "labelloop", version, about = "Label feedback and drift monitoring hub")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its metrics bundle.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long, env = "LABELLOOP_SEED")]
        seed: Option<u64>,
    },
    /// Ingest spooled envelopes and/or serve the framed TCP protocol.
    Hub {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        spool: Option<PathBuf>,
        /// Envelope store directory.
        #[arg(long, default_value = "hub-store")]
        store: PathBuf,
    },
    /// Verify an audit log against its hash chain and head sidecar.
    VerifyAudit { log: PathBuf },
    /// Summarize a metrics bundle per (site, algorithm, version).
    Report {
        bundle: PathBuf,
        /// Where to write summary.csv; defaults to the bundle directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

fn io_fail(what: &Path, e: io::Error) -> Failure {
    fail(EXIT_IO, format!("{}: {e}", what.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { scenario, out, seed } => simulate(&scenario, &out, seed),
        Command::Hub { listen, spool, store } => hub(listen.as_deref(), spool.as_deref(), &store),
        Command::VerifyAudit { log } => verify_audit(&log),
        Command::Report { bundle, out } => report(&bundle, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("labelloop: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn simulate(scenario: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let text = fs::read_to_string(scenario).map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", scenario.display())))?;
    let mut cfg = ScenarioConfig::from_text(&text).map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", scenario.display())))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let secret = SiteSecret::from_env().map_err(|e| fail(EXIT_INPUT, format!("LABELLOOP_SITE_SECRET: {e}")))?;
    let bundle = run_scenario_with(&cfg, secret.as_ref()).map_err(|e| fail(EXIT_INTERNAL, e.to_string()))?;
    bundle.write(out).map_err(|e| io_fail(out, e))?;
    let failed: Vec<_> = bundle.assertions.iter().filter(|a| !a.passed).collect();
    for a in &bundle.assertions {
        eprintln!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    if !failed.is_empty() {
        return Err(fail(EXIT_ASSERTION, format!("{} scenario assertion(s) failed", failed.len())));
    }
    Ok(())
}

fn hub(listen: Option<&str>, spool: Option<&Path>, store: &Path) -> Result<(), Failure> {
    if listen.is_none() && spool.is_none() {
        return Err(fail(EXIT_INPUT, "hub needs --listen and/or --spool"));
    }
    let store = FileStore::open(store).map_err(|e| fail(EXIT_IO, format!("{}: {e}", store.display())))?;
    let hub = Arc::new(Hub::new(Arc::new(store)));
    if let Some(dir) = spool {
        let results = hub.ingest_spool(dir).map_err(|e| fail(EXIT_IO, format!("{}: {e}", dir.display())))?;
        let mut stdout = io::stdout().lock();
        for r in results {
            match r {
                Ok(ack) => writeln!(stdout, "{}", to_canonical(&ack).expect("acks serialize")),
                Err(e) => {
                    eprintln!("spool frame rejected: {e}");
                    Ok(())
                }
            }
            .map_err(|e| fail(EXIT_IO, format!("stdout: {e}")))?;
        }
    }
    if let Some(addr) = listen {
        let listener = TcpListener::bind(addr).map_err(|e| fail(EXIT_IO, format!("{addr}: {e}")))?;
        eprintln!("listening on {}", listener.local_addr().map_err(|e| fail(EXIT_IO, e.to_string()))?);
        serve_tcp(listener, hub, Arc::new(AtomicBool::new(false))).map_err(|e| fail(EXIT_IO, e.to_string()))?;
    }
    Ok(())
}

fn verify_audit(log: &Path) -> Result<(), Failure> {
    match verify_audit_file(log).map_err(|e| io_fail(log, e))? {
        AuditVerdict::Ok { entries } => {
            println!("OK {entries}");
            Ok(())
        }
        AuditVerdict::Broken { seq } => Err(fail(EXIT_AUDIT, format!("broken at seq {seq}"))),
    }
}

fn report(bundle: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let read = |name: &str| {
        let p = bundle.join(name);
        fs::read_to_string(&p).map_err(|e| fail(EXIT_INPUT, format!("incomplete bundle, {}: {e}", p.display())))
    };
    let (ledger, alerts, delays) = (read("ledger.csv")?, read("alerts.csv")?, read("delays.csv")?);
    let summary =
        summary_rows(&ledger, &alerts, &delays).map_err(|e| fail(EXIT_INPUT, format!("malformed bundle: {e}")))?;
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| bundle.join("summary.csv"));
    fs::write(&target, &summary).map_err(|e| io_fail(&target, e))?;

    let rows: Vec<Vec<&str>> = summary.lines().map(|l| l.split(',').collect()).collect();
    let widths: Vec<usize> =
        (0..rows[0].len()).map(|c| rows.iter().map(|r| r.get(c).map_or(0, |s| s.len())).max().unwrap_or(0)).collect();
    let mut stdout = io::stdout().lock();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        writeln!(stdout, "{}", line.join("  ").trim_end()).map_err(|e| fail(EXIT_IO, format!("stdout: {e}")))?;
    }
    Ok(())
}
