use std::fs;
use std::io::{self, BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use spb_core::config::ExperimentConfig;
use spb_core::engine::RunOutput;
use spb_core::metrics::{compare, run_experiment, ExperimentReport, Scenario};
use spb_core::session::Session;
use spb_core::trade::{Protocol, TradeResult};

const EXIT_PROTOCOL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "spb", version, about = "Energy-trading market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its reports.
    Run(RunArgs),
    /// Compare two metrics.json reports as CSV.
    Compare { a: PathBuf, b: PathBuf },
    /// Run both protocols for each value of one config key.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value = "reliable")]
        scenario: ScenarioArg,
    },
    /// Commit to pay in the session.
    Ctp {
        tx_addr: String,
        tx_amount: String,
        tx_energy: String,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Submit a meter receipt in the session.
    Erc {
        ctp_id: String,
        energy_amount: String,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Seal the next block in the session.
    Mine {
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Advance session time.
    Advance {
        ms: String,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Request a refund of an expired CTP in the session.
    Timeout {
        ctp_id: String,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Show a CTP's status in the session.
    Status {
        ctp_id: String,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// List session balances.
    Accounts {
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Run session commands from a script or standard input.
    Session {
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "reliable")]
    scenario: ScenarioArg,
    #[arg(long, default_value = "both")]
    protocol: ProtocolArg,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trades: Option<usize>,
    /// Exit with status 3 unless every structural and invariant check holds.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct SessionArgs {
    /// Command log replayed before, and appended after, each command.
    #[arg(long, default_value = "spb-session.log")]
    session: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Reliable,
    Unreliable,
    Batch,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Reliable => Scenario::Reliable,
            ScenarioArg::Unreliable => Scenario::Unreliable,
            ScenarioArg::Batch => Scenario::Batch,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Spb,
    Baseline,
    Both,
}

enum Failure {
    Config(anyhow::Error),
    Protocol(anyhow::Error),
    Check(Vec<String>),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Protocol(e)
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Config(e.into())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare { a, b } => compare_files(&a, &b),
        Command::Sweep {
            config,
            key,
            values,
            scenario,
        } => sweep(config.as_deref(), &key, &values, scenario.into()),
        Command::Ctp {
            tx_addr,
            tx_amount,
            tx_energy,
            session,
        } => session_command(&session, &format!("ctp {tx_addr} {tx_amount} {tx_energy}")),
        Command::Erc {
            ctp_id,
            energy_amount,
            session,
        } => session_command(&session, &format!("erc {ctp_id} {energy_amount}")),
        Command::Mine { session } => session_command(&session, "mine"),
        Command::Advance { ms, session } => session_command(&session, &format!("advance {ms}")),
        Command::Timeout { ctp_id, session } => session_command(&session, &format!("timeout {ctp_id}")),
        Command::Status { ctp_id, session } => session_command(&session, &format!("status {ctp_id}")),
        Command::Accounts { session } => session_command(&session, "accounts"),
        Command::Session { script, config } => interactive(script.as_deref(), config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Protocol(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_PROTOCOL)
        }
        Err(Failure::Check(failures)) => {
            for f in failures {
                eprintln!("check failed: {f}");
            }
            ExitCode::from(EXIT_CHECK)
        }
    }
}

struct RunFiles {
    dir: PathBuf,
    report: ExperimentReport,
    first: RunOutput,
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trades) = args.trades {
        cfg.trades = trades;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    let scenario: Scenario = args.scenario.into();
    let protocols = match args.protocol {
        ProtocolArg::Spb => vec![Protocol::Spb],
        ProtocolArg::Baseline => vec![Protocol::Baseline],
        ProtocolArg::Both => vec![Protocol::Spb, Protocol::Baseline],
    };
    let mut runs = Vec::new();
    for p in protocols {
        let (report, first) = run_experiment(&cfg, p, scenario).map_err(|e| Failure::Protocol(e.into()))?;
        let dir = if args.protocol == ProtocolArg::Both {
            args.out.join(p.name())
        } else {
            args.out.clone()
        };
        runs.push(RunFiles { dir, report, first });
    }
    let mut failures = Vec::new();
    for r in &runs {
        write_outputs(r)?;
        let cost = r.report.per_trade_cost;
        println!(
            "{} {}: {} trades, mean delay {:.0} ms, cost {:.1}/trade, completion {:.2} min, chain {:.0} bytes",
            r.report.protocol,
            scenario.name(),
            r.report.trades,
            r.report.mean_e2e_delay_ms,
            cost,
            r.report.completion_time_min,
            r.report.chain_size_bytes
        );
        if args.check {
            failures.extend(check_report(&r.report, cfg.fee));
        }
    }
    if let [a, b] = runs.as_slice() {
        let c = compare(&a.report, &b.report).map_err(|e| Failure::Protocol(e.into()))?;
        let csv = c.to_csv();
        fs::write(args.out.join("comparison.csv"), &csv).context("writing comparison.csv")?;
        print!("{csv}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failures))
    }
}

fn write_outputs(r: &RunFiles) -> Result<(), Failure> {
    fs::create_dir_all(&r.dir).with_context(|| format!("creating {}", r.dir.display()))?;
    let json = serde_json::to_string_pretty(&r.report).context("serializing report")?;
    fs::write(r.dir.join("metrics.json"), json + "\n").context("writing metrics.json")?;
    fs::write(r.dir.join("trades.csv"), r.report.trades_csv()).context("writing trades.csv")?;
    let mut trace = String::from("trade,step,time_ms,actor,action\n");
    for s in &r.first.steps {
        trace.push_str(&s.to_string());
        trace.push('\n');
    }
    trace.push_str(&format!("# event trace digest {}\n", r.first.trace_digest));
    fs::write(r.dir.join("trace.log"), trace).context("writing trace.log")?;
    fs::write(r.dir.join("chain.jsonl"), r.first.chain.export_jsonl()).context("writing chain.jsonl")?;
    Ok(())
}

fn check_report(rep: &ExperimentReport, fee: u64) -> Vec<String> {
    let per_trade_txs = match rep.protocol {
        Protocol::Spb => 1,
        Protocol::Baseline => 3,
    };
    let mut failures = Vec::new();
    for (i, run) in rep.runs.iter().enumerate() {
        let tag = format!("{} replicate {i}", rep.protocol);
        if !run.chain_valid {
            failures.push(format!("{tag}: chain does not validate"));
        }
        failures.extend(run.violations.iter().map(|v| format!("{tag}: {v}")));
        if run.trades != rep.trades {
            failures.push(format!("{tag}: {} of {} trades finished", run.trades, rep.trades));
        }
        for o in run.outcomes.iter().filter(|o| o.result == TradeResult::SettledPaid) {
            if o.onchain_tx_count != per_trade_txs || o.consumer_fee_paid != per_trade_txs as u64 * fee {
                failures.push(format!(
                    "{tag}: trade {} used {} transactions and {} in fees",
                    o.trade, o.onchain_tx_count, o.consumer_fee_paid
                ));
            }
        }
    }
    failures
}

fn read_report(path: &Path) -> Result<ExperimentReport, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Config)
}

fn compare_files(a: &Path, b: &Path) -> Result<(), Failure> {
    let (a, b) = (read_report(a)?, read_report(b)?);
    let c = compare(&a, &b).map_err(|e| Failure::Protocol(e.into()))?;
    print!("{}", c.to_csv());
    Ok(())
}

fn sweep(config: Option<&Path>, key: &str, values: &[String], scenario: Scenario) -> Result<(), Failure> {
    let base = load_config(config)?;
    println!("{key},throughput_ratio,delay_reduction_pct,size_ratio,cost_ratio");
    for v in values {
        let mut cfg = base.clone();
        cfg.set(key, v).map_err(|e| {
            Failure::Config(anyhow::anyhow!(
                "cannot set {key} = {v}: {}",
                e.unwrap_or_else(|| "unknown key".into())
            ))
        })?;
        cfg.validate().map_err(|e| Failure::Config(e.into()))?;
        let (s, _) = run_experiment(&cfg, Protocol::Spb, scenario).map_err(|e| Failure::Protocol(e.into()))?;
        let (b, _) = run_experiment(&cfg, Protocol::Baseline, scenario).map_err(|e| Failure::Protocol(e.into()))?;
        let c = compare(&s, &b).map_err(|e| Failure::Protocol(e.into()))?;
        println!(
            "{v},{:.4},{:.2},{:.4},{:.4}",
            c.throughput_ratio, c.delay_reduction_pct, c.size_ratio, c.cost_ratio
        );
    }
    Ok(())
}

fn replay(args: &SessionArgs) -> Result<Session, Failure> {
    let cfg = load_config(args.config.as_deref())?;
    let mut s = Session::new(&cfg).map_err(|e| Failure::Protocol(e.into()))?;
    if args.session.exists() {
        let log = fs::read_to_string(&args.session).with_context(|| format!("reading {}", args.session.display()))?;
        for (i, line) in log.lines().enumerate() {
            s.execute(line).map_err(|e| {
                Failure::Protocol(anyhow::anyhow!(
                    "{}:{}: replay failed: error[{}]: {e}",
                    args.session.display(),
                    i + 1,
                    e.code()
                ))
            })?;
        }
    }
    Ok(s)
}

fn session_command(args: &SessionArgs, line: &str) -> Result<(), Failure> {
    let mut s = replay(args)?;
    match s.execute(line) {
        Ok(out) => {
            if let Some(out) = out {
                println!("{out}");
            }
            if line == "accounts" || line.starts_with("status ") {
                return Ok(());
            }
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&args.session)
                .with_context(|| format!("opening {}", args.session.display()))?;
            writeln!(f, "{line}").context("appending to session log")?;
            Ok(())
        }
        Err(e) => Err(Failure::Protocol(anyhow::anyhow!("error[{}]: {e}", e.code()))),
    }
}

fn interactive(script: Option<&Path>, config: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let mut s = Session::new(&cfg).map_err(|e| Failure::Protocol(e.into()))?;
    let input: Box<dyn BufRead> = match script {
        Some(p) => Box::new(io::BufReader::new(
            fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(io::BufReader::new(io::stdin())),
    };
    let mut failed = false;
    for line in input.lines() {
        let line = line.context("reading input")?;
        match s.execute(&line) {
            Ok(Some(out)) => println!("{out}"),
            Ok(None) => {}
            Err(e) => {
                failed = true;
                println!("error[{}]: {e}", e.code());
            }
        }
    }
    if failed && script.is_some() {
        return Err(Failure::Protocol(anyhow::anyhow!("script had failing commands")));
    }
    Ok(())
}
