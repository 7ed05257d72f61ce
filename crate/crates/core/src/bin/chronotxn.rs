use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use chronotxn::checker::write_jsonl;
use chronotxn::run::{run, RunConfig, WorkloadKind};
use chronotxn::sim::Scenario;
use chronotxn::store::OldVersionPolicy;
use chronotxn::txn::{Mutations, TxnMode};

#[derive(Parser, Debug)]
#[command(version, about = "Simulate a clock-ordered transactional store and check its history")]
struct Args {
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulated time during which clients start programs.
    #[arg(long, default_value_t = 200)]
    duration_ms: u64,
    /// strict-ser | ser | strict-si | si
    #[arg(long, default_value = "strict-ser")]
    mode: TxnMode,
    /// single | multi
    #[arg(long, default_value = "multi")]
    versioning: String,
    /// block | abort | truncate
    #[arg(long, default_value = "truncate")]
    oldver_policy: String,
    /// Old-version memory per node, in bytes.
    #[arg(long)]
    oldver_budget: Option<usize>,
    /// ycsb-lite | tpcc-lite | counterexample | adversarial | script:<path>
    #[arg(long, default_value = "ycsb-lite")]
    workload: WorkloadKind,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    #[arg(long, default_value_t = 4)]
    scan_len: usize,
    #[arg(long, default_value_t = 64)]
    keys: usize,
    #[arg(long, default_value_t = 4)]
    clients: usize,
    /// Programs to issue before stopping.
    #[arg(long, default_value_t = 300)]
    programs: u64,
    #[arg(long, default_value_t = 10)]
    lease_ms: u64,
    #[arg(long, default_value_t = 1000)]
    epsilon_ppm: u64,
    #[arg(long, default_value_t = 1000)]
    sync_period_us: u64,
    /// Enable a broken protocol variant; repeatable.
    #[arg(long)]
    mutate: Vec<String>,
    /// JSON fault script.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Write the history as JSON lines.
    #[arg(long)]
    history_out: Option<PathBuf>,
}

fn config(a: &Args) -> Result<RunConfig, String> {
    let multi_version = match a.versioning.as_str() {
        "multi" => true,
        "single" => false,
        v => return Err(format!("unknown versioning `{v}` (single|multi)")),
    };
    let policy = match a.oldver_policy.as_str() {
        "block" => OldVersionPolicy::Block,
        "abort" => OldVersionPolicy::Abort,
        "truncate" => OldVersionPolicy::Truncate,
        p => return Err(format!("unknown old-version policy `{p}` (block|abort|truncate)")),
    };
    let mut mutations = Mutations::default();
    for m in &a.mutate {
        mutations.enable(m)?;
    }
    let scenario = match &a.scenario {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Scenario::parse(&text).map_err(|e| e.to_string())?
        }
        None => Scenario::default(),
    };
    Ok(RunConfig {
        nodes: a.nodes,
        seed: a.seed,
        duration_ms: a.duration_ms,
        mode: a.mode,
        multi_version,
        policy,
        old_version_budget: a.oldver_budget,
        workload: a.workload.clone(),
        theta: a.theta,
        scan_len: a.scan_len,
        keys: a.keys,
        clients: a.clients,
        programs: a.programs,
        lease_ms: a.lease_ms,
        epsilon_ppm: a.epsilon_ppm,
        sync_period_us: a.sync_period_us,
        mutations,
        scenario,
    })
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let report = match config(&args).and_then(|c| run(&c)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(p) = &args.history_out {
        let written = std::fs::File::create(p)
            .map(std::io::BufWriter::new)
            .and_then(|f| write_jsonl(f, &report.history));
        if let Err(e) = written {
            eprintln!("{}: {e}", p.display());
            return ExitCode::from(2);
        }
    }
    println!("{}", serde_json::to_string_pretty(&report.to_json()).expect("json"));
    ExitCode::from(report.exit_code() as u8)
}
