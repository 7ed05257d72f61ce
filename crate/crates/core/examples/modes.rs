//! Runs the same contended workload in all four isolation modes. Non-strict
//! modes may serve reads from slightly stale snapshots.

use chronotxn::run::{run, RunConfig, WorkloadKind};
use chronotxn::txn::TxnMode;

fn main() {
    for mode in [TxnMode::STRICT_SER, TxnMode::SER, TxnMode::STRICT_SI, TxnMode::SI] {
        let cfg = RunConfig {
            seed: 5,
            mode,
            workload: WorkloadKind::Adversarial,
            programs: 300,
            ..RunConfig::default()
        };
        let r = run(&cfg).expect("valid config");
        let checks: Vec<String> = r.checks.iter().map(|c| format!("{}={:?}", c.name, c.status)).collect();
        let name = mode.to_string();
        println!(
            "{name:<11} committed {:>4}  waits {:>4}  {}",
            r.metrics.committed,
            r.metrics.uncertainty_waits,
            checks.join(" ")
        );
        if let Some(w) = &r.inversion {
            println!("            real-time inversion: {}", w.reason);
        }
    }
}
