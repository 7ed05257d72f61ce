//! Searches seeds of the adversarial workload for violations under each
//! protocol mutation.

use chronotxn::run::{run, CheckStatus, RunConfig, WorkloadKind};
use chronotxn::txn::Mutations;

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    for m in ["none", "skip_write_wait", "validate_during_wait", "wait_before_locks", "nonstrict_read_no_wait_strict_mode"] {
        let mut first = None;
        let mut found = 0;
        for seed in 0..seeds {
            let cfg = RunConfig {
                seed,
                workload: WorkloadKind::Adversarial,
                programs: 400,
                mutations: if m == "none" { Mutations::default() } else { Mutations::only(m) },
                ..RunConfig::default()
            };
            let r = run(&cfg).expect("valid config");
            if let Some(c) = r.checks.iter().find(|c| c.status == CheckStatus::Violation) {
                found += 1;
                first.get_or_insert((seed, c.name.clone(), c.witness.clone().map(|w| w.reason).or(c.detail.clone())));
            }
        }
        println!("{m:<36} {found}/{seeds} seeds violate");
        if let Some((seed, check, why)) = first {
            println!("    first: seed {seed}, {check}: {}", why.unwrap_or_default());
        }
    }
}
