//! Starves the old-version pool and compares the three policies for when it
//! runs out.

use chronotxn::run::{run, RunConfig};
use chronotxn::store::OldVersionPolicy;

fn main() {
    for policy in [OldVersionPolicy::Block, OldVersionPolicy::Abort, OldVersionPolicy::Truncate] {
        let cfg = RunConfig {
            seed: 11,
            multi_version: true,
            policy,
            old_version_budget: Some(256),
            keys: 32,
            clients: 8,
            theta: 0.9,
            scan_len: 8,
            ..RunConfig::default()
        };
        let r = run(&cfg).expect("valid config");
        let (m, s) = (&r.metrics, &r.store);
        println!("{policy:?}");
        println!(
            "  committed {}, old versions {}, pool exhausted {}, truncations {}, poisoned reads {}",
            m.committed, s.old_versions_created, s.exhausted, s.truncations, s.poisoned_reads
        );
        println!(
            "  too-old programs {}, retried ok {}, gc advances {}",
            m.too_old_programs, m.too_old_retried_ok, m.gc_advances
        );
        println!("  passed: {}", r.passed());
    }
}
