//! Runs a small YCSB-style workload and prints what the checkers found.

use chronotxn::run::{run, RunConfig};

fn main() {
    let cfg = RunConfig {
        nodes: 4,
        seed: 42,
        programs: 200,
        theta: 0.6,
        ..RunConfig::default()
    };
    let r = run(&cfg).expect("valid config");
    let m = &r.metrics;
    println!("committed {} ({} read-only), aborted {}", m.committed, m.committed_read_only, m.aborted);
    println!("aborts by reason: {:?}", m.aborts_by_reason);
    println!(
        "uncertainty waits: {} averaging {:.1} us",
        m.uncertainty_waits,
        m.mean_uncertainty_wait_ns() / 1e3
    );
    for c in &r.checks {
        println!("{:<14} {:?}", c.name, c.status);
    }
    println!("simulated {:.2} ms, exit code {}", r.sim_end.0 as f64 / 1e6, r.exit_code());
}
