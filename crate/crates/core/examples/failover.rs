//! Crashes the clock master, then a plain member, and reports how long
//! clocks stayed disabled while the cluster reconfigured.

use chronotxn::run::{run, RunConfig};
use chronotxn::sim::Scenario;
use chronotxn::time::TimePoint;

fn main() {
    let ms = TimePoint::from_millis;
    let scenario = Scenario {
        steps: vec![
            Scenario::crash(ms(40), 0),
            Scenario::crash(ms(100), 3),
            Scenario::heal(ms(140), 3),
        ],
    };
    let cfg = RunConfig {
        nodes: 5,
        seed: 7,
        duration_ms: 200,
        programs: u64::MAX,
        scenario,
        ..RunConfig::default()
    };
    let r = run(&cfg).expect("valid config");
    println!("reconfigurations: {}", r.metrics.reconfigs);
    println!("without a clock disable: {}", r.metrics.reconfigs_without_disable);
    for w in &r.metrics.clock_disable_windows {
        println!(
            "config {} new master n{}: clocks disabled {:.3} ms from {:.3} ms (lease wait: {})",
            w.seq,
            w.cm.0,
            w.ns as f64 / 1e6,
            w.start.0 as f64 / 1e6,
            w.lease_wait
        );
    }
    for c in &r.checks {
        println!("{:<14} {:?}", c.name, c.status);
    }
}
