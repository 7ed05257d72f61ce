//! Runs a hand-written workload: two clients incrementing one counter and a
//! third reading it with a pause in between.

use chronotxn::cluster::RunLimits;
use chronotxn::run::{run_with, RunConfig};
use chronotxn::sim::Scenario;
use chronotxn::workload::ScriptWorkload;

const SCRIPT: &str = r#"{
  "keys": 2,
  "clients": [
    {"node": 0, "programs": [{"label": "inc", "ops": [{"incr": 0}]}, {"label": "inc", "ops": [{"incr": 0}]}]},
    {"node": 1, "programs": [{"label": "inc", "ops": [{"incr": 0}, {"write": [1, 9]}]}]},
    {"node": 2, "programs": [{"label": "peek", "ops": [{"read": 0}, {"think_us": 50}, {"read": 1}]}]}
  ]
}"#;

fn main() {
    let mut wl = ScriptWorkload::parse(SCRIPT).expect("valid script");
    let params = RunConfig { nodes: 3, ..RunConfig::default() }.params();
    let r = run_with(params, Scenario::default(), &mut wl, RunLimits::default()).expect("runs");
    for e in &r.history {
        println!("{}", serde_json::to_string(e).expect("json"));
    }
    println!("passed: {}", r.passed());
}
