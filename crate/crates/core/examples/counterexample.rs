//! Replays the schedule where unlocking before the write timestamp has
//! passed lets a reader see B's new value next to A's old one.

use chronotxn::counterexample;
use chronotxn::txn::Mutations;

fn main() {
    for (label, m) in [("unlock early", Mutations::only("skip_write_wait")), ("wait, then unlock", Mutations::default())] {
        let r = counterexample::run(m);
        println!("== {label}");
        for line in &r.log {
            println!("  {line}");
        }
        match r.verdict.witness() {
            Some(w) => println!("  checker: violation among {:?}: {}", w.txns, w.reason),
            None => println!("  checker: {:?}", r.verdict),
        }
    }
}
