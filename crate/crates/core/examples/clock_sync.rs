//! Feeds a handful of synchronization round trips into a node's clock state
//! and prints the resulting uncertainty interval.

use chronotxn::clock::{ClockState, SyncRecord};
use chronotxn::time::{DriftBound, TimePoint};

fn main() {
    let mut clock = ClockState::new(DriftBound::from_ppm(1_000));
    // (local send, local receive, master time in the reply), all in ns
    let rounds = [(1_000_000, 1_060_000, 5_030_000), (2_000_000, 2_020_000, 6_012_000), (3_000_000, 3_200_000, 7_050_000)];
    for (send, recv, cm) in rounds {
        let up = clock.on_sync_response(SyncRecord::new(TimePoint(send), TimePoint(recv), TimePoint(cm)));
        let iv = clock.bounds(TimePoint(recv)).expect("synchronized");
        println!(
            "rtt {:>6} ns  improved lower {:<5} upper {:<5}  interval [{}, {}] width {} ns",
            recv - send,
            up.lower_improved,
            up.upper_improved,
            iv.lower.0,
            iv.upper.0,
            iv.width()
        );
    }
    for later in [4_000_000, 10_000_000, 50_000_000] {
        let iv = clock.bounds(TimePoint(later)).expect("synchronized");
        println!("at local {later:>10}: width {:>6} ns", iv.width());
    }
}
