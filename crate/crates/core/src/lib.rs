pub mod checker;
pub mod clock;
pub mod counterexample;
pub mod cluster;
pub mod failover;
pub mod gc;
pub mod run;
pub mod sim;
pub mod store;
pub mod time;
pub mod txn;
pub mod workload;
