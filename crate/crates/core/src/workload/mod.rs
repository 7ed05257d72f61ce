//! Workload generators: what programs clients run against a cluster.

pub mod adversarial;
pub mod script;
pub mod tpcc;
pub mod ycsb;

pub use adversarial::Adversarial;
pub use script::ScriptWorkload;
pub use tpcc::TpccLite;
pub use ycsb::YcsbLite;

use rand_chacha::ChaCha8Rng;

use crate::cluster::Cluster;
use crate::sim::{ClusterConfig, NodeId};
use crate::txn::{AbortReason, Program, ReadRecord};

pub trait Workload {
    fn name(&self) -> &str;
    /// Seeds the initial objects.
    fn setup(&mut self, cluster: &mut Cluster) -> Result<(), String>;
    /// Home node of every client.
    fn clients(&self, cluster: &Cluster) -> Vec<NodeId>;
    /// The client's next program; `None` once it has nothing left to run.
    fn next(&mut self, client: usize, rng: &mut ChaCha8Rng, config: &ClusterConfig) -> Option<Program>;
    fn on_commit(&mut self, _client: usize, _program: &Program, _reads: &[ReadRecord]) {}
    fn on_abort(&mut self, _client: usize, _reason: AbortReason) {}
    /// Pause before the client's next program, in ns.
    fn think(&mut self, _client: usize, _rng: &mut ChaCha8Rng) -> u64 {
        0
    }
    fn report(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// Spreads `n` fresh keys over the cluster's regions round-robin, each
/// starting at `initial`.
pub fn seed_keys(cluster: &mut Cluster, n: usize, initial: i64) -> Result<Vec<crate::store::Oid>, String> {
    let regions = cluster.regions();
    if regions.is_empty() {
        return Err("cluster has no regions".into());
    }
    (0..n).map(|i| cluster.seed_object(regions[i % regions.len()], initial)).collect()
}

/// One client per live member, up to `max`, homed round-robin.
pub fn default_clients(cluster: &Cluster, count: usize) -> Vec<NodeId> {
    let members: Vec<NodeId> = cluster.config().members.iter().copied().collect();
    (0..count).map(|i| members[i % members.len()]).collect()
}
