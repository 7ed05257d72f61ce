//! Hand-written workloads loaded from JSON.
//!
//! ```json
//! {"keys": 3, "initial": 0,
//!  "clients": [{"node": 1, "programs": [
//!     {"label": "t1", "ops": [{"read": 0}, {"write": [1, 7]}, {"incr": 2}, {"think_us": 5}]}]}]}
//! ```
//!
//! Keys are indices into the seeded objects. Each client runs its programs
//! in order, retrying aborts, then stops.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{seed_keys, Workload};
use crate::cluster::Cluster;
use crate::sim::{ClusterConfig, NodeId};
use crate::store::Oid;
use crate::txn::{Op, Program, Target, Val};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptOp {
    Read(usize),
    Write(usize, i64),
    /// Read then write back plus one.
    Incr(usize),
    ThinkUs(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptProgram {
    #[serde(default)]
    pub label: String,
    pub ops: Vec<ScriptOp>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptClient {
    pub node: u16,
    pub programs: Vec<ScriptProgram>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptSpec {
    pub keys: usize,
    #[serde(default)]
    pub initial: i64,
    pub clients: Vec<ScriptClient>,
}

impl ScriptSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.keys == 0 {
            return Err("script needs at least one key".into());
        }
        if self.clients.is_empty() {
            return Err("script needs at least one client".into());
        }
        for (ci, c) in self.clients.iter().enumerate() {
            for (pi, p) in c.programs.iter().enumerate() {
                for op in &p.ops {
                    let k = match op {
                        ScriptOp::Read(k) | ScriptOp::Write(k, _) | ScriptOp::Incr(k) => *k,
                        ScriptOp::ThinkUs(_) => continue,
                    };
                    if k >= self.keys {
                        return Err(format!("client {ci} program {pi}: key {k} out of range"));
                    }
                }
            }
        }
        Ok(())
    }
}

pub struct ScriptWorkload {
    spec: ScriptSpec,
    keys: Vec<Oid>,
    queues: Vec<VecDeque<Program>>,
}

impl ScriptWorkload {
    pub fn parse(text: &str) -> Result<Self, String> {
        let spec: ScriptSpec = serde_json::from_str(text).map_err(|e| format!("bad script json: {e}"))?;
        Self::new(spec)
    }

    pub fn new(spec: ScriptSpec) -> Result<Self, String> {
        spec.validate()?;
        Ok(ScriptWorkload {
            spec,
            keys: Vec::new(),
            queues: Vec::new(),
        })
    }

    pub fn keys(&self) -> &[Oid] {
        &self.keys
    }

    fn compile(&self, p: &ScriptProgram) -> Program {
        let mut ops = Vec::new();
        let mut regs = 0;
        for op in &p.ops {
            match *op {
                ScriptOp::Read(k) => {
                    ops.push(Op::Read(Target::Fixed(self.keys[k])));
                    regs += 1;
                }
                ScriptOp::Write(k, v) => ops.push(Op::Write(Target::Fixed(self.keys[k]), Val::Const(v))),
                ScriptOp::Incr(k) => {
                    let t = Target::Fixed(self.keys[k]);
                    ops.push(Op::Read(t));
                    ops.push(Op::Write(t, Val::RegPlus(regs, 1)));
                    regs += 1;
                }
                ScriptOp::ThinkUs(us) => ops.push(Op::Think(us * 1_000)),
            }
        }
        Program::new(p.label.clone(), ops)
    }
}

impl Workload for ScriptWorkload {
    fn name(&self) -> &str {
        "script"
    }

    fn setup(&mut self, cluster: &mut Cluster) -> Result<(), String> {
        let nodes = cluster.nodes.len();
        if let Some(c) = self.spec.clients.iter().find(|c| c.node as usize >= nodes) {
            return Err(format!("script client on missing node {}", c.node));
        }
        self.keys = seed_keys(cluster, self.spec.keys, self.spec.initial)?;
        self.queues = self
            .spec
            .clients
            .iter()
            .map(|c| c.programs.iter().map(|p| self.compile(p)).collect())
            .collect();
        Ok(())
    }

    fn clients(&self, _cluster: &Cluster) -> Vec<NodeId> {
        self.spec.clients.iter().map(|c| NodeId(c.node)).collect()
    }

    fn next(&mut self, client: usize, _rng: &mut ChaCha8Rng, _config: &ClusterConfig) -> Option<Program> {
        self.queues.get_mut(client)?.pop_front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_compiles() {
        let mut w = ScriptWorkload::parse(
            r#"{"keys": 3, "clients": [{"node": 0, "programs": [
                {"label": "t", "ops": [{"read": 0}, {"incr": 2}, {"write": [1, 7]}, {"think_us": 5}]}]}]}"#,
        )
        .unwrap();
        w.keys = vec![Oid(10), Oid(11), Oid(12)];
        let p = w.compile(&w.spec.clients[0].programs[0]);
        assert_eq!(
            p.ops,
            vec![
                Op::Read(Target::Fixed(Oid(10))),
                Op::Read(Target::Fixed(Oid(12))),
                Op::Write(Target::Fixed(Oid(12)), Val::RegPlus(1, 1)),
                Op::Write(Target::Fixed(Oid(11)), Val::Const(7)),
                Op::Think(5_000),
            ]
        );
        assert!(p.hint_writes);
    }

    #[test]
    fn rejects_out_of_range_keys() {
        assert!(ScriptWorkload::parse(r#"{"keys": 1, "clients": [{"node": 0, "programs": [{"ops": [{"read": 1}]}]}]}"#).is_err());
        assert!(ScriptWorkload::parse(r#"{"keys": 0, "clients": []}"#).is_err());
    }
}
