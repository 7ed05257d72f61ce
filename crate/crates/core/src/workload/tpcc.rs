//! TPC-C-lite: districts with order counters and a latest-order pointer,
//! customers, and stock, driven by a neworder / payment / order-status /
//! stock-level mix. New orders are allocated objects and the previous
//! order of the district is freed, which exercises slab reuse.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{default_clients, seed_keys, Workload};
use crate::cluster::Cluster;
use crate::sim::{ClusterConfig, NodeId};
use crate::store::Oid;
use crate::txn::{Op, Program, ReadRecord, Target, Val};

#[derive(Clone, Debug)]
pub struct TpccConfig {
    pub districts: usize,
    pub customers: usize,
    pub stock: usize,
    pub clients: usize,
    /// Stock-level reads go through slave transactions on each primary.
    pub fan_out: bool,
    pub think_ns: u64,
}

impl Default for TpccConfig {
    fn default() -> Self {
        TpccConfig {
            districts: 4,
            customers: 16,
            stock: 32,
            clients: 4,
            fan_out: true,
            think_ns: 20_000,
        }
    }
}

pub struct TpccLite {
    cfg: TpccConfig,
    warehouse: Oid,
    counters: Vec<Oid>,
    latest: Vec<Oid>,
    customers: Vec<Oid>,
    stock: Vec<Oid>,
    pub committed: BTreeMap<String, u64>,
}

impl TpccLite {
    pub fn new(cfg: TpccConfig) -> Result<Self, String> {
        if cfg.districts == 0 || cfg.customers == 0 || cfg.stock < 2 || cfg.clients == 0 {
            return Err("tpcc-lite needs districts, customers, clients and at least two stock items".into());
        }
        Ok(TpccLite {
            cfg,
            warehouse: Oid(0),
            counters: Vec::new(),
            latest: Vec::new(),
            customers: Vec::new(),
            stock: Vec::new(),
            committed: BTreeMap::new(),
        })
    }

    fn new_order(&self, rng: &mut ChaCha8Rng) -> Program {
        let d = rng.gen_range(0..self.cfg.districts);
        let counter = Target::Fixed(self.counters[d]);
        let latest = Target::Fixed(self.latest[d]);
        let mut ops = vec![
            Op::Read(counter),
            Op::Write(counter, Val::RegPlus(0, 1)),
            Op::Read(latest),
            Op::Alloc {
                region: self.counters[d].region(),
                size: 8,
                init: Val::RegPlus(0, 1),
            },
            Op::Write(latest, Val::RegAddr(2)),
            Op::SkipIfZero(1, 1),
            Op::Free(Target::Reg(1)),
        ];
        let items = rng.gen_range(1..=3usize);
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < items {
            let s = rng.gen_range(0..self.stock.len());
            if !picked.contains(&s) {
                picked.push(s);
            }
        }
        for (j, s) in picked.into_iter().enumerate() {
            let t = Target::Fixed(self.stock[s]);
            ops.push(Op::Read(t));
            ops.push(Op::Write(t, Val::RegPlus(3 + j, -1)));
        }
        Program::new("neworder", ops)
    }

    fn payment(&self, rng: &mut ChaCha8Rng) -> Program {
        let c = Target::Fixed(self.customers[rng.gen_range(0..self.customers.len())]);
        let w = Target::Fixed(self.warehouse);
        let amt = rng.gen_range(1..=50);
        Program::new(
            "payment",
            vec![
                Op::Read(c),
                Op::Write(c, Val::RegPlus(0, amt)),
                Op::Read(w),
                Op::Write(w, Val::RegPlus(1, amt)),
            ],
        )
    }

    fn order_status(&self, rng: &mut ChaCha8Rng) -> Program {
        let d = rng.gen_range(0..self.cfg.districts);
        Program::new(
            "order-status",
            vec![
                Op::Read(Target::Fixed(self.latest[d])),
                Op::SkipIfZero(0, 1),
                Op::Read(Target::Reg(0)),
            ],
        )
    }

    fn stock_level(&self, rng: &mut ChaCha8Rng, config: &ClusterConfig) -> Program {
        let n = rng.gen_range(4..=8usize).min(self.stock.len());
        let start = rng.gen_range(0..self.stock.len());
        let oids: Vec<Oid> = (0..n).map(|i| self.stock[(start + i) % self.stock.len()]).collect();
        let d = rng.gen_range(0..self.cfg.districts);
        let mut ops = vec![Op::Read(Target::Fixed(self.counters[d]))];
        if self.cfg.fan_out {
            let mut by_node: BTreeMap<NodeId, Vec<Oid>> = BTreeMap::new();
            for o in oids {
                match config.primary_of(o.region()) {
                    Some(p) => by_node.entry(p).or_default().push(o),
                    None => ops.push(Op::Read(Target::Fixed(o))),
                }
            }
            for (node, oids) in by_node {
                ops.push(Op::FanOut { node: node.0, oids });
            }
        } else {
            ops.extend(oids.into_iter().map(|o| Op::Read(Target::Fixed(o))));
        }
        Program::new("stock-level", ops)
    }
}

impl Workload for TpccLite {
    fn name(&self) -> &str {
        "tpcc-lite"
    }

    fn setup(&mut self, cluster: &mut Cluster) -> Result<(), String> {
        let c = &self.cfg;
        let all = seed_keys(cluster, 1 + 2 * c.districts + c.customers + c.stock, 0)?;
        let mut it = all.into_iter();
        self.warehouse = it.next().expect("seeded");
        self.counters = it.by_ref().take(c.districts).collect();
        self.latest = it.by_ref().take(c.districts).collect();
        self.customers = it.by_ref().take(c.customers).collect();
        self.stock = it.collect();
        Ok(())
    }

    fn clients(&self, cluster: &Cluster) -> Vec<NodeId> {
        default_clients(cluster, self.cfg.clients)
    }

    fn next(&mut self, _client: usize, rng: &mut ChaCha8Rng, config: &ClusterConfig) -> Option<Program> {
        Some(match rng.gen_range(0..100) {
            0..=44 => self.new_order(rng),
            45..=87 => self.payment(rng),
            88..=91 => self.order_status(rng),
            _ => self.stock_level(rng, config),
        })
    }

    fn on_commit(&mut self, _client: usize, program: &Program, _reads: &[ReadRecord]) {
        *self.committed.entry(program.label.clone()).or_default() += 1;
    }

    fn think(&mut self, _client: usize, _rng: &mut ChaCha8Rng) -> u64 {
        self.cfg.think_ns
    }

    fn report(&self) -> serde_json::Value {
        json!({ "committed_by_type": self.committed })
    }
}
