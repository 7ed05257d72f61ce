//! YCSB-lite: a flat key space with read-modify-write updates and short
//! range scans, keeping successfully scanned and updated keys at 50:50.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde_json::json;

use super::{default_clients, seed_keys, Workload};
use crate::cluster::Cluster;
use crate::sim::{ClusterConfig, NodeId};
use crate::store::Oid;
use crate::txn::{Op, Program, ReadRecord, Target, Val};

#[derive(Clone, Debug)]
pub struct YcsbConfig {
    pub keys: usize,
    /// Zipf skew; zero is uniform.
    pub theta: f64,
    pub scan_len: usize,
    pub clients: usize,
    pub think_ns: u64,
}

impl Default for YcsbConfig {
    fn default() -> Self {
        YcsbConfig {
            keys: 64,
            theta: 0.0,
            scan_len: 4,
            clients: 4,
            think_ns: 20_000,
        }
    }
}

pub struct YcsbLite {
    cfg: YcsbConfig,
    keys: Vec<Oid>,
    zipf: Zipf<f64>,
    /// Keys read by committed scans.
    pub scanned: u64,
    /// Keys written by committed updates.
    pub updated: u64,
    in_flight_scan: u64,
    in_flight_update: u64,
}

impl YcsbLite {
    pub fn new(cfg: YcsbConfig) -> Result<Self, String> {
        if cfg.keys == 0 || cfg.scan_len == 0 || cfg.clients == 0 {
            return Err("ycsb-lite needs keys, scan length and clients > 0".into());
        }
        if cfg.theta.is_nan() || cfg.theta < 0.0 {
            return Err(format!("zipf theta must be >= 0, got {}", cfg.theta));
        }
        let zipf = Zipf::new(cfg.keys as u64, cfg.theta).map_err(|e| e.to_string())?;
        Ok(YcsbLite {
            cfg,
            keys: Vec::new(),
            zipf,
            scanned: 0,
            updated: 0,
            in_flight_scan: 0,
            in_flight_update: 0,
        })
    }

    pub fn keys(&self) -> &[Oid] {
        &self.keys
    }

    /// Key index drawn from the configured distribution.
    pub fn pick(&self, rng: &mut ChaCha8Rng) -> usize {
        let k = self.zipf.sample(rng) as usize;
        k.clamp(1, self.cfg.keys) - 1
    }

    pub fn scan_fraction(&self) -> f64 {
        let total = self.scanned + self.updated;
        if total == 0 {
            0.5
        } else {
            self.scanned as f64 / total as f64
        }
    }

    pub fn scan_program(&self, start: usize) -> Program {
        let ops = (0..self.cfg.scan_len)
            .map(|i| Op::Read(Target::Fixed(self.keys[(start + i) % self.keys.len()])))
            .collect();
        Program::new("scan", ops)
    }

    pub fn update_program(&self, key: usize) -> Program {
        let k = Target::Fixed(self.keys[key]);
        Program::new("update", vec![Op::Read(k), Op::Write(k, Val::RegPlus(0, 1))])
    }
}

impl Workload for YcsbLite {
    fn name(&self) -> &str {
        "ycsb-lite"
    }

    fn setup(&mut self, cluster: &mut Cluster) -> Result<(), String> {
        self.keys = seed_keys(cluster, self.cfg.keys, 0)?;
        Ok(())
    }

    fn clients(&self, cluster: &Cluster) -> Vec<NodeId> {
        default_clients(cluster, self.cfg.clients)
    }

    fn next(&mut self, _client: usize, rng: &mut ChaCha8Rng, _config: &ClusterConfig) -> Option<Program> {
        let key = self.pick(rng);
        // steer towards equal numbers of scanned and updated keys
        let scanned = self.scanned + self.in_flight_scan;
        let updated = self.updated + self.in_flight_update;
        let scan = match scanned.cmp(&updated) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => rng.gen_bool(0.5),
        };
        if scan {
            self.in_flight_scan += self.cfg.scan_len as u64;
            Some(self.scan_program(key))
        } else {
            self.in_flight_update += 1;
            Some(self.update_program(key))
        }
    }

    fn on_commit(&mut self, _client: usize, program: &Program, _reads: &[ReadRecord]) {
        if program.label == "scan" {
            let n = program.ops.len() as u64;
            self.scanned += n;
            self.in_flight_scan = self.in_flight_scan.saturating_sub(n);
        } else {
            self.updated += 1;
            self.in_flight_update = self.in_flight_update.saturating_sub(1);
        }
    }

    fn think(&mut self, _client: usize, _rng: &mut ChaCha8Rng) -> u64 {
        self.cfg.think_ns
    }

    fn report(&self) -> serde_json::Value {
        json!({
            "scanned_keys": self.scanned,
            "updated_keys": self.updated,
            "scan_fraction": self.scan_fraction(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn wl(cfg: YcsbConfig) -> YcsbLite {
        let mut w = YcsbLite::new(cfg).unwrap();
        w.keys = (0..w.cfg.keys as u64).map(Oid).collect();
        w
    }

    #[test]
    fn scan_length_one_is_one_read() {
        let w = wl(YcsbConfig {
            scan_len: 1,
            ..Default::default()
        });
        let p = w.scan_program(3);
        assert_eq!(p.ops, vec![Op::Read(Target::Fixed(Oid(3)))]);
    }

    #[test]
    fn theta_zero_is_uniform() {
        let w = wl(YcsbConfig {
            keys: 8,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0u32; 8];
        for _ in 0..80_000 {
            counts[w.pick(&mut rng)] += 1;
        }
        for c in counts {
            assert!((9_000..11_000).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn skew_favours_low_keys() {
        let w = wl(YcsbConfig {
            keys: 64,
            theta: 0.99,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hot = (0..10_000).filter(|_| w.pick(&mut rng) == 0).count();
        assert!(hot > 1_000, "{hot}");
    }
}
