//! One end-to-end run: build a cluster, drive a workload, check the history.

use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checker::lemma::{self, LemmaReport};
use crate::checker::{self, HistoryEvent, SearchConfig, Verdict, Witness};
use crate::cluster::{Cluster, ClusterParams, Metrics, RunLimits};
use crate::counterexample;
use crate::sim::Scenario;
use crate::store::{OldVersionPolicy, StoreStats};
use crate::time::{DriftBound, TimePoint};
use crate::txn::{Isolation, Mutations, TxnMode};
use crate::workload::adversarial::AdversarialConfig;
use crate::workload::tpcc::TpccConfig;
use crate::workload::ycsb::YcsbConfig;
use crate::workload::{Adversarial, ScriptWorkload, TpccLite, Workload, YcsbLite};

#[derive(Clone, Debug, PartialEq)]
pub enum WorkloadKind {
    Ycsb,
    Tpcc,
    Counterexample,
    Adversarial,
    Script(PathBuf),
}

impl FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ycsb-lite" => Ok(WorkloadKind::Ycsb),
            "tpcc-lite" => Ok(WorkloadKind::Tpcc),
            "counterexample" => Ok(WorkloadKind::Counterexample),
            "adversarial" => Ok(WorkloadKind::Adversarial),
            _ => match s.strip_prefix("script:") {
                Some(p) if !p.is_empty() => Ok(WorkloadKind::Script(p.into())),
                _ => Err(format!(
                    "unknown workload `{s}` (ycsb-lite|tpcc-lite|counterexample|adversarial|script:<path>)"
                )),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub nodes: usize,
    pub seed: u64,
    /// Simulated time during which clients start new programs.
    pub duration_ms: u64,
    pub mode: TxnMode,
    pub multi_version: bool,
    pub policy: OldVersionPolicy,
    /// Old-version bytes per node; `None` keeps the store default.
    pub old_version_budget: Option<usize>,
    pub workload: WorkloadKind,
    pub theta: f64,
    pub scan_len: usize,
    pub keys: usize,
    pub clients: usize,
    /// Programs to issue across all clients.
    pub programs: u64,
    pub lease_ms: u64,
    pub epsilon_ppm: u64,
    pub sync_period_us: u64,
    pub mutations: Mutations,
    pub scenario: Scenario,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            nodes: 4,
            seed: 0,
            duration_ms: 200,
            mode: TxnMode::STRICT_SER,
            multi_version: true,
            policy: OldVersionPolicy::Truncate,
            old_version_budget: None,
            workload: WorkloadKind::Ycsb,
            theta: 0.0,
            scan_len: 4,
            keys: 64,
            clients: 4,
            programs: 300,
            lease_ms: 10,
            epsilon_ppm: 1_000,
            sync_period_us: 1_000,
            mutations: Mutations::default(),
            scenario: Scenario::default(),
        }
    }
}

impl RunConfig {
    /// Three-way replication needs three nodes; two-node clusters fall back
    /// to two replicas.
    pub fn replication(&self) -> usize {
        self.nodes.min(3)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.nodes < 2 {
            return Err(format!("need at least 2 nodes, got {}", self.nodes));
        }
        if self.duration_ms == 0 {
            return Err("duration must be positive".into());
        }
        if self.epsilon_ppm == 0 || self.epsilon_ppm >= DriftBound::PPM_SCALE {
            return Err(format!("epsilon must be in 1..1000000 ppm, got {}", self.epsilon_ppm));
        }
        if self.sync_period_us == 0 || self.lease_ms == 0 {
            return Err("sync period and lease must be positive".into());
        }
        if self.clients == 0 || self.clients > 12 {
            return Err(format!("clients must be in 1..=12, got {}", self.clients));
        }
        if self.theta.is_nan() || self.theta < 0.0 {
            return Err(format!("theta must be >= 0, got {}", self.theta));
        }
        self.scenario.validate(self.nodes).map_err(|e| e.to_string())?;
        self.params().validate()
    }

    pub fn params(&self) -> ClusterParams {
        let mut p = ClusterParams {
            nodes: self.nodes,
            seed: self.seed,
            mode: self.mode,
            epsilon: DriftBound::from_ppm(self.epsilon_ppm.clamp(1, DriftBound::PPM_SCALE - 1)),
            sync_period: self.sync_period_us * 1_000,
            lease_period: self.lease_ms * 1_000_000,
            replication: self.replication(),
            mutations: self.mutations,
            ..ClusterParams::default()
        };
        p.store.multi_version = self.multi_version;
        p.store.policy = self.policy;
        if let Some(b) = self.old_version_budget {
            p.store.old_version_budget = b;
        }
        p
    }

    pub fn limits(&self) -> RunLimits {
        let issue_until = TimePoint::from_millis(self.duration_ms);
        RunLimits {
            programs: self.programs,
            issue_until,
            hard_stop: issue_until + TimePoint::from_millis(self.duration_ms.max(50) * 4).0,
            ..RunLimits::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Violation,
    Exhausted,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    fn from_verdict(name: &str, v: &Verdict) -> Self {
        let (status, witness, detail) = match v {
            Verdict::Pass { .. } => (CheckStatus::Pass, None, None),
            Verdict::Violation { witness } => (CheckStatus::Violation, Some(witness.clone()), None),
            Verdict::SearchExhausted { reason } => (CheckStatus::Exhausted, None, Some(reason.clone())),
        };
        Check {
            name: name.into(),
            status,
            witness,
            detail,
        }
    }

    fn from_lemmas(r: &LemmaReport) -> Self {
        let first = r
            .read_invariant
            .iter()
            .chain(&r.write_invariant)
            .chain(&r.lock_at_wts)
            .next()
            .cloned();
        Check {
            name: "lemmas".into(),
            status: if r.is_clean() {
                CheckStatus::Pass
            } else {
                CheckStatus::Violation
            },
            witness: None,
            detail: first,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub workload: String,
    pub mode: TxnMode,
    pub metrics: Metrics,
    pub store: StoreStats,
    pub lemmas: Option<LemmaReport>,
    pub checks: Vec<Check>,
    /// Real-time inversion found in a non-strict run, if any.
    pub inversion: Option<Witness>,
    pub workload_report: Value,
    pub history: Vec<HistoryEvent>,
    pub sim_end: TimePoint,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn has_violation(&self) -> bool {
        self.checks.iter().any(|c| c.status == CheckStatus::Violation)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// 0 pass, 3 violation, 4 search exhausted.
    pub fn exit_code(&self) -> i32 {
        if self.has_violation() {
            3
        } else if self.passed() {
            0
        } else {
            4
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "workload": self.workload,
            "mode": self.mode.to_string(),
            "sim_end_ns": self.sim_end.0,
            "transactions": self.history.iter().filter(|e| e.kind == checker::EventKind::Begin).count(),
            "metrics": self.metrics,
            "mean_uncertainty_wait_ns": self.metrics.mean_uncertainty_wait_ns(),
            "store": self.store,
            "lemmas": self.lemmas.as_ref().map(|l| json!({
                "reads_checked": l.reads_checked,
                "txns_checked": l.txns_checked,
                "locks_checked": l.locks_checked,
                "violations": l.read_invariant.len() + l.write_invariant.len() + l.lock_at_wts.len(),
            })),
            "checks": self.checks,
            "inversion": self.inversion,
            "workload_report": self.workload_report,
            "exit_code": self.exit_code(),
        })
    }
}

/// Checks a recorded history according to `mode`.
pub fn check_history(mode: TxnMode, history: &[HistoryEvent], min_sep: u64) -> Vec<Check> {
    let search = SearchConfig::default();
    let mut checks = Vec::new();
    match (mode.isolation, mode.strict) {
        (Isolation::Serializable, true) => {
            checks.push(Check::from_verdict("opacity", &checker::check_opacity_with(history, &search)));
        }
        (Isolation::Serializable, false) => {
            checks.push(Check::from_verdict("serializable", &checker::check_serializable(history, &search)));
        }
        (Isolation::Snapshot, _) => {
            checks.push(Check::from_verdict("snapshot_isolation", &checker::check_si(history)));
        }
    }
    if mode.strict {
        checks.push(Check::from_verdict(
            "monotonicity",
            &checker::check_monotonicity_sep(history, min_sep),
        ));
    }
    checks
}

fn build_workload(cfg: &RunConfig) -> Result<Box<dyn Workload>, String> {
    Ok(match &cfg.workload {
        WorkloadKind::Ycsb => Box::new(YcsbLite::new(YcsbConfig {
            keys: cfg.keys,
            theta: cfg.theta,
            scan_len: cfg.scan_len,
            clients: cfg.clients,
            ..YcsbConfig::default()
        })?),
        WorkloadKind::Tpcc => Box::new(TpccLite::new(TpccConfig {
            clients: cfg.clients,
            ..TpccConfig::default()
        })?),
        WorkloadKind::Adversarial => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xad5e);
            Box::new(Adversarial::new(AdversarialConfig::random(&mut rng, cfg.nodes)))
        }
        WorkloadKind::Script(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            Box::new(ScriptWorkload::parse(&text)?)
        }
        WorkloadKind::Counterexample => unreachable!("handled separately"),
    })
}

fn run_counterexample(cfg: &RunConfig) -> RunReport {
    let r = counterexample::run(cfg.mutations);
    let mode = TxnMode::STRICT_SER;
    RunReport {
        workload: "counterexample".into(),
        mode,
        metrics: Metrics::default(),
        store: StoreStats::default(),
        lemmas: None,
        checks: vec![Check::from_verdict("opacity", &r.verdict)],
        inversion: None,
        workload_report: json!({
            "steps": r.log,
            "t3_committed": r.t3_committed,
            "t4_reads": r.t4_reads,
        }),
        sim_end: r.history.iter().map(|e| e.true_end).max().unwrap_or_default(),
        history: r.history,
    }
}

/// Runs `cfg` to completion. Errors are configuration errors.
pub fn run(cfg: &RunConfig) -> Result<RunReport, String> {
    cfg.validate()?;
    if cfg.workload == WorkloadKind::Counterexample {
        return Ok(run_counterexample(cfg));
    }
    let mut wl = build_workload(cfg)?;
    let mut params = cfg.params();
    if cfg.workload == WorkloadKind::Adversarial {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xad5e);
        AdversarialConfig::random(&mut rng, cfg.nodes).apply(&mut params);
    }
    run_with(params, cfg.scenario.clone(), wl.as_mut(), cfg.limits())
}

/// Lower-level entry point for callers that build their own workload.
pub fn run_with(
    params: ClusterParams,
    scenario: Scenario,
    wl: &mut dyn Workload,
    limits: RunLimits,
) -> Result<RunReport, String> {
    let mode = params.mode;
    let min_sep = params.net.d_min;
    let mut cluster = Cluster::new(params, scenario)?;
    wl.setup(&mut cluster)?;
    cluster.run(wl, limits);
    let history = std::mem::take(&mut cluster.w.history);
    let mut checks = check_history(mode, &history, min_sep);
    let lemmas = mode.is_serializable().then(|| lemma::scan(&cluster.w.oracle, &[mode]));
    if let Some(l) = &lemmas {
        checks.push(Check::from_lemmas(l));
    }
    let inversion = if mode.strict {
        None
    } else {
        checker::find_real_time_inversion(&history)
    };
    Ok(RunReport {
        workload: wl.name().to_string(),
        mode,
        metrics: cluster.w.metrics.clone(),
        store: cluster.store_stats(),
        lemmas,
        checks,
        inversion,
        workload_report: wl.report(),
        sim_end: cluster.w.now(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workload_names_parse() {
        assert_eq!("ycsb-lite".parse::<WorkloadKind>(), Ok(WorkloadKind::Ycsb));
        assert_eq!(
            "script:a.json".parse::<WorkloadKind>(),
            Ok(WorkloadKind::Script("a.json".into()))
        );
        assert!("script:".parse::<WorkloadKind>().is_err());
        assert!("tpcc".parse::<WorkloadKind>().is_err());
    }

    #[test]
    fn one_node_is_a_config_error() {
        let cfg = RunConfig {
            nodes: 1,
            ..RunConfig::default()
        };
        assert!(run(&cfg).is_err());
    }

    #[test]
    fn counterexample_exit_codes() {
        let mut cfg = RunConfig {
            workload: WorkloadKind::Counterexample,
            ..RunConfig::default()
        };
        assert_eq!(run(&cfg).unwrap().exit_code(), 0);
        cfg.mutations = Mutations::only("skip_write_wait");
        assert_eq!(run(&cfg).unwrap().exit_code(), 3);
    }

    #[test]
    fn small_ycsb_run_passes() {
        let cfg = RunConfig {
            programs: 60,
            keys: 16,
            ..RunConfig::default()
        };
        let r = run(&cfg).unwrap();
        assert!(r.metrics.committed > 0, "{:?}", r.metrics);
        assert!(r.passed(), "{:?}", r.checks);
    }
}
