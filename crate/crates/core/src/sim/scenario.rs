//! Fault-injection scripts.
//!
//! A script is a JSON array of steps:
//!
//! ```json
//! [{"at_true_time": 20000000, "action": "crash", "args": {"node": 0}},
//!  {"at_true_time": 50000000, "action": "partition", "args": {"a": [1], "b": [2, 3]}}]
//! ```
//!
//! Times are simulated nanoseconds of true time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NodeId;
use crate::time::TimePoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptAction {
    Crash,
    Heal,
    Partition,
    Unpartition,
    /// Adds `extra_ns` of one-way delay to every message of `node`.
    Slow,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptArgs {
    pub node: Option<NodeId>,
    pub a: Vec<NodeId>,
    pub b: Vec<NodeId>,
    pub extra_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub at_true_time: TimePoint,
    pub action: ScriptAction,
    #[serde(default)]
    pub args: ScriptArgs,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scenario {
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("bad scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("step {0}: {1}")]
    Invalid(usize, String),
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate(u16::MAX as usize)?;
        Ok(s)
    }

    pub fn validate(&self, nodes: usize) -> Result<(), ScenarioError> {
        let mut prev = TimePoint::ZERO;
        for (i, step) in self.steps.iter().enumerate() {
            if step.at_true_time < prev {
                return Err(ScenarioError::Invalid(i, "steps out of order".into()));
            }
            prev = step.at_true_time;
            let in_range = |n: &NodeId| (n.0 as usize) < nodes;
            match step.action {
                ScriptAction::Crash | ScriptAction::Heal | ScriptAction::Slow => {
                    match &step.args.node {
                        Some(n) if in_range(n) => {}
                        Some(n) => {
                            return Err(ScenarioError::Invalid(i, format!("no node {n}")))
                        }
                        None => return Err(ScenarioError::Invalid(i, "missing node".into())),
                    }
                }
                ScriptAction::Partition | ScriptAction::Unpartition => {
                    if step.args.a.is_empty() || step.args.b.is_empty() {
                        return Err(ScenarioError::Invalid(i, "partition needs a and b".into()));
                    }
                    if let Some(n) = step.args.a.iter().chain(&step.args.b).find(|n| !in_range(n)) {
                        return Err(ScenarioError::Invalid(i, format!("no node {n}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn crash(at: TimePoint, node: u16) -> ScriptStep {
        ScriptStep {
            at_true_time: at,
            action: ScriptAction::Crash,
            args: ScriptArgs {
                node: Some(NodeId(node)),
                ..ScriptArgs::default()
            },
        }
    }

    pub fn heal(at: TimePoint, node: u16) -> ScriptStep {
        ScriptStep {
            at_true_time: at,
            action: ScriptAction::Heal,
            args: ScriptArgs {
                node: Some(NodeId(node)),
                ..ScriptArgs::default()
            },
        }
    }

    pub fn partition(at: TimePoint, a: &[u16], b: &[u16], heal: bool) -> ScriptStep {
        ScriptStep {
            at_true_time: at,
            action: if heal {
                ScriptAction::Unpartition
            } else {
                ScriptAction::Partition
            },
            args: ScriptArgs {
                a: a.iter().map(|&n| NodeId(n)).collect(),
                b: b.iter().map(|&n| NodeId(n)).collect(),
                ..ScriptArgs::default()
            },
        }
    }
}

/// Draws `faults` sequential faults, each a crash followed by a heal or a
/// one-node partition followed by its repair. Faults start at `start` and
/// are spaced `gap` apart so that each reconfiguration settles before the
/// next one; at most one node is out at a time.
pub fn random_faults(rng: &mut ChaCha8Rng, nodes: usize, faults: usize, start: TimePoint, gap: u64) -> Scenario {
    let mut steps = Vec::new();
    let mut t = start;
    for _ in 0..faults {
        let victim = rng.gen_range(0..nodes as u16);
        let down = rng.gen_range(gap / 4..gap / 2);
        if rng.gen_bool(0.5) {
            steps.push(Scenario::crash(t, victim));
            steps.push(Scenario::heal(t + down, victim));
        } else {
            let rest: Vec<u16> = (0..nodes as u16).filter(|&n| n != victim).collect();
            steps.push(Scenario::partition(t, &[victim], &rest, false));
            steps.push(Scenario::partition(t + down, &[victim], &rest, true));
            // a partitioned node is evicted and must come back as a fresh one
            steps.push(Scenario::heal(t + down, victim));
        }
        t = t + gap + rng.gen_range(0..gap / 2);
    }
    Scenario { steps }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_format() {
        let s = Scenario::parse(
            r#"[{"at_true_time": 20000000, "action": "crash", "args": {"node": 0}},
                {"at_true_time": 50000000, "action": "partition", "args": {"a": [1], "b": [2, 3]}}]"#,
        )
        .unwrap();
        assert_eq!(s.steps.len(), 2);
        assert_eq!(s.steps[0].args.node, Some(NodeId(0)));
        assert_eq!(s.steps[1].args.b, vec![NodeId(2), NodeId(3)]);
    }

    #[test]
    fn rejects_bad_scripts() {
        assert!(Scenario::parse(r#"[{"at_true_time": 1, "action": "crash"}]"#).is_err());
        assert!(Scenario::parse(
            r#"[{"at_true_time": 5, "action": "heal", "args": {"node": 1}},
                {"at_true_time": 1, "action": "crash", "args": {"node": 1}}]"#
        )
        .is_err());
        let s = Scenario {
            steps: vec![Scenario::crash(TimePoint(1), 9)],
        };
        assert!(s.validate(4).is_err());
    }

    #[test]
    fn random_faults_are_valid_and_sequential() {
        use rand::SeedableRng;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_faults(&mut rng, 5, 3, TimePoint::from_millis(10), 40_000_000);
            s.validate(5).unwrap();
            assert!(s.steps.len() >= 6);
        }
    }
}
