//! Parameter sweeps over the canonical crash-recovery scenario.

use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::addr::Endpoint;
use crate::sim::{Command, LinkModel, NodeConfig, Rdc};
use crate::time::SimTime;

use super::metrics::{mean_stddev, Metric, MetricRecord, SeedColumn};
use super::run::{run, HarnessError, RunOptions};
use super::scenario::Scenario;

pub const CANONICAL_NODE: &str = "aaaa::c30c:0:0:2";
pub const CANONICAL_CLIENT: &str = "[cccc::3]:50824";
pub const DEFAULT_HOPS: u32 = 3;
pub const DEFAULT_STATE_COUNT: usize = 3;

/// How independent runs are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Work-stealing pool; same results as sequential. Without the
    /// `parallel` feature this runs sequentially.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `items` in order, in parallel when asked and available.
pub fn map_runs<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanonicalParams {
    pub hops: u32,
    pub rdc: Rdc,
    pub state_count: usize,
}

impl Default for CanonicalParams {
    fn default() -> Self {
        Self {
            hops: DEFAULT_HOPS,
            rdc: Rdc::NullRdc,
            state_count: DEFAULT_STATE_COUNT,
        }
    }
}

impl CanonicalParams {
    pub fn scenario_name(&self) -> String {
        format!("canonical-h{}-{}-s{}", self.hops, self.rdc, self.state_count)
    }
}

const PUT_SPACING: SimTime = SimTime::from_secs(10);
const DOWNTIME: SimTime = SimTime::from_secs(1);
const SETTLE: SimTime = SimTime::from_secs(300);

/// One node at `hops` with `state_count` resources, each PUT once by a
/// client; then the node crashes and recovers.
pub fn canonical_scenario(p: &CanonicalParams, seed: u64) -> Scenario {
    let mut sc = Scenario::new(&p.scenario_name(), seed);
    let addr: Ipv6Addr = CANONICAL_NODE.parse().expect("valid");
    let mut cfg = NodeConfig::new(addr, LinkModel::new(p.hops, p.rdc));
    for i in 0..p.state_count {
        cfg = cfg.with_resource(&format!("/s/{i}"), b"0".to_vec());
    }
    sc.add_node("n", cfg);
    let client = sc.add_client("c", CANONICAL_CLIENT.parse::<Endpoint>().expect("valid"));
    sc.command(SimTime::ZERO, Command::Boot { node: addr });
    let mut t = PUT_SPACING;
    for i in 0..p.state_count {
        sc.command(
            t,
            Command::Put {
                client,
                node: addr,
                path: format!("/s/{i}"),
                value: format!("v{i}").into_bytes(),
                confirmable: true,
            },
        );
        t = t + PUT_SPACING;
    }
    sc.command(
        t,
        Command::Crash {
            node: addr,
            downtime: DOWNTIME,
        },
    );
    sc.end = Some(t + DOWNTIME + SETTLE);
    sc
}

/// Delays measured around the crash of one canonical run.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalRun {
    pub params: CanonicalParams,
    pub seed: u64,
    pub rep: usize,
    pub association_ms: f64,
    pub recovery_ms: f64,
    pub states: usize,
    /// Every replay step acknowledged.
    pub recovered: bool,
}

impl CanonicalRun {
    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |metric, value| MetricRecord {
            scenario: self.params.scenario_name(),
            seed: SeedColumn::Run(self.seed),
            metric,
            value,
            hops: Some(self.params.hops),
            rdc: Some(self.params.rdc),
            state_count: Some(self.params.state_count),
        };
        vec![
            rec(Metric::AssociationDelay, self.association_ms),
            rec(Metric::RecoveryDelay, self.recovery_ms),
            rec(Metric::StateCount, self.states as f64),
            rec(Metric::HopCount, f64::from(self.params.hops)),
        ]
    }

    pub fn value(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::AssociationDelay => Some(self.association_ms),
            Metric::RecoveryDelay => Some(self.recovery_ms),
            Metric::StateCount => Some(self.states as f64),
            Metric::HopCount => Some(f64::from(self.params.hops)),
            Metric::InterceptionOverhead => None,
        }
    }
}

pub fn run_canonical(p: &CanonicalParams, seed: u64, rep: usize) -> Result<CanonicalRun, HarnessError> {
    let sc = canonical_scenario(p, seed);
    let out = run(&sc, &RunOptions::default())?;
    let addr: Ipv6Addr = CANONICAL_NODE.parse().expect("valid");
    let node = out.sim.node(&addr).expect("declared");
    let incomplete = |what: &str| HarnessError::Incomplete(format!("{} seed {seed}: {what}", sc.name));
    let assoc = node
        .associations()
        .iter()
        .find(|a| a.epoch == 2)
        .and_then(|a| a.delay())
        .ok_or_else(|| incomplete("node never re-associated"))?;
    let report = out
        .sim
        .gateway()
        .reports()
        .iter()
        .filter(|r| r.node == addr && !r.aborted)
        .nth(1)
        .ok_or_else(|| incomplete("recovery never finished"))?;
    Ok(CanonicalRun {
        params: *p,
        seed,
        rep,
        association_ms: assoc.as_millis_f64(),
        recovery_ms: report.delay().as_millis_f64(),
        states: report.states,
        recovered: report.all_acked(),
    })
}

/// Seed of repetition `rep`; shared by every parameter value so runs are
/// paired across the sweep.
pub fn derive_seed(base: u64, rep: usize) -> u64 {
    // splitmix64
    let mut z = base.wrapping_add((rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Hops,
    StateCount,
    Rdc,
}

impl FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hops" => Ok(SweepParam::Hops),
            "state_count" | "states" => Ok(SweepParam::StateCount),
            "rdc" => Ok(SweepParam::Rdc),
            o => Err(format!("unknown sweep parameter `{o}` (hops, state_count, rdc)")),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Hops => "hops",
            SweepParam::StateCount => "state_count",
            SweepParam::Rdc => "rdc",
        })
    }
}

/// Parameter sets for `param` over `range`: `a..b` (inclusive) or a comma
/// list; RDC names for `rdc`.
pub fn expand_range(
    param: SweepParam,
    range: &str,
    base: CanonicalParams,
) -> Result<Vec<CanonicalParams>, HarnessError> {
    let bad = |m: String| HarnessError::InvalidSweep(m);
    if param == SweepParam::Rdc {
        let names: Vec<&str> = if let Some((a, b)) = range.split_once("..") {
            vec![a, b]
        } else {
            range.split(',').collect()
        };
        return names
            .into_iter()
            .map(|n| {
                n.trim()
                    .parse::<Rdc>()
                    .map(|rdc| CanonicalParams { rdc, ..base })
                    .map_err(bad)
            })
            .collect();
    }
    let values: Vec<u64> = if let Some((a, b)) = range.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad(format!("bad range start `{a}`")))?;
        let b: u64 = b.trim().parse().map_err(|_| bad(format!("bad range end `{b}`")))?;
        if a > b {
            return Err(bad(format!("empty range {range}")));
        }
        (a..=b).collect()
    } else {
        range
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| bad(format!("bad value `{v}`"))))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() {
        return Err(bad("empty range".into()));
    }
    values
        .into_iter()
        .map(|v| match param {
            SweepParam::Hops if v == 0 => Err(bad("hops must be at least 1".into())),
            SweepParam::Hops => Ok(CanonicalParams { hops: v as u32, ..base }),
            _ => Ok(CanonicalParams {
                state_count: v as usize,
                ..base
            }),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub points: Vec<CanonicalParams>,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Point-major, repetition-minor.
    pub runs: Vec<CanonicalRun>,
    pub reps: usize,
}

pub fn sweep(spec: &SweepSpec, exec: Execution) -> Result<SweepResult, HarnessError> {
    if spec.reps == 0 {
        return Err(HarnessError::InvalidSweep("repetitions must be at least 1".into()));
    }
    if spec.points.is_empty() {
        return Err(HarnessError::InvalidSweep("empty range".into()));
    }
    let jobs: Vec<(CanonicalParams, usize)> = spec
        .points
        .iter()
        .flat_map(|p| (0..spec.reps).map(move |r| (*p, r)))
        .collect();
    let runs = map_runs(&jobs, exec, |(p, rep)| {
        run_canonical(p, derive_seed(spec.seed, *rep), *rep)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepResult { runs, reps: spec.reps })
}

impl SweepResult {
    pub fn point(&self, i: usize) -> &[CanonicalRun] {
        &self.runs[i * self.reps..(i + 1) * self.reps]
    }

    pub fn points(&self) -> usize {
        self.runs.len() / self.reps
    }

    pub fn mean(&self, i: usize, m: Metric) -> f64 {
        let xs: Vec<f64> = self.point(i).iter().filter_map(|r| r.value(m)).collect();
        mean_stddev(&xs).0
    }

    /// One row per run and metric, then mean and stddev rows per point when
    /// there is more than one repetition.
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out: Vec<MetricRecord> = self.runs.iter().flat_map(CanonicalRun::records).collect();
        if self.reps > 1 {
            for i in 0..self.points() {
                let first = &self.point(i)[0];
                for m in [
                    Metric::AssociationDelay,
                    Metric::RecoveryDelay,
                    Metric::StateCount,
                    Metric::HopCount,
                ] {
                    let xs: Vec<f64> = self.point(i).iter().filter_map(|r| r.value(m)).collect();
                    let (mean, sd) = mean_stddev(&xs);
                    for (seed, value) in [(SeedColumn::Mean, mean), (SeedColumn::StdDev, sd)] {
                        out.push(MetricRecord {
                            seed,
                            value,
                            ..first.records().into_iter().find(|r| r.metric == m).expect("present")
                        });
                    }
                }
            }
        }
        out
    }
}
