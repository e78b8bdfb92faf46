use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::directory::EntryType;
use crate::sim::{DynamicState, SimConfig, SimError, Simulation};
use crate::time::SimTime;

use super::metrics::{self, Metric, MetricRecord, SeedColumn};
use super::scenario::{parse_scenario, Check, EventAction, ParseError, Scenario};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("assertion `{name}` failed at {at} ms (line {line}): {detail}")]
    AssertionFailure {
        name: String,
        at: f64,
        line: usize,
        detail: String,
    },
    #[error("{0}")]
    Incomplete(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub trace: bool,
    /// Overrides the scenario's interception setting.
    pub intercept: Option<bool>,
    /// Adds an InterceptionOverhead row. Wall-clock, so not reproducible.
    pub measure_overhead: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssertionResult {
    pub name: String,
    pub at: SimTime,
    pub line: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub name: String,
    pub seed: u64,
    pub assertions: Vec<AssertionResult>,
    pub metrics: Vec<MetricRecord>,
    /// SD snapshots taken at each assertion point.
    pub snapshots: String,
    pub sim: Simulation,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn first_failure(&self) -> Option<&AssertionResult> {
        self.assertions.iter().find(|a| !a.passed)
    }

    pub fn trace_text(&self) -> String {
        self.sim.trace().render()
    }

    pub fn metrics_csv(&self) -> String {
        metrics::to_csv_string(&self.metrics)
    }
}

/// Runs a scenario to its end time, evaluating assertions as their times come.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutcome, HarnessError> {
    let mut gw = scenario.gateway.clone();
    if let Some(i) = opts.intercept {
        gw.intercept = i;
    }
    let mut cfg = SimConfig::new(scenario.seed, gw);
    cfg.internet = scenario.internet;
    cfg.trace = opts.trace
        || scenario.events.iter().any(|e| {
            matches!(
                &e.action,
                EventAction::Assert(a) if matches!(a.check, Check::Trace(_))
            )
        });
    let mut sim = Simulation::new(cfg)?;
    for n in &scenario.nodes {
        sim.add_node(n.config.clone())?;
    }
    for c in &scenario.clients {
        sim.add_client(&c.name, c.endpoint)?;
    }
    for e in &scenario.events {
        if let EventAction::Command(cmd) = &e.action {
            sim.schedule(e.at, cmd.clone());
        }
    }

    let mut labels: BTreeMap<String, DynamicState> = BTreeMap::new();
    let mut assertions = Vec::new();
    let mut snapshots = String::new();
    for e in &scenario.events {
        match &e.action {
            EventAction::Command(_) => {}
            EventAction::Snapshot { label, node } => {
                sim.run_until(e.at);
                if let Some(n) = sim.node(node) {
                    labels.insert(label.clone(), n.dynamic_state());
                }
            }
            EventAction::Assert(a) => {
                sim.run_until(e.at);
                let (passed, detail) = match evaluate(&a.check, &sim, &labels) {
                    Ok(()) => (true, String::new()),
                    Err(d) => (false, d),
                };
                snapshots.push_str(&format!(
                    "# {} {} {}\n",
                    e.at,
                    a.name,
                    if passed { "ok" } else { "FAILED" }
                ));
                snapshots.push_str(&sim.gateway().directory().snapshot());
                assertions.push(AssertionResult {
                    name: a.name.clone(),
                    at: e.at,
                    line: e.line,
                    passed,
                    detail,
                });
            }
        }
    }
    sim.run_until(scenario.end_time());

    let mut metrics = collect_metrics(&scenario.name, scenario.seed, &sim);
    if opts.measure_overhead {
        let times = sim.gateway().intercept_times();
        if !times.is_empty() {
            let us: Vec<f64> = times.iter().map(|d| d.as_secs_f64() * 1e6).collect();
            metrics.push(MetricRecord {
                scenario: scenario.name.clone(),
                seed: SeedColumn::Run(scenario.seed),
                metric: Metric::InterceptionOverhead,
                value: metrics::mean_stddev(&us).0,
                hops: None,
                rdc: None,
                state_count: None,
            });
        }
    }
    Ok(RunOutcome {
        name: scenario.name.clone(),
        seed: scenario.seed,
        assertions,
        metrics,
        snapshots,
        sim,
    })
}

/// Association delay per completed boot; recovery delay, replayed state count
/// and hop count per finished recovery run.
pub fn collect_metrics(name: &str, seed: u64, sim: &Simulation) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for node in sim.nodes() {
        let link = node.link();
        let reports: Vec<_> = sim
            .gateway()
            .reports()
            .iter()
            .filter(|r| r.node == node.addr() && !r.aborted)
            .collect();
        let record = |metric: Metric, value: f64, states: Option<usize>| MetricRecord {
            scenario: name.to_string(),
            seed: SeedColumn::Run(seed),
            metric,
            value,
            hops: Some(link.hops),
            rdc: Some(link.rdc),
            state_count: states,
        };
        let assoc = node.associations();
        for (i, a) in assoc.iter().enumerate() {
            let Some(d) = a.delay() else { continue };
            let next = assoc.get(i + 1).map(|n| n.sent_at);
            let states = reports
                .iter()
                .find(|r| r.started_at >= a.sent_at && next.is_none_or(|n| r.started_at < n))
                .map(|r| r.states);
            out.push(record(Metric::AssociationDelay, d.as_millis_f64(), states));
        }
        for r in reports.iter().filter(|r| !r.outcomes.is_empty()) {
            out.push(record(Metric::RecoveryDelay, r.delay().as_millis_f64(), Some(r.states)));
            out.push(record(Metric::StateCount, r.states as f64, Some(r.states)));
            out.push(record(Metric::HopCount, f64::from(link.hops), Some(r.states)));
        }
    }
    out
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn list<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
}

fn show(v: &[u8]) -> String {
    match std::str::from_utf8(v) {
        Ok(s) => format!("{s:?}"),
        Err(_) => format!("hex:{}", hex::encode(v)),
    }
}

pub fn evaluate(check: &Check, sim: &Simulation, labels: &BTreeMap<String, DynamicState>) -> Result<(), String> {
    let node = |a| sim.node(a).ok_or_else(|| format!("no node {a}"));
    let sd = sim.gateway().directory();
    match check {
        Check::SdTypes { node: a, types } => {
            let got: Vec<u8> = sd.entries_for_server(a).iter().map(|e| e.entry_type.code()).collect();
            if &got != types {
                return Err(format!("entry types {} != expected {}", list(&got), list(types)));
            }
        }
        Check::SdCount(n) => {
            if sd.len() != *n {
                return Err(format!("{} entries, expected {n}", sd.len()));
            }
        }
        Check::SdObserve {
            client,
            node: a,
            path,
            expect,
        } => {
            let ep = sim.client(*client).endpoint();
            let got = sd
                .entries()
                .find(|e| {
                    e.entry_type == EntryType::Observe && e.client == ep && e.server.addr == *a && e.uri_path == *path
                })
                .map(|e| (e.observe_counter, e.retransmit_counter));
            if got != *expect {
                return Err(format!("observe entry {got:?}, expected {expect:?}"));
            }
        }
        Check::Resource { node: a, path, value } => {
            let got = node(a)?.resource(path);
            if got != Some(value.as_slice()) {
                return Err(format!(
                    "{path} = {}, expected {}",
                    got.map_or("<missing>".into(), show),
                    show(value)
                ));
            }
        }
        Check::Observer { node: a, path, client } => {
            let got: Vec<_> = node(a)?
                .observers()
                .iter()
                .filter(|o| o.path == *path)
                .map(|o| o.client)
                .collect();
            let want: Vec<_> = client.iter().map(|c| sim.client(*c).endpoint()).collect();
            if got != want {
                return Err(format!("observers of {path} {got:?}, expected {want:?}"));
            }
        }
        Check::Notified { node: a, path, values } => {
            let n = node(a)?;
            let got: Vec<u32> = n
                .sent_notifications()
                .iter()
                .filter(|s| s.epoch == n.boot_epoch() && s.path == *path && s.retransmission == 0)
                .map(|s| s.observe)
                .collect();
            if &got != values {
                return Err(format!("notified {}, expected {}", list(&got), list(values)));
            }
        }
        Check::ClientObs {
            client,
            node: a,
            path,
            values,
        } => {
            let got: Vec<u32> = sim
                .client(*client)
                .notifications()
                .iter()
                .filter(|n| n.from.addr == *a && n.path == *path)
                .map(|n| n.observe)
                .collect();
            if &got != values {
                return Err(format!("client saw {}, expected {}", list(&got), list(values)));
            }
        }
        Check::Status { node: a, status } => {
            let got = node(a)?.status();
            if got != *status {
                return Err(format!("status {got:?}, expected {status:?}"));
            }
        }
        Check::Loaded { node: a, file } => {
            if !node(a)?.loaded_modules().contains(file) {
                return Err(format!("{file} not loaded"));
            }
        }
        Check::StateEqual { node: a, label } => {
            let want = labels.get(label).ok_or_else(|| format!("no snapshot `{label}`"))?;
            let got = node(a)?.dynamic_state();
            if &got != want {
                return Err(format!("dynamic state differs from `{label}`: {got:?} vs {want:?}"));
            }
        }
        Check::Recovered { node: a } => {
            let r = sim
                .gateway()
                .reports()
                .iter()
                .rev()
                .find(|r| r.node == *a)
                .ok_or("no recovery run finished")?;
            if !r.all_acked() {
                return Err(format!(
                    "last recovery: aborted={} timed_out={}",
                    r.aborted,
                    r.timed_out()
                ));
            }
        }
        Check::BootEpoch { node: a, epoch } => {
            let got = node(a)?.boot_epoch();
            if got != *epoch {
                return Err(format!("boot epoch {got}, expected {epoch}"));
            }
        }
        Check::Trace(text) => {
            let want = collapse_ws(text);
            if !sim.trace().lines().iter().any(|l| collapse_ws(l).contains(&want)) {
                return Err(format!("no trace line contains `{want}`"));
            }
        }
    }
    Ok(())
}

/// Files written by [`write_artifacts`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub snapshots: PathBuf,
    pub trace: Option<PathBuf>,
}

pub fn write_artifacts(
    outcome: &RunOutcome,
    out_dir: &Path,
    trace_path: Option<&Path>,
) -> Result<Artifacts, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let metrics_path = out_dir.join(format!("{}.metrics.csv", outcome.name));
    fs::write(&metrics_path, outcome.metrics_csv()).map_err(io_err(&metrics_path))?;
    let sd_path = out_dir.join(format!("{}.sd.tsv", outcome.name));
    fs::write(&sd_path, &outcome.snapshots).map_err(io_err(&sd_path))?;
    let trace = if outcome.sim.trace().is_enabled() {
        let p = trace_path.map_or_else(
            || out_dir.join(format!("{}.trace.log", outcome.name)),
            Path::to_path_buf,
        );
        fs::write(&p, outcome.trace_text()).map_err(io_err(&p))?;
        Some(p)
    } else {
        None
    };
    Ok(Artifacts {
        metrics: metrics_path,
        snapshots: sd_path,
        trace,
    })
}

pub fn load_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    if !path.exists() {
        if let Some(text) = path.to_str().and_then(super::bundled) {
            return Ok(parse_scenario(text)?);
        }
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_scenario(&text)?)
}

/// Loads, runs and writes artifacts; the first failed assertion becomes the
/// error, after the artifacts are on disk.
pub fn run_scenario(
    path: &Path,
    out_dir: &Path,
    trace_path: Option<&Path>,
    opts: &RunOptions,
) -> Result<(RunOutcome, Artifacts), HarnessError> {
    let scenario = load_scenario(path)?;
    let mut opts = opts.clone();
    opts.trace |= trace_path.is_some();
    let outcome = run(&scenario, &opts)?;
    let artifacts = write_artifacts(&outcome, out_dir, trace_path)?;
    if let Some(f) = outcome.first_failure() {
        return Err(HarnessError::AssertionFailure {
            name: f.name.clone(),
            at: f.at.as_millis_f64(),
            line: f.line,
            detail: f.detail.clone(),
        });
    }
    Ok((outcome, artifacts))
}
