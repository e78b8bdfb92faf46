use std::fmt;
use std::io::Write;

use crate::sim::Rdc;

pub const CSV_HEADER: [&str; 8] = [
    "scenario",
    "seed",
    "metric",
    "value",
    "unit",
    "hops",
    "rdc",
    "state_count",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    /// Node's registration send to its ACK, simulated ms.
    AssociationDelay,
    /// Gateway's registration receipt to the last replay ACK, simulated ms.
    RecoveryDelay,
    /// Mean wall-clock time per intercepted packet, µs.
    InterceptionOverhead,
    StateCount,
    HopCount,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::AssociationDelay,
        Metric::RecoveryDelay,
        Metric::InterceptionOverhead,
        Metric::StateCount,
        Metric::HopCount,
    ];

    pub fn unit(self) -> &'static str {
        match self {
            Metric::AssociationDelay | Metric::RecoveryDelay => "ms",
            Metric::InterceptionOverhead => "us",
            Metric::StateCount | Metric::HopCount => "count",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// What the `seed` column holds: a run's seed or a summary statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeedColumn {
    Run(u64),
    Mean,
    StdDev,
}

impl fmt::Display for SeedColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedColumn::Run(s) => write!(f, "{s}"),
            SeedColumn::Mean => f.write_str("mean"),
            SeedColumn::StdDev => f.write_str("stddev"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub scenario: String,
    pub seed: SeedColumn,
    pub metric: Metric,
    pub value: f64,
    pub hops: Option<u32>,
    pub rdc: Option<Rdc>,
    pub state_count: Option<usize>,
}

impl MetricRecord {
    pub fn unit(&self) -> &'static str {
        self.metric.unit()
    }

    pub fn fields(&self) -> [String; 8] {
        let value = if self.metric.unit() == "count" && self.value.fract() == 0.0 {
            format!("{}", self.value as i64)
        } else {
            format!("{:.3}", self.value)
        };
        [
            self.scenario.clone(),
            self.seed.to_string(),
            self.metric.to_string(),
            value,
            self.unit().to_string(),
            self.hops.map(|h| h.to_string()).unwrap_or_default(),
            self.rdc.map(|r| r.to_string()).unwrap_or_default(),
            self.state_count.map(|s| s.to_string()).unwrap_or_default(),
        ]
    }
}

pub fn write_csv<W: Write>(out: W, records: &[MetricRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(records: &[MetricRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
