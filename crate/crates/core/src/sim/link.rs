use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::time::SimTime;

use super::SimRng;

/// Radio duty cycling at the MAC layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rdc {
    /// Radio always on.
    NullRdc,
    /// Radio off most of the time; senders wait for the receiver to wake.
    ContikiMac,
}

impl Rdc {
    /// Per-hop delay range used when a scenario doesn't override it.
    pub fn default_per_hop(self) -> DelayRange {
        match self {
            Rdc::NullRdc => DelayRange::new(SimTime::from_millis(5), SimTime::from_millis(15)),
            Rdc::ContikiMac => DelayRange::new(SimTime::from_millis(50), SimTime::from_millis(250)),
        }
    }
}

impl fmt::Display for Rdc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rdc::NullRdc => "nullrdc",
            Rdc::ContikiMac => "contikimac",
        })
    }
}

impl FromStr for Rdc {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nullrdc" => Ok(Rdc::NullRdc),
            "contikimac" => Ok(Rdc::ContikiMac),
            other => Err(format!("unknown RDC `{other}`")),
        }
    }
}

/// Uniform delay in `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayRange {
    pub min: SimTime,
    pub max: SimTime,
}

impl DelayRange {
    pub fn new(min: SimTime, max: SimTime) -> Self {
        assert!(min <= max, "delay range min above max");
        Self { min, max }
    }

    pub fn fixed(d: SimTime) -> Self {
        Self::new(d, d)
    }

    pub fn sample(&self, rng: &mut SimRng) -> SimTime {
        if self.min == self.max {
            return self.min;
        }
        SimTime(rng.gen_range(self.min.0..=self.max.0))
    }

    pub fn mean(&self) -> f64 {
        (self.min.0 + self.max.0) as f64 / 2.0
    }
}

/// Multi-hop path between a node and the gateway.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub hops: u32,
    pub rdc: Rdc,
    pub per_hop: DelayRange,
    /// Drop probability per hop traversal.
    pub loss: f64,
}

impl LinkModel {
    pub fn new(hops: u32, rdc: Rdc) -> Self {
        assert!(hops >= 1, "a link has at least one hop");
        Self {
            hops,
            rdc,
            per_hop: rdc.default_per_hop(),
            loss: 0.0,
        }
    }

    pub fn with_loss(mut self, loss: f64) -> Self {
        assert!((0.0..1.0).contains(&loss), "loss probability must be in [0, 1)");
        self.loss = loss;
        self
    }

    pub fn with_per_hop(mut self, per_hop: DelayRange) -> Self {
        self.per_hop = per_hop;
        self
    }

    pub fn with_hops(mut self, hops: u32) -> Self {
        assert!(hops >= 1, "a link has at least one hop");
        self.hops = hops;
        self
    }

    /// One traversal: the summed per-hop delay, or `None` if a hop drops it.
    pub fn traverse(&self, rng: &mut SimRng) -> Option<SimTime> {
        let mut total = SimTime::ZERO;
        for _ in 0..self.hops {
            if self.loss > 0.0 && rng.gen::<f64>() < self.loss {
                return None;
            }
            total = total + self.per_hop.sample(rng);
        }
        Some(total)
    }
}
