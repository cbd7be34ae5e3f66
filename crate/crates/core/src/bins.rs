//! Height discretization: uniform, log-space, and hierarchical bi-cut bins,
//! plus multi-hot ordinal labels and the telescoping class probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinStrategy {
    Ud,
    Sid,
    Hbc,
}

impl std::fmt::Display for BinStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BinStrategy::Ud => write!(f, "ud"),
            BinStrategy::Sid => write!(f, "sid"),
            BinStrategy::Hbc => write!(f, "hbc"),
        }
    }
}

/// Ordered interior cut values defining `num_classes` height classes over
/// `(h_min, h_max)`. A height equal to a cut belongs to the upper class.
#[derive(Debug, Clone, PartialEq)]
pub struct BinScheme {
    pub strategy: BinStrategy,
    pub num_classes: usize,
    pub h_min: f64,
    pub h_max: f64,
    edges: Vec<f64>,
}

impl BinScheme {
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn num_cuts(&self) -> usize {
        self.num_classes - 1
    }

    /// Class index of a height; values outside `[h_min, h_max]` clamp to the
    /// boundary classes.
    pub fn class_of(&self, h: f64) -> usize {
        self.edges.partition_point(|e| *e <= h)
    }

    /// Midpoint of a class interval; the tail class uses `[last edge, h_max]`.
    pub fn class_midpoint(&self, class: usize) -> f64 {
        let lo = if class == 0 { self.h_min } else { self.edges[class - 1] };
        let hi = if class == self.num_classes - 1 {
            self.h_max
        } else {
            self.edges[class]
        };
        0.5 * (lo + hi)
    }

    fn validate(self) -> Result<Self> {
        if !self.edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::data(format!(
                "{} bins: edges are not strictly increasing ({:?}); reduce the class count",
                self.strategy, self.edges
            )));
        }
        if let (Some(first), Some(last)) = (self.edges.first(), self.edges.last()) {
            if *first <= self.h_min || *last > self.h_max {
                return Err(Error::data(format!(
                    "{} bins: edges {:?} escape the height range ({}, {}]; reduce the class count",
                    self.strategy, self.edges, self.h_min, self.h_max
                )));
            }
        }
        Ok(self)
    }
}

fn check_range(h_min: f64, h_max: f64, num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
    }
    if !(h_max > h_min) {
        return Err(Error::config(format!("degenerate height range [{h_min}, {h_max}]")));
    }
    Ok(())
}

/// Uniform discretization: interior edge `i` at `h_min + (h_max-h_min)*i/N`.
pub fn ud_edges(h_min: f64, h_max: f64, num_classes: usize) -> Result<BinScheme> {
    check_range(h_min, h_max, num_classes)?;
    let n = num_classes as f64;
    let edges = (1..num_classes)
        .map(|i| h_min + (h_max - h_min) * i as f64 / n)
        .collect();
    BinScheme {
        strategy: BinStrategy::Ud,
        num_classes,
        h_min,
        h_max,
        edges,
    }
    .validate()
}

/// Log-space discretization: uniform division in the logarithm of height.
/// A range starting at or below zero is shifted by +1 m in log space.
pub fn sid_edges(h_min: f64, h_max: f64, num_classes: usize) -> Result<BinScheme> {
    check_range(h_min, h_max, num_classes)?;
    let offset = if h_min > 0.0 { 0.0 } else { 1.0 };
    if h_min + offset <= 0.0 {
        return Err(Error::config(format!(
            "sid bins: effective lower bound {} is not positive",
            h_min + offset
        )));
    }
    let (lo, hi) = ((h_min + offset).ln(), (h_max + offset).ln());
    let n = num_classes as f64;
    let edges = (1..num_classes)
        .map(|i| (lo + (hi - lo) * i as f64 / n).exp() - offset)
        .collect();
    BinScheme {
        strategy: BinStrategy::Sid,
        num_classes,
        h_min,
        h_max,
        edges,
    }
    .validate()
}

/// Hierarchical bi-cut: cut `i` sits at the empirical quantile of level
/// `1 - (1/2)^(i+1)`, so each cut splits the remaining upper mass in half.
///
/// The quantile is found on the sorted samples by binary search over the
/// distinct values (ties collapse), interpolating linearly between adjacent
/// order statistics.
pub fn hbc_edges(samples: &[f64], num_classes: usize) -> Result<BinScheme> {
    if samples.is_empty() {
        return Err(Error::data("hbc bins: empty sample collection".to_string()));
    }
    if num_classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite height sample"));
    let n = sorted.len() as f64;

    // collapse ties to distinct values with the fraction strictly below each
    let mut values = Vec::new();
    let mut below = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        values.push(sorted[i]);
        below.push(i as f64 / n);
        let v = sorted[i];
        while i < sorted.len() && sorted[i] == v {
            i += 1;
        }
    }
    if values.len() < num_classes {
        return Err(Error::data(format!(
            "hbc bins: {} distinct sample values cannot form {} strictly increasing classes; reduce the class count",
            values.len(),
            num_classes
        )));
    }

    let mut edges = Vec::with_capacity(num_classes - 1);
    for i in 0..num_classes - 1 {
        let level = 1.0 - 0.5f64.powi(i as i32 + 1);
        let k = below.partition_point(|f| *f < level);
        let edge = if k >= values.len() {
            *values.last().unwrap()
        } else {
            // below[k-1] < level <= below[k]; k >= 1 because below[0] = 0
            let t = (level - below[k - 1]) / (below[k] - below[k - 1]);
            values[k - 1] + t * (values[k] - values[k - 1])
        };
        edges.push(edge);
    }

    BinScheme {
        strategy: BinStrategy::Hbc,
        num_classes,
        h_min: sorted[0],
        h_max: *sorted.last().unwrap(),
        edges,
    }
    .validate()
}

/// Multi-hot ordinal label for class `c`: the first `c` of `N-1` entries set.
pub fn encode_multihot(class: usize, num_classes: usize) -> Result<Vec<f64>> {
    if class >= num_classes {
        return Err(Error::shape(format!(
            "class {class} out of range for {num_classes} classes"
        )));
    }
    Ok((0..num_classes - 1)
        .map(|i| if i < class { 1.0 } else { 0.0 })
        .collect())
}

/// Per-class probabilities from per-cut probabilities.
///
/// `p[i]` is the probability that the pixel's class exceeds `i`; the class
/// probabilities telescope so they always sum to one:
/// `q_0 = 1-p_0`, `q_i = (1-p_i) * prod(p_0..p_{i-1})`, `q_{N-1} = prod(p)`.
pub fn class_probs(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::numeric(format!("cut probability {bad} outside (0,1)")));
    }
    Ok(class_probs_unchecked(p))
}

/// `class_probs` without the domain check, for hot paths on already-clamped
/// predictions.
pub fn class_probs_unchecked(p: &[f64]) -> Vec<f64> {
    let n = p.len() + 1;
    let mut q = Vec::with_capacity(n);
    let mut running = 1.0;
    for &pi in p {
        q.push((1.0 - pi) * running);
        running *= pi;
    }
    q.push(running);
    q
}

/// Height decoded as the midpoint of the most probable class (diagnostics
/// and classification-only inference; ties break to the lowest index).
pub fn decode_height(q: &[f64], scheme: &BinScheme) -> f64 {
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    scheme.class_midpoint(best)
}

/// Fraction of samples falling in each class.
pub fn empirical_mass(scheme: &BinScheme, samples: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; scheme.num_classes];
    for &h in samples {
        counts[scheme.class_of(h)] += 1;
    }
    let n = samples.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}
