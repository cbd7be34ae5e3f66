//! Ranking-based pseudo-label filtering: normalized confidence ranks over a
//! batch, a decaying ranking threshold, and the binary keep mask.

use serde::{Deserialize, Serialize};

/// Normalized confidence ranks over one batch of confidence maps, flattened
/// in (map, row, column) order. Ranks are sort positions divided by the
/// total pixel count, so they lie in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct RankingMap {
    ranks: Vec<f64>,
}

impl RankingMap {
    pub fn ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// Ascending stable sort over all pixels of all maps jointly; the rank of a
/// pixel is its sort position divided by the pixel count. Ties keep flat
/// pixel order, so ranking is deterministic.
pub fn rank_batch(confidences: &[f64]) -> RankingMap {
    let n = confidences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| {
        confidences[*a]
            .partial_cmp(&confidences[*b])
            .expect("non-finite confidence")
            .then(a.cmp(b))
    });
    let mut ranks = vec![0.0; n];
    for (pos, idx) in order.into_iter().enumerate() {
        ranks[idx] = pos as f64 / n as f64;
    }
    RankingMap { ranks }
}

/// Ranking threshold state: starts at 1, decays by `lambda` once per epoch,
/// floors at 0.5.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThresholdState {
    pub threshold: f64,
    pub lambda: f64,
    pub epoch: usize,
}

impl ThresholdState {
    pub fn new(lambda: f64) -> Self {
        ThresholdState {
            threshold: 1.0,
            lambda,
            epoch: 0,
        }
    }

    /// Constant threshold pinned at the floor (the static-threshold ablation).
    pub fn fixed_at_floor() -> Self {
        ThresholdState {
            threshold: 0.5,
            lambda: 1.0,
            epoch: 0,
        }
    }
}

/// `r <- max(r * lambda, 0.5)`, advancing the epoch counter.
pub fn threshold_step(state: ThresholdState) -> ThresholdState {
    ThresholdState {
        threshold: (state.threshold * state.lambda).max(0.5),
        lambda: state.lambda,
        epoch: state.epoch + 1,
    }
}

/// Binary keep mask: pixel `j` is kept iff its normalized rank exceeds `r`.
pub fn make_mask(ranks: &RankingMap, r: f64) -> Vec<f64> {
    ranks
        .ranks
        .iter()
        .map(|rank| if *rank > r { 1.0 } else { 0.0 })
        .collect()
}
