//! Training objectives: ordinal classification loss, plain and masked L1
//! regression losses, and the Plackett-Luce listwise ranking loss that
//! aligns class-probability ranking with regression-error ranking.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};

/// Probabilities are clamped into `[CLAMP_LO, 1 - CLAMP_LO]` before any log.
pub const CLAMP_LO: f64 = 1e-7;

/// Per-step loss components. The supervised teacher loss and the total are
/// derived sums, so the arithmetic identities hold exactly.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_reg_t: f64,
    pub l_pl: f64,
    pub l_sup_t: f64,
    pub l_sup_s: f64,
    pub l_unlabeled: f64,
    pub total: f64,
    /// Number of probability entries that hit the log clamp this step.
    pub clamp_hits: u64,
}

impl LossReport {
    pub fn new(l_cls: f64, l_reg_t: f64, l_pl: f64, l_sup_s: f64, l_unlabeled: f64) -> Self {
        let l_sup_t = l_cls + l_reg_t + l_pl;
        LossReport {
            l_cls,
            l_reg_t,
            l_pl,
            l_sup_t,
            l_sup_s,
            l_unlabeled,
            total: l_sup_t + l_sup_s + l_unlabeled,
            clamp_hits: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Multiplies a node by a plain scalar.
pub fn scale(tape: &mut Tape, x: ValueId, c: f64) -> Result<ValueId> {
    let s = tape.scalar(c);
    tape.mul(x, s)
}

/// Mean over pixels of the per-cut binary cross-entropies, one `N-1`-way
/// ordinal task per pixel. `p` and `y` must share shape; `y` is multi-hot.
pub fn ordinal_loss(tape: &mut Tape, p: ValueId, y: ValueId) -> Result<ValueId> {
    if tape.shape(p) != tape.shape(y) {
        return Err(Error::shape(format!(
            "ordinal_loss: prediction shape {:?} vs label shape {:?}",
            tape.shape(p),
            tape.shape(y)
        )));
    }
    let pc = tape.clamp(p, CLAMP_LO, 1.0 - CLAMP_LO)?;
    let ones = tape.constant(&[1], vec![1.0])?;
    let log_p = tape.log(pc)?;
    let one_minus_p = tape.sub(ones, pc)?;
    let log_1p = tape.log(one_minus_p)?;
    let one_minus_y = tape.sub(ones, y)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(one_minus_y, log_1p)?;
    let ll = tape.add(pos, neg)?;
    // mean over every (pixel, cut) entry = mean over pixels of the
    // 1/(N-1)-scaled per-pixel sum
    let m = tape.mean(ll)?;
    scale(tape, m, -1.0)
}

/// Ordinal loss restricted to pixels where `mask` is 1. The mask must
/// broadcast against `p` (one entry per pixel). Returns zero when nothing
/// is selected.
pub fn ordinal_loss_masked(
    tape: &mut Tape,
    p: ValueId,
    y: ValueId,
    mask: ValueId,
    kept: usize,
) -> Result<ValueId> {
    if tape.shape(p) != tape.shape(y) {
        return Err(Error::shape(format!(
            "ordinal_loss: prediction shape {:?} vs label shape {:?}",
            tape.shape(p),
            tape.shape(y)
        )));
    }
    if kept == 0 {
        return Ok(tape.scalar(0.0));
    }
    let cuts = tape.shape(p)[1];
    let pc = tape.clamp(p, CLAMP_LO, 1.0 - CLAMP_LO)?;
    let ones = tape.constant(&[1], vec![1.0])?;
    let log_p = tape.log(pc)?;
    let one_minus_p = tape.sub(ones, pc)?;
    let log_1p = tape.log(one_minus_p)?;
    let one_minus_y = tape.sub(ones, y)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(one_minus_y, log_1p)?;
    let ll = tape.add(pos, neg)?;
    let masked = tape.mul(ll, mask)?;
    let s = tape.sum(masked)?;
    scale(tape, s, -1.0 / (kept as f64 * cuts as f64))
}

/// Mean absolute error, optionally restricted to `mask == 1` pixels.
/// An all-zero mask yields a loss of exactly zero.
pub fn l1_loss(tape: &mut Tape, pred: ValueId, target: ValueId, mask: Option<ValueId>) -> Result<ValueId> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!(
            "l1_loss: prediction shape {:?} vs target shape {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let diff = tape.sub(pred, target)?;
    let a = tape.abs(diff)?;
    match mask {
        None => tape.mean(a),
        Some(m) => {
            let kept: f64 = tape.value(m).iter().sum();
            if kept == 0.0 {
                return Ok(tape.scalar(0.0));
            }
            let masked = tape.mul(a, m)?;
            let s = tape.sum(masked)?;
            scale(tape, s, 1.0 / kept)
        }
    }
}

/// A ranking list: `M` sampled pixels, their absolute regression errors,
/// their confidences, and the ground-truth permutation sorted by ascending
/// error (ties break by pixel index).
#[derive(Debug, Clone)]
pub struct PlList {
    /// Flat pixel indices into the sampled maps.
    pub indices: Vec<usize>,
    /// Per-pixel predicted-class probability (detached values).
    pub confidences: Vec<f64>,
    /// Absolute regression errors at the sampled pixels.
    pub errors: Vec<f64>,
    /// Positions into `indices`, ascending by error.
    pub order: Vec<usize>,
}

impl PlList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Samples `m` pixels without replacement and ranks them by absolute error.
pub fn build_pl_list(
    confidence_map: &[f64],
    pred_heights: &[f64],
    gt_heights: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Result<PlList> {
    if confidence_map.is_empty() {
        return Err(Error::shape("build_pl_list: empty map".to_string()));
    }
    if confidence_map.len() != pred_heights.len() || pred_heights.len() != gt_heights.len() {
        return Err(Error::shape(format!(
            "build_pl_list: map lengths differ ({}, {}, {})",
            confidence_map.len(),
            pred_heights.len(),
            gt_heights.len()
        )));
    }
    if m > confidence_map.len() {
        return Err(Error::shape(format!(
            "build_pl_list: requested {} pixels from {}",
            m,
            confidence_map.len()
        )));
    }
    let indices: Vec<usize> = sample(rng, confidence_map.len(), m).into_iter().collect();
    let errors: Vec<f64> = indices.iter().map(|i| (gt_heights[*i] - pred_heights[*i]).abs()).collect();
    let confidences: Vec<f64> = indices.iter().map(|i| confidence_map[*i]).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| {
        errors[*a]
            .partial_cmp(&errors[*b])
            .expect("non-finite error")
            .then(indices[*a].cmp(&indices[*b]))
    });
    Ok(PlList {
        indices,
        confidences,
        errors,
        order,
    })
}

/// Plackett-Luce negative log-likelihood of the given permutation, on plain
/// values. `q` must already be in permutation order.
pub fn pl_loss_value(q_in_order: &[f64]) -> f64 {
    let m = q_in_order.len();
    if m < 2 {
        return 0.0;
    }
    let mut suffix = 0.0;
    let mut suffixes = vec![0.0; m];
    for j in (0..m).rev() {
        suffix += q_in_order[j];
        suffixes[j] = suffix;
    }
    let mut loss = 0.0;
    for j in 0..m - 1 {
        loss -= (q_in_order[j] / suffixes[j]).ln();
    }
    loss
}

/// Differentiable Plackett-Luce loss on the teacher's per-cut probability
/// maps. The gradient flows through the telescoping class probabilities into
/// the cut probabilities.
///
/// `cut_probs` has shape `[B, N-1, H, W]`; `list.indices` address the
/// `B*H*W` pixel space.
pub fn pl_loss(tape: &mut Tape, cut_probs: ValueId, list: &PlList) -> Result<ValueId> {
    let m = list.len();
    if m < 2 {
        return Ok(tape.scalar(0.0));
    }
    let shape = tape.shape(cut_probs).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "pl_loss: cut probabilities must be [B,C,H,W], got {:?}",
            shape
        )));
    }
    let (b, cuts, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let classes = cuts + 1;
    if list.indices.iter().any(|i| *i >= b * plane) {
        return Err(Error::shape("pl_loss: pixel index out of range".to_string()));
    }

    // gather each cut's probabilities at the sampled pixels
    let mut per_cut = Vec::with_capacity(cuts);
    for c in 0..cuts {
        let idx: Vec<usize> = list
            .indices
            .iter()
            .map(|pix| {
                let (img, p) = (pix / plane, pix % plane);
                (img * cuts + c) * plane + p
            })
            .collect();
        let g = tape.gather(cut_probs, &idx)?;
        per_cut.push(tape.clamp(g, CLAMP_LO, 1.0 - CLAMP_LO)?);
    }

    // telescoping class probabilities per sampled pixel, all [M]
    let ones = tape.constant(&[1], vec![1.0])?;
    let mut q_rows = Vec::with_capacity(classes);
    let mut running: Option<ValueId> = None;
    for c in 0..cuts {
        let one_minus = tape.sub(ones, per_cut[c])?;
        let q = match running {
            None => one_minus,
            Some(r) => tape.mul(one_minus, r)?,
        };
        q_rows.push(q);
        running = Some(match running {
            None => per_cut[c],
            Some(r) => tape.mul(r, per_cut[c])?,
        });
    }
    q_rows.push(running.expect("at least one cut"));

    // predicted class per pixel from the detached values, then one gather of
    // the chosen class per pixel, already in ground-truth-permutation order
    let stacked = {
        let rows: Vec<ValueId> = q_rows
            .iter()
            .map(|id| tape.reshape(*id, &[1, m]))
            .collect::<Result<_>>()?;
        let cat = tape.concat(0, &rows)?;
        tape.reshape(cat, &[classes * m])?
    };
    let predicted_class: Vec<usize> = (0..m)
        .map(|j| {
            let mut best = 0;
            let mut best_v = tape.value(q_rows[0])[j];
            for (c, row) in q_rows.iter().enumerate().skip(1) {
                let v = tape.value(*row)[j];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect();
    let sel: Vec<usize> = list.order.iter().map(|j| predicted_class[*j] * m + j).collect();
    let conf = tape.gather(stacked, &sel)?;

    // -sum_j log(conf_j / suffix_j); the last term is identically zero
    let suffix = tape.suffix_sum(conf)?;
    let log_suffix = tape.log(suffix)?;
    let log_conf = tape.log(conf)?;
    let terms = tape.sub(log_suffix, log_conf)?;
    tape.sum(terms)
}

/// Counts entries that the log clamp would modify.
pub fn count_clamp_hits(values: &[f64]) -> u64 {
    values
        .iter()
        .filter(|v| **v < CLAMP_LO || **v > 1.0 - CLAMP_LO)
        .count() as u64
}
