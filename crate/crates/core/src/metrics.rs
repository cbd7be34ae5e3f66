//! Evaluation metrics: total and per-class RMSE, balanced building RMSE over
//! height buckets, and per-building mean relative error.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::{CLASS_BUILDING, CLASS_GROUND, CLASS_TREE};

/// Ground-truth building heights below this are excluded from the relative
/// error to guard the division.
pub const RELATIVE_ERROR_GUARD: f64 = 0.5;

pub const CLASS_NAMES: [(&str, u16); 3] = [
    ("ground", CLASS_GROUND),
    ("building", CLASS_BUILDING),
    ("tree", CLASS_TREE),
];

#[derive(Debug, Clone, Serialize)]
pub struct BucketRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub rmse_total: Option<f64>,
    pub rmse_per_class: BTreeMap<String, Option<f64>>,
    pub rmse_building_balanced: Option<f64>,
    pub building_relative: Option<f64>,
    /// Buildings dropped from the relative error by the near-zero guard.
    pub relative_excluded: usize,
    pub buckets: Vec<BucketRow>,
}

impl MetricReport {
    /// One CSV line matching the validation columns of the training log.
    pub fn csv_header() -> &'static str {
        "rmse_total,rmse_ground,rmse_building,rmse_tree,rmse_building_balanced,building_relative"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            opt(&self.rmse_total),
            opt(self.rmse_per_class.get("ground").unwrap_or(&None)),
            opt(self.rmse_per_class.get("building").unwrap_or(&None)),
            opt(self.rmse_per_class.get("tree").unwrap_or(&None)),
            opt(&self.rmse_building_balanced),
            opt(&self.building_relative),
        )
    }
}

/// RMSE over the selected pixels; `None` when nothing is selected.
pub fn rmse(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "rmse: prediction length {} vs ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(Error::shape(format!(
                "rmse: mask length {} vs maps {}",
                m.len(),
                pred.len()
            )));
        }
    }
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask.map(|m| m[i]).unwrap_or(true) {
            let d = pred[i] - gt[i];
            sum_sq += d * d;
            count += 1;
        }
    }
    Ok(if count == 0 {
        None
    } else {
        Some((sum_sq / count as f64).sqrt())
    })
}

/// Lower-middle median: the element at index `(len - 1) / 2` after sorting.
fn median_lower(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("non-finite height"));
    values[(values.len() - 1) / 2]
}

/// Per-building `(predicted, ground truth)` height pairs: the median height
/// inside each instance footprint, instances in ascending id order.
pub fn building_heights(pred: &[f64], gt: &[f64], instances: &[u16]) -> Vec<(f64, f64)> {
    let mut footprints: BTreeMap<u16, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for i in 0..instances.len() {
        if instances[i] != 0 {
            let entry = footprints.entry(instances[i]).or_default();
            entry.0.push(pred[i]);
            entry.1.push(gt[i]);
        }
    }
    footprints
        .into_values()
        .map(|(mut p, mut g)| (median_lower(&mut p), median_lower(&mut g)))
        .collect()
}

/// Buckets pairs by ground-truth height into `[0,w), [w,2w), ...`, takes the
/// RMSE within each nonempty bucket, and averages the bucket RMSEs without
/// population weighting.
pub fn balanced_building_rmse(pairs: &[(f64, f64)], bucket_width: f64) -> (Option<f64>, Vec<BucketRow>) {
    if pairs.is_empty() || bucket_width <= 0.0 {
        return (None, Vec::new());
    }
    let mut buckets: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (pred, gt) in pairs {
        let b = (gt / bucket_width).floor() as usize;
        let entry = buckets.entry(b).or_default();
        let d = pred - gt;
        entry.0 += d * d;
        entry.1 += 1;
    }
    let rows: Vec<BucketRow> = buckets
        .into_iter()
        .map(|(b, (sum_sq, count))| BucketRow {
            lo: b as f64 * bucket_width,
            hi: (b + 1) as f64 * bucket_width,
            count,
            rmse: (sum_sq / count as f64).sqrt(),
        })
        .collect();
    let mean = rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len() as f64;
    (Some(mean), rows)
}

/// Mean of `|pred - gt| / gt` over buildings, excluding near-zero ground
/// truths; returns the excluded count alongside.
pub fn relative_error(pairs: &[(f64, f64)]) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut excluded = 0usize;
    for (pred, gt) in pairs {
        if *gt < RELATIVE_ERROR_GUARD {
            excluded += 1;
            continue;
        }
        sum += (pred - gt).abs() / gt;
        count += 1;
    }
    if count == 0 {
        (None, excluded)
    } else {
        (Some(sum / count as f64), excluded)
    }
}

/// Streaming accumulator over scenes; combination is order-independent up to
/// floating-point association, and scenes are always folded in index order.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sum_sq_total: f64,
    count_total: usize,
    per_class: BTreeMap<u16, (f64, usize)>,
    building_pairs: Vec<(f64, f64)>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_scene(&mut self, pred: &[f64], gt: &[f64], semantics: &[u16], instances: &[u16]) {
        for i in 0..pred.len() {
            let d = pred[i] - gt[i];
            self.sum_sq_total += d * d;
            self.count_total += 1;
            let entry = self.per_class.entry(semantics[i]).or_default();
            entry.0 += d * d;
            entry.1 += 1;
        }
        self.building_pairs.extend(building_heights(pred, gt, instances));
    }

    pub fn merge(&mut self, other: MetricAccumulator) {
        self.sum_sq_total += other.sum_sq_total;
        self.count_total += other.count_total;
        for (k, (s, c)) in other.per_class {
            let entry = self.per_class.entry(k).or_default();
            entry.0 += s;
            entry.1 += c;
        }
        self.building_pairs.extend(other.building_pairs);
    }

    pub fn finalize(&self, bucket_width: f64) -> MetricReport {
        let rmse_total = if self.count_total == 0 {
            None
        } else {
            Some((self.sum_sq_total / self.count_total as f64).sqrt())
        };
        let mut rmse_per_class = BTreeMap::new();
        for (name, id) in CLASS_NAMES {
            let v = self
                .per_class
                .get(&id)
                .map(|(s, c)| (s / *c as f64).sqrt());
            rmse_per_class.insert(name.to_string(), v);
        }
        let (rmse_building_balanced, buckets) = balanced_building_rmse(&self.building_pairs, bucket_width);
        let (building_relative, relative_excluded) = relative_error(&self.building_pairs);
        MetricReport {
            rmse_total,
            rmse_per_class,
            rmse_building_balanced,
            building_relative,
            relative_excluded,
            buckets,
        }
    }
}
