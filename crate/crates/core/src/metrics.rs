//! Pixel-level segmentation metrics: Jaccard, Dice, sensitivity,
//! specificity, and the thresholded-Jaccard variant used for ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jaccard values below this threshold score zero in the ranking metric.
pub const JA_THRESHOLD: f64 = 0.65;

/// Pixel confusion counts between a predicted and a reference binary mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Count agreements and disagreements between two binary masks of equal
/// length. Values must be exactly 0 or 1.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "confusion: mask lengths differ ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 0) => c.true_neg += 1,
            (0, 1) => c.false_neg += 1,
            _ => {
                return Err(Error::Contract(format!(
                    "confusion: masks must be binary, found pred={p} gt={g}"
                )))
            }
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        // Nothing to find and nothing found: perfect agreement.
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn jaccard(c: &ConfusionCounts) -> f64 {
    ratio(c.true_pos, c.true_pos + c.false_pos + c.false_neg)
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg)
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.true_pos, c.true_pos + c.false_neg)
}

pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.true_neg, c.true_neg + c.false_pos)
}

/// Challenge ranking metric: the Jaccard value itself when it reaches `t`,
/// otherwise 0.
pub fn thresholded_jaccard(ja: f64, t: f64) -> f64 {
    if ja >= t {
        ja
    } else {
        0.0
    }
}

/// Metric values for one image (or the mean over a set).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub ja: f64,
    pub dc: f64,
    pub sn: f64,
    pub sp: f64,
    pub thresholded_ja: f64,
}

impl MetricsRecord {
    pub fn from_counts(c: &ConfusionCounts) -> MetricsRecord {
        let ja = jaccard(c);
        MetricsRecord {
            ja,
            dc: dice(c),
            sn: sensitivity(c),
            sp: specificity(c),
            thresholded_ja: thresholded_jaccard(ja, JA_THRESHOLD),
        }
    }
}

/// Arithmetic mean of each metric over a non-empty set of images.
pub fn aggregate(per_image: &[MetricsRecord]) -> Result<MetricsRecord> {
    if per_image.is_empty() {
        return Err(Error::Contract("aggregate requires at least one record".into()));
    }
    let n = per_image.len() as f64;
    Ok(MetricsRecord {
        ja: per_image.iter().map(|r| r.ja).sum::<f64>() / n,
        dc: per_image.iter().map(|r| r.dc).sum::<f64>() / n,
        sn: per_image.iter().map(|r| r.sn).sum::<f64>() / n,
        sp: per_image.iter().map(|r| r.sp).sum::<f64>() / n,
        thresholded_ja: per_image.iter().map(|r| r.thresholded_ja).sum::<f64>() / n,
    })
}

/// Per-image metrics plus their mean, as written to evaluation reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<MetricsRecord>,
    pub mean: MetricsRecord,
}

impl MetricsReport {
    pub fn new(per_image: Vec<MetricsRecord>) -> Result<MetricsReport> {
        let mean = aggregate(&per_image)?;
        Ok(MetricsReport { per_image, mean })
    }
}
