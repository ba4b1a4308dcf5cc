use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ProbabilityMask;

/// Mean soft label over an image's detected pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub image_id: String,
    pub score: f64,
    pub detected_pixel_count: usize,
}

/// A pixel is detected iff `p > theta`. Images with no detections score 1.
pub fn confidence_score(image_id: impl Into<String>, mask: &ProbabilityMask, theta: f64) -> ConfidenceRecord {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for &p in &mask.data {
        if p as f64 > theta {
            sum += p as f64;
            count += 1;
        }
    }
    ConfidenceRecord {
        image_id: image_id.into(),
        score: if count == 0 { 1.0 } else { sum / count as f64 },
        detected_pixel_count: count,
    }
}

/// `max(1, ⌈fraction·n⌉)`, capped at `n`.
pub fn selection_size(n: usize, fraction: f64) -> usize {
    // Round away float noise before the ceiling so 0.05·120 gives 6, not 7.
    let raw = (fraction * n as f64 * 1e9).round() / 1e9;
    (raw.ceil() as usize).clamp(1, n.max(1))
}

/// Records in ascending score order, ties broken by id.
pub fn rank(records: &[ConfidenceRecord]) -> Vec<ConfidenceRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.image_id.cmp(&b.image_id)));
    sorted
}

/// Ids of the `selection_size` least confident images, least confident first.
pub fn rank_and_select(records: &[ConfidenceRecord], fraction: f64) -> Result<Vec<String>> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let k = selection_size(records.len(), fraction);
    Ok(rank(records).into_iter().take(k).map(|r| r.image_id).collect())
}
