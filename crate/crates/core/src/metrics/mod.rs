//! Overlap metrics, confidence intervals and the paired signed-rank test.

mod stats;
mod wilcoxon;

pub use stats::{mean_ci95, t_quantile_975};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbabilityMask};

/// Hard-mask cutoff; a pixel is foreground iff `p > BINARIZE_THRESHOLD`.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

pub fn binarize(mask: &ProbabilityMask) -> BinaryMask {
    BinaryMask {
        height: mask.height,
        width: mask.width,
        data: mask.data.iter().map(|&p| u8::from(p > BINARIZE_THRESHOLD)).collect(),
    }
}

/// `(|A∩B|, |A|, |B|)`.
fn counts(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    if !a.same_extents(b) {
        return Err(Error::ShapeMismatch {
            op: "overlap metric",
            left: format!("{}x{}", a.height, a.width),
            right: format!("{}x{}", b.height, b.width),
        });
    }
    let (mut both, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        both += usize::from(x & y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    Ok((both, na, nb))
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, a, b) = counts(pred, gt)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, a, b) = counts(pred, gt)?;
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Per-image scores with their means and 95% half-widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ids: Vec<String>,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    /// `None` for a single image.
    pub ci95_dice: Option<f64>,
    pub ci95_iou: Option<f64>,
}

impl MetricReport {
    /// Scores binarized predictions against ground truth, pair by pair.
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a ProbabilityMask, &'a BinaryMask)>) -> Result<Self> {
        let (mut ids, mut d, mut j) = (Vec::new(), Vec::new(), Vec::new());
        for (id, pred, gt) in pairs {
            let hard = binarize(pred);
            ids.push(id.to_owned());
            d.push(dice(&hard, gt)?);
            j.push(iou(&hard, gt)?);
        }
        Self::from_scores(ids, d, j)
    }

    pub fn from_scores(ids: Vec<String>, dice: Vec<f64>, iou: Vec<f64>) -> Result<Self> {
        if dice.is_empty() {
            return Err(Error::EmptyEvaluationSet);
        }
        if ids.len() != dice.len() || iou.len() != dice.len() {
            return Err(Error::contract("metric report", "ids, dice and iou lengths differ"));
        }
        let summary = |v: &[f64]| -> (f64, Option<f64>) {
            match mean_ci95(v) {
                Ok((m, h)) => (m, Some(h)),
                Err(_) => (v[0], None),
            }
        };
        let (mean_dice, ci95_dice) = summary(&dice);
        let (mean_iou, ci95_iou) = summary(&iou);
        Ok(Self {
            ids,
            dice,
            iou,
            mean_dice,
            mean_iou,
            ci95_dice,
            ci95_iou,
        })
    }

    pub fn len(&self) -> usize {
        self.dice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dice.is_empty()
    }

    /// One results-table line: `model | Dice% ± CI% | IoU% ± CI%`.
    pub fn table_row(&self, model: &str) -> String {
        let cell = |m: f64, ci: Option<f64>| match ci {
            Some(h) => format!("{:.2}% ± {:.2}%", 100.0 * m, 100.0 * h),
            None => format!("{:.2}%", 100.0 * m),
        };
        format!(
            "{model:<20} | {:>17} | {:>17}",
            cell(self.mean_dice, self.ci95_dice),
            cell(self.mean_iou, self.ci95_iou)
        )
    }
}

/// Header matching [`MetricReport::table_row`].
pub fn table_header() -> String {
    format!("{:<20} | {:>17} | {:>17}", "Model", "Avg. Dice", "Avg. IoU")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn overlap_arithmetic() {
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let e = mask(&[0; 8]);
        assert_eq!((dice(&e, &e).unwrap(), iou(&e, &e).unwrap()), (1.0, 1.0));
        assert_eq!((dice(&a, &e).unwrap(), iou(&a, &e).unwrap()), (0.0, 0.0));
        assert!(dice(&a, &mask(&[0; 4])).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let p = ProbabilityMask::filled(2, 2, 0.5);
        assert_eq!(binarize(&p).count(), 0);
        let p = ProbabilityMask::filled(2, 2, 0.500001);
        assert_eq!(binarize(&p).count(), 4);
    }

    #[test]
    fn report_summaries() {
        let r = MetricReport::from_scores(vec!["a".into(), "b".into()], vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(r.mean_dice, 0.5);
        assert!((r.ci95_dice.unwrap() - 6.353102368).abs() < 1e-6);
        let single = MetricReport::from_scores(vec!["a".into()], vec![0.7], vec![0.6]).unwrap();
        assert_eq!(single.ci95_iou, None);
        assert!(matches!(MetricReport::from_scores(vec![], vec![], vec![]), Err(Error::EmptyEvaluationSet)));
    }

    #[test]
    fn report_json_round_trips() {
        let r = MetricReport::from_scores(vec!["a".into(), "b".into(), "c".into()], vec![0.2, 0.4, 0.9], vec![0.1, 0.3, 0.8])
            .unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"mean_dice\""));
        assert_eq!(serde_json::from_str::<MetricReport>(&text).unwrap(), r);
    }

    #[test]
    fn table_matches_golden() {
        let golden = include_str!("../../tests/data/table_rows.txt");
        let a = MetricReport::from_scores(
            (0..4).map(|i| i.to_string()).collect(),
            vec![0.70, 0.72, 0.74, 0.7372],
            vec![0.55, 0.57, 0.59, 0.5812],
        )
        .unwrap();
        let b = MetricReport::from_scores(vec!["x".into()], vec![0.5], vec![1.0 / 3.0]).unwrap();
        let text = [table_header(), a.table_row("R2AU-Net"), b.table_row("single")].join("\n");
        assert_eq!(text, golden.trim_end());
    }
}
