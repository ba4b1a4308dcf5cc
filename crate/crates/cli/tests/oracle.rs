use crackseg::data::{generate_synthetic, AnnotatedSample};
use crackseg::mask::ProbabilityMask;
use crackseg_cli::{eval_with, Predictor};

/// Returns each sample's ground truth as a hard probability mask.
struct Oracle;

impl Predictor for Oracle {
    fn predict(&self, samples: &[AnnotatedSample]) -> crackseg::Result<Vec<ProbabilityMask>> {
        samples
            .iter()
            .map(|s| {
                let m = s.require_mask()?;
                ProbabilityMask::new(m.height, m.width, m.to_f32())
            })
            .collect()
    }
}

struct Blank;

impl Predictor for Blank {
    fn predict(&self, samples: &[AnnotatedSample]) -> crackseg::Result<Vec<ProbabilityMask>> {
        Ok(samples
            .iter()
            .map(|s| ProbabilityMask::filled(s.image.height, s.image.width, 0.0))
            .collect())
    }
}

#[test]
fn perfect_predictions_score_one() {
    let data = generate_synthetic(12, 32, 8).unwrap();
    let out = eval_with(&Oracle, None, &data, ("oracle", "")).unwrap();
    assert!(out.report.dice.iter().chain(&out.report.iou).all(|&v| v == 1.0));
    assert_eq!((out.report.mean_dice, out.report.mean_iou), (1.0, 1.0));
    assert_eq!(out.report.ci95_dice, Some(0.0));
}

#[test]
fn comparison_favours_the_oracle() {
    let data = generate_synthetic(12, 32, 9).unwrap();
    let out = eval_with(&Oracle, Some(&Blank), &data, ("oracle", "blank")).unwrap();
    let blank = out.compare_report.unwrap();
    assert!(blank.dice.iter().all(|&v| v == 0.0), "every synthetic sample has a crack");
    let cmp = out.comparison.unwrap();
    let dice = cmp.dice.unwrap();
    assert_eq!(dice.n_effective, 12);
    assert!((dice.p_value - 2.0 / 4096.0).abs() < 1e-12, "{}", dice.p_value);
}
