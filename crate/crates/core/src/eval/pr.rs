//! Precision-recall curves and their area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)`, one point per distinct score, highest score
    /// first.
    pub points: Vec<(f64, f64)>,
    pub positives: usize,
    pub total: usize,
}

impl PrCurve {
    pub fn positive_fraction(&self) -> f64 {
        self.positives as f64 / self.total as f64
    }
}

/// Sweep a threshold down through the distinct scores; a window is called
/// positive when its score is at least the threshold. Labels are positive
/// when greater than 0.5.
pub fn pr_curve(scores: &[f32], labels: &[f32]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape("pr_curve", &[scores.len()], &[labels.len()]));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {s} is not comparable")));
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    if positives == 0 {
        return Err(Error::Domain("precision-recall needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(PrCurve {
        points,
        positives,
        total: scores.len(),
    })
}

/// Trapezoidal area under precision over recall in `[0, 1]`. The segment
/// from recall 0 to the first point takes the first point's precision.
pub fn auc(curve: &PrCurve) -> f64 {
    let Some(&(r0, p0)) = curve.points.first() else {
        return 0.0;
    };
    let mut area = r0 * p0;
    for w in curve.points.windows(2) {
        let ((ra, pa), (rb, pb)) = (w[0], w[1]);
        area += (rb - ra) * (pa + pb) / 2.0;
    }
    area
}

/// `auc(pr_curve(scores, labels))`.
pub fn pr_auc(scores: &[f32], labels: &[f32]) -> Result<f64> {
    Ok(auc(&pr_curve(scores, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_separation() {
        let c = pr_curve(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(c.points.contains(&(1.0, 1.0)));
        assert_eq!(auc(&c), 1.0);
    }

    #[test]
    fn constant_scores_are_chance() {
        let labels = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let c = pr_curve(&[0.3; 7], &labels).unwrap();
        assert_eq!(c.points, vec![(1.0, 2.0 / 7.0)]);
        assert_eq!(auc(&c), 2.0 / 7.0);
    }

    #[test]
    fn hand_case() {
        // Scores 0.9 (+), 0.8 (-), 0.7 (+), 0.7 (-), 0.4 (+), 0.1 (-).
        let s = [0.7, 0.9, 0.1, 0.4, 0.8, 0.7];
        let y = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let c = pr_curve(&s, &y).unwrap();
        let third = 1.0 / 3.0;
        let expected = [(third, 1.0), (third, 0.5), (2.0 * third, 0.5), (1.0, 0.6), (1.0, 0.5)];
        assert_eq!(c.points.len(), expected.len());
        for (a, b) in c.points.iter().zip(expected) {
            assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-15, "{a:?} {b:?}");
        }
        // Left rectangle, then trapezoids.
        let oracle = third * 1.0 + 0.0 + third * 0.5 + third * 0.55 + 0.0;
        assert!((auc(&c) - oracle).abs() < 1e-12);
    }

    #[test]
    fn no_positives_is_an_error() {
        assert!(pr_curve(&[0.1, 0.2], &[0.0, 0.0]).is_err());
        assert!(pr_curve(&[0.1], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            data in prop::collection::vec((0u8..20, any::<bool>()), 1..60),
        ) {
            let labels: Vec<f32> = data.iter().map(|d| d.1 as u8 as f32).collect();
            prop_assume!(labels.iter().any(|&y| y > 0.5));
            let s: Vec<f32> = data.iter().map(|d| d.0 as f32 / 20.0).collect();
            let t: Vec<f32> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            let (a, b) = (pr_curve(&s, &labels).unwrap(), pr_curve(&t, &labels).unwrap());
            prop_assert_eq!(&a, &b);
            let area = auc(&a);
            prop_assert!((0.0..=1.0).contains(&area));
            prop_assert!(a.points.windows(2).all(|w| w[0].0 <= w[1].0));
        }
    }
}
