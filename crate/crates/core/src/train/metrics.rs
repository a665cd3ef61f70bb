//! Accuracy and part-segmentation IoU metrics.

/// Evaluation summary of one split under one protocol.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    /// Sample accuracy (classification) or point accuracy (segmentation).
    pub accuracy: f64,
    pub instance_miou: Option<f64>,
    pub class_miou: Option<f64>,
    /// Mean shape IoU per category (segmentation) or per-class accuracy.
    pub per_class: Vec<f64>,
    /// `1 - mean cosine similarity` between local content features of
    /// patches and their rotated copies.
    pub inv_gap: Option<f64>,
}

impl Metrics {
    /// Value used to pick the best checkpoint.
    pub fn score(&self) -> f64 {
        self.instance_miou.unwrap_or(self.accuracy)
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Mean IoU over `num_parts` parts of one shape; a part absent from both
/// prediction and ground truth scores 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], num_parts: usize) -> f64 {
    let mut inter = vec![0usize; num_parts];
    let mut union = vec![0usize; num_parts];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let total: f64 = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum();
    total / num_parts.max(1) as f64
}

/// `(instance mIoU, class mIoU, per-category mean IoU)` from per-shape
/// `(category, IoU)` pairs. Categories without shapes are left out of the
/// class average and report NaN in the table.
pub fn miou(shapes: &[(usize, f64)], num_categories: usize) -> (f64, f64, Vec<f64>) {
    let instance = shapes.iter().map(|s| s.1).sum::<f64>() / shapes.len().max(1) as f64;
    let mut sums = vec![(0.0, 0usize); num_categories];
    for &(c, iou) in shapes {
        sums[c].0 += iou;
        sums[c].1 += 1;
    }
    let per: Vec<f64> = sums
        .iter()
        .map(|&(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect();
    let present: Vec<f64> = per.iter().copied().filter(|v| !v.is_nan()).collect();
    let class = present.iter().sum::<f64>() / present.len().max(1) as f64;
    (instance, class, per)
}

/// Per-class accuracy table.
pub fn per_class_accuracy(pred: &[usize], truth: &[usize], num_classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; num_classes];
    let mut count = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        count[t] += 1;
        hit[t] += usize::from(p == t);
    }
    hit.iter()
        .zip(&count)
        .map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        assert_eq!(accuracy(&truth, &truth), 1.0);
        assert_eq!(accuracy(&[0; 40], &truth), 0.25);
        assert_eq!(shape_iou(&truth, &truth, 4), 1.0);
        let (inst, class, _) = miou(&[(0, 1.0), (1, 1.0)], 2);
        assert_eq!((inst, class), (1.0, 1.0));
    }

    /// Brute-force confusion enumeration for a 4-point, 2-part shape.
    fn brute_iou(pred: &[usize], truth: &[usize]) -> f64 {
        let mut c = [[0usize; 2]; 2];
        for (&p, &t) in pred.iter().zip(truth) {
            c[t][p] += 1;
        }
        let iou = |k: usize| {
            let tp = c[k][k];
            let fp = c[1 - k][k];
            let fn_ = c[k][1 - k];
            if tp + fp + fn_ == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp + fn_) as f64
            }
        };
        (iou(0) + iou(1)) / 2.0
    }

    #[test]
    fn hand_built_four_point_case() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 0, 1, 0];
        // Part 0: |{0,1}| / |{0,1,3}| = 2/3; part 1: 1/2.
        let want = (2.0 / 3.0 + 0.5) / 2.0;
        assert!((shape_iou(&pred, &truth, 2) - want).abs() < 1e-15);
        assert_eq!(shape_iou(&pred, &truth, 2), brute_iou(&pred, &truth));
    }

    #[test]
    fn absent_part_counts_as_one() {
        assert_eq!(shape_iou(&[0, 0], &[0, 0], 2), 1.0);
    }

    proptest! {
        #[test]
        fn iou_matches_brute_force(bits in proptest::collection::vec((0usize..2, 0usize..2), 4)) {
            let pred: Vec<usize> = bits.iter().map(|b| b.0).collect();
            let truth: Vec<usize> = bits.iter().map(|b| b.1).collect();
            prop_assert!((shape_iou(&pred, &truth, 2) - brute_iou(&pred, &truth)).abs() < 1e-15);
        }

        #[test]
        fn single_category_miou_is_bounded(ious in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let shapes: Vec<(usize, f64)> = ious.iter().map(|&v| (0, v)).collect();
            let (inst, class, _) = miou(&shapes, 1);
            let lo = ious.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(inst >= lo - 1e-12 && inst <= hi + 1e-12);
            prop_assert!((0.0..=1.0).contains(&class));
        }
    }
}
