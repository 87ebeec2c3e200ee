//! Segmentation quality and cross-domain transfer accounting.
//!
//! The unit of measurement is a [`ConfusionMatrix`] accumulated over one
//! (model snapshot, evaluation set) pair: rows are ground-truth classes,
//! columns are predictions, ignore-labeled pixels are skipped. Per-class IoU
//! is `tp / (tp + fn + fp)`; classes whose union is empty (never labeled and
//! never predicted) are excluded from the mean rather than counted as zeros.
//!
//! A [`TransferMatrix`] collects mean IoU per domain at successive training
//! stages: `rows[i][j]` is performance on domain `j` right after the stream
//! finished domain `i` — including `j > i`, domains not yet trained on.
//! [`transfer_stats`] reduces it to the standard summary numbers:
//!
//! * immediate accuracy: the diagonal, each domain measured right after its
//!   own data ends;
//! * backward transfer per earlier domain: final-stage score minus the
//!   immediate score, negative when the model forgot;
//! * forward transfer per later domain: its immediate score minus its score
//!   one stage earlier, positive when prior domains prepared the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{MaskTensor, IGNORE_INDEX};

/// Ground-truth-by-prediction pixel counts for one evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major `num_classes x num_classes`; row = truth, column = guess.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, guess: usize) -> u64 {
        self.counts[truth * self.num_classes + guess]
    }

    /// Total counted pixels (ignore-labeled ones never enter).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one mask pair. Shapes must match; ignore-labeled truth pixels
    /// are skipped; any other id outside the class range is a data error.
    pub fn accumulate(&mut self, truth: &MaskTensor, guess: &MaskTensor) -> Result<()> {
        if truth.shape() != guess.shape() {
            return Err(Error::data(format!(
                "confusion accumulate: truth shape {:?} vs prediction shape {:?}",
                truth.shape(),
                guess.shape()
            )));
        }
        let c = self.num_classes;
        for (t, g) in truth.values().iter().zip(guess.values()) {
            if *t == IGNORE_INDEX {
                continue;
            }
            let (t, g) = (usize::from(*t), usize::from(*g));
            if t >= c || g >= c {
                return Err(Error::data(format!(
                    "confusion accumulate: ids ({t}, {g}) outside {c} classes"
                )));
            }
            self.counts[t * c + g] += 1;
        }
        Ok(())
    }

    /// Add another matrix over the same class count into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::data(format!(
                "confusion merge: {} vs {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` marks a class with empty union (neither labeled
    /// nor predicted), which the mean must skip.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let row: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
                let col: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
                let union = row + col - tp;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with non-empty union; `None` when no class has
    /// any support at all.
    pub fn miou(&self) -> Option<f64> {
        let per = self.per_class_iou();
        let present: Vec<f64> = per.into_iter().flatten().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }
}

/// Mean-IoU-per-domain at successive training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    domains: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl TransferMatrix {
    /// Build and validate: square over the domain list, entries finite and
    /// in `[0, 1]`.
    pub fn new(domains: Vec<String>, rows: Vec<Vec<f64>>) -> Result<TransferMatrix> {
        let n = domains.len();
        if n == 0 || rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::data(format!(
                "transfer matrix must be square over {n} domains"
            )));
        }
        for row in &rows {
            for v in row {
                if !v.is_finite() || !(0.0..=1.0).contains(v) {
                    return Err(Error::data(format!(
                        "transfer matrix entry {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(TransferMatrix { domains, rows })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Score on domain `domain` after training stage `stage`.
    pub fn get(&self, stage: usize, domain: usize) -> f64 {
        self.rows[stage][domain]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// One domain's trajectory across all stages.
    pub fn column(&self, domain: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[domain]).collect()
    }
}

/// Summary statistics reduced from a [`TransferMatrix`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    /// Diagonal: each domain right after its own stage.
    pub immediate: Vec<f64>,
    /// Last row: each domain after the whole stream.
    pub final_row: Vec<f64>,
    /// Per earlier domain `j < n-1`: `final[j] - immediate[j]`.
    pub backward: Vec<f64>,
    /// Per later domain `j >= 1`: `immediate[j] - rows[j-1][j]`.
    pub forward: Vec<f64>,
    pub mean_immediate: f64,
    pub mean_final: f64,
    /// Mean of `backward`; 0 for a single-domain stream.
    pub mean_backward: f64,
    /// Mean of `forward`; 0 for a single-domain stream.
    pub mean_forward: f64,
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Reduce a transfer matrix to its summary statistics.
pub fn transfer_stats(m: &TransferMatrix) -> TransferStats {
    let n = m.len();
    let immediate: Vec<f64> = (0..n).map(|j| m.get(j, j)).collect();
    let final_row: Vec<f64> = (0..n).map(|j| m.get(n - 1, j)).collect();
    let backward: Vec<f64> = (0..n.saturating_sub(1))
        .map(|j| final_row[j] - immediate[j])
        .collect();
    let forward: Vec<f64> = (1..n).map(|j| m.get(j, j) - m.get(j - 1, j)).collect();
    TransferStats {
        mean_immediate: mean_or_zero(&immediate),
        mean_final: mean_or_zero(&final_row),
        mean_backward: mean_or_zero(&backward),
        mean_forward: mean_or_zero(&forward),
        immediate,
        final_row,
        backward,
        forward,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mask(values: &[u8]) -> MaskTensor {
        MaskTensor::from_values(&[values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_confusion_and_iou() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(
            &mask(&[0, 0, 1, 1, IGNORE_INDEX, 2]),
            &mask(&[0, 1, 1, 1, 0, 2]),
        )
        .unwrap();
        assert_eq!(cm.total(), 5); // the ignore pixel never lands
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(2, 2), 1);

        let iou = cm.per_class_iou();
        // class 0: tp=1, row=2, col=1 -> 1 / (2 + 1 - 1) = 1/2
        assert_abs_diff_eq!(iou[0].unwrap(), 0.5, epsilon = 1e-12);
        // class 1: tp=2, row=2, col=3 -> 2 / (2 + 3 - 2) = 2/3
        assert_abs_diff_eq!(iou[1].unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        // class 2: tp=1, union=1 -> 1
        assert_abs_diff_eq!(iou[2].unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            cm.miou().unwrap(),
            (0.5 + 2.0 / 3.0 + 1.0) / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn absent_classes_are_excluded_but_false_positives_count() {
        let mut cm = ConfusionMatrix::new(4);
        // Classes 0 and 1 appear; class 2 is only ever predicted (false
        // positive); class 3 never appears at all.
        cm.accumulate(&mask(&[0, 0, 1]), &mask(&[0, 2, 1])).unwrap();
        let iou = cm.per_class_iou();
        assert_abs_diff_eq!(iou[0].unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(iou[1].unwrap(), 1.0, epsilon = 1e-12);
        // Predicted-but-never-true has union > 0 and must drag the mean as 0.
        assert_eq!(iou[2], Some(0.0));
        // Truly absent is excluded, not counted as zero.
        assert_eq!(iou[3], None);
        assert_abs_diff_eq!(cm.miou().unwrap(), 1.5 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_matrix_has_no_miou() {
        let cm = ConfusionMatrix::new(5);
        assert_eq!(cm.miou(), None);
        let mut cm2 = ConfusionMatrix::new(5);
        cm2.accumulate(&mask(&[IGNORE_INDEX, IGNORE_INDEX]), &mask(&[0, 1]))
            .unwrap();
        assert_eq!(cm2.miou(), None);
    }

    #[test]
    fn merge_matches_joint_accumulation() {
        let (t1, g1) = (mask(&[0, 1, 2, 1]), mask(&[0, 1, 1, 1]));
        let (t2, g2) = (mask(&[2, 2, 0]), mask(&[2, 0, 0]));
        let mut split_a = ConfusionMatrix::new(3);
        split_a.accumulate(&t1, &g1).unwrap();
        let mut split_b = ConfusionMatrix::new(3);
        split_b.accumulate(&t2, &g2).unwrap();
        split_a.merge(&split_b).unwrap();

        let mut joint = ConfusionMatrix::new(3);
        joint.accumulate(&t1, &g1).unwrap();
        joint.accumulate(&t2, &g2).unwrap();
        assert_eq!(split_a, joint);
    }

    #[test]
    fn shape_and_range_errors() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&mask(&[0, 1]), &mask(&[0])),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            cm.accumulate(&mask(&[2]), &mask(&[0])),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            cm.accumulate(&mask(&[0]), &mask(&[2])),
            Err(Error::Data(_))
        ));
        let other = ConfusionMatrix::new(3);
        assert!(matches!(cm.merge(&other), Err(Error::Data(_))));
    }

    proptest! {
        /// Relabeling classes by a permutation permutes per-class IoU and
        /// leaves the mean unchanged.
        #[test]
        fn miou_is_permutation_invariant(
            pairs in proptest::collection::vec((0u8..5, 0u8..5), 1..200),
            perm_seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<u8> = (0..5).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            perm.shuffle(&mut rng);

            let truth: Vec<u8> = pairs.iter().map(|(t, _)| *t).collect();
            let guess: Vec<u8> = pairs.iter().map(|(_, g)| *g).collect();
            let mut cm = ConfusionMatrix::new(5);
            cm.accumulate(&mask(&truth), &mask(&guess)).unwrap();

            let ptruth: Vec<u8> = truth.iter().map(|t| perm[usize::from(*t)]).collect();
            let pguess: Vec<u8> = guess.iter().map(|g| perm[usize::from(*g)]).collect();
            let mut pcm = ConfusionMatrix::new(5);
            pcm.accumulate(&mask(&ptruth), &mask(&pguess)).unwrap();

            let iou = cm.per_class_iou();
            let piou = pcm.per_class_iou();
            for c in 0..5 {
                prop_assert_eq!(iou[c], piou[usize::from(perm[c])]);
            }
            match (cm.miou(), pcm.miou()) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn two_domain_transfer_example() {
        let m = TransferMatrix::new(names(2), vec![vec![0.5, 0.2], vec![0.4, 0.6]]).unwrap();
        let s = transfer_stats(&m);
        assert_eq!(s.immediate, vec![0.5, 0.6]);
        assert_eq!(s.final_row, vec![0.4, 0.6]);
        assert_eq!(s.backward.len(), 1);
        assert_abs_diff_eq!(s.backward[0], -0.1, epsilon = 1e-12);
        assert_eq!(s.forward.len(), 1);
        assert_abs_diff_eq!(s.forward[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_backward, -0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_forward, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_final, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn three_domain_transfer_by_hand() {
        let rows = vec![
            vec![0.60, 0.30, 0.20],
            vec![0.45, 0.70, 0.35],
            vec![0.40, 0.50, 0.65],
        ];
        let m = TransferMatrix::new(names(3), rows).unwrap();
        let s = transfer_stats(&m);
        // backward: final minus immediate for the first two domains.
        assert_abs_diff_eq!(s.backward[0], 0.40 - 0.60, epsilon = 1e-12);
        assert_abs_diff_eq!(s.backward[1], 0.50 - 0.70, epsilon = 1e-12);
        // forward: immediate minus the stage-before score.
        assert_abs_diff_eq!(s.forward[0], 0.70 - 0.30, epsilon = 1e-12);
        assert_abs_diff_eq!(s.forward[1], 0.65 - 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_backward, -0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean_forward, 0.35, epsilon = 1e-12);
        assert_eq!(m.column(0), vec![0.60, 0.45, 0.40]);
    }

    #[test]
    fn single_domain_stream_has_empty_transfer_terms() {
        let m = TransferMatrix::new(names(1), vec![vec![0.5]]).unwrap();
        let s = transfer_stats(&m);
        assert!(s.backward.is_empty());
        assert!(s.forward.is_empty());
        assert_eq!(s.mean_backward, 0.0);
        assert_eq!(s.mean_forward, 0.0);
        assert_eq!(s.mean_final, 0.5);
    }

    #[test]
    fn transfer_matrix_validation() {
        assert!(TransferMatrix::new(names(2), vec![vec![0.5, 0.2]]).is_err());
        assert!(TransferMatrix::new(names(2), vec![vec![0.5], vec![0.4]]).is_err());
        assert!(TransferMatrix::new(names(1), vec![vec![1.5]]).is_err());
        assert!(TransferMatrix::new(names(1), vec![vec![f64::NAN]]).is_err());
        assert!(TransferMatrix::new(vec![], vec![]).is_err());
    }
}
