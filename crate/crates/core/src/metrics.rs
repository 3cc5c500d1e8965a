//! Segmentation metrics and per-iteration attack traces.

use std::io::Write;

use crate::attacks::PixelSplit;
use crate::error::{Error, Result};
use crate::tensor::{argmax_classes, LabelMap, Scalar, Tensor};

/// `M x M` pixel counts; entry `(a, b)` counts pixels labelled `a` predicted as `b`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the argmax predictions of `(M, H, W)` logits.
    pub fn accumulate<F: Scalar>(&mut self, logits: &Tensor<F>, labels: &LabelMap) -> Result<()> {
        let (m, h, w) = logits.dims3()?;
        if m != self.classes {
            return Err(Error::shape(format!(
                "logits have {m} classes, matrix has {}",
                self.classes
            )));
        }
        if (labels.height(), labels.width()) != (h, w) {
            return Err(Error::shape("logits and labels disagree on H x W"));
        }
        let pred = argmax_classes(logits)?;
        self.accumulate_predictions(&pred, labels)
    }

    pub fn accumulate_predictions(&mut self, pred: &[usize], labels: &LabelMap) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::shape("prediction and label counts differ"));
        }
        labels.check_classes(self.classes)?;
        for (&p, &l) in pred.iter().zip(labels.data()) {
            if p >= self.classes {
                return Err(Error::shape(format!("prediction {p} out of range")));
            }
            self.counts[usize::from(l) * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; associative and commutative, so per-image matrices
    /// can be reduced in any grouping.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merging matrices with different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both labels and predictions.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let diag = self.get(c, c);
                let row: u64 = (0..self.classes).map(|b| self.get(c, b)).sum();
                let col: u64 = (0..self.classes).map(|a| self.get(a, c)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a nonzero union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::EmptyConfusion);
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Fraction of misclassified pixels, `#P^F / (H * W)`.
pub fn mis_ratio<F: Scalar>(logits: &Tensor<F>, labels: &LabelMap) -> Result<f64> {
    let split = crate::attacks::split_pixels(logits, labels)?;
    Ok(split.mis_ratio())
}

/// Mean per-pixel loss over each side of a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDecomposition {
    pub t_loss: f64,
    pub f_loss: f64,
    /// `P^T` was empty, so `t_loss` is reported as 0.
    pub t_empty: bool,
    /// `P^F` was empty, so `f_loss` is reported as 0.
    pub f_empty: bool,
}

pub fn decompose_loss<F: Scalar>(perpixel: &[F], split: &PixelSplit) -> Result<LossDecomposition> {
    if perpixel.len() != split.len() {
        return Err(Error::shape(format!(
            "{} losses for {} pixels",
            perpixel.len(),
            split.len()
        )));
    }
    let (mut st, mut sf) = (0.0f64, 0.0f64);
    for (&l, &ok) in perpixel.iter().zip(split.correct_mask()) {
        if ok {
            st += l.to_f64_lossless();
        } else {
            sf += l.to_f64_lossless();
        }
    }
    let (nt, nf) = (split.correct_count(), split.wrong_count());
    Ok(LossDecomposition {
        t_loss: st / nt.max(1) as f64,
        f_loss: sf / nf.max(1) as f64,
        t_empty: nt == 0,
        f_empty: nf == 0,
    })
}

/// One row of an attack trace: the state of the adversarial example after `t` steps.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    /// Step index; `-1` is the clean image before random initialization.
    pub t: i64,
    /// Loss weight of the step that produced this state (0 for `t <= 0`).
    pub lambda: f64,
    /// Mean per-pixel cross-entropy.
    pub total_loss: f64,
    pub t_loss: f64,
    pub f_loss: f64,
    pub posi_ratio: f64,
    pub t_empty: bool,
    pub f_empty: bool,
    /// `#P^T`, kept for the reconstruction identity.
    #[serde(skip)]
    pub correct: usize,
    #[serde(skip)]
    pub pixels: usize,
    #[serde(skip)]
    pub loss_sum: f64,
}

impl TraceRow {
    /// Builds a row from a per-pixel loss map and its split.
    pub fn record<F: Scalar>(
        t: i64,
        lambda: f64,
        perpixel: &[F],
        split: &PixelSplit,
    ) -> Result<Self> {
        let d = decompose_loss(perpixel, split)?;
        let mut sum = F::zero();
        for &l in perpixel {
            sum = sum + l;
        }
        let total = sum / F::lit(perpixel.len() as f64);
        Ok(Self {
            t,
            lambda,
            total_loss: total.to_f64_lossless(),
            t_loss: d.t_loss,
            f_loss: d.f_loss,
            posi_ratio: 1.0 - split.mis_ratio(),
            t_empty: d.t_empty,
            f_empty: d.f_empty,
            correct: split.correct_count(),
            pixels: split.len(),
            loss_sum: sum.to_f64_lossless(),
        })
    }

    pub fn mis_ratio(&self) -> f64 {
        1.0 - self.posi_ratio
    }

    /// Relative gap in `TLoss·#P^T + FLoss·#P^F = H·W · total_loss`.
    pub fn reconstruction_error(&self) -> f64 {
        let nt = self.correct as f64;
        let nf = (self.pixels - self.correct) as f64;
        let lhs = self.t_loss * nt + self.f_loss * nf;
        let rhs = self.total_loss * self.pixels as f64;
        (lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE)
    }
}

/// Per-iteration record of an attack run.
///
/// `rows[0]` is the state after random initialization, `rows[t]` the state
/// after step `t`; `pre_init` is the clean image.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackTrace {
    pub pre_init: TraceRow,
    pub rows: Vec<TraceRow>,
}

pub const TRACE_COLUMNS: [&str; 8] = [
    "t",
    "lambda",
    "total_loss",
    "t_loss",
    "f_loss",
    "posi_ratio",
    "t_empty",
    "f_empty",
];

impl AttackTrace {
    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().unwrap_or(&self.pre_init)
    }

    /// Writes the trace as CSV, pre-init row first (`t = -1`).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_COLUMNS)?;
        for r in std::iter::once(&self.pre_init).chain(&self.rows) {
            w.write_record([
                r.t.to_string(),
                r.lambda.to_string(),
                r.total_loss.to_string(),
                r.t_loss.to_string(),
                r.f_loss.to_string(),
                r.posi_ratio.to_string(),
                u8::from(r.t_empty).to_string(),
                u8::from(r.f_empty).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::split_pixels;
    use rand::Rng;

    fn cm(classes: usize, counts: &[u64]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(classes, counts.to_vec()).unwrap()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let mut c = ConfusionMatrix::new(3);
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        c.accumulate_predictions(&[0, 1, 2, 1], &labels).unwrap();
        assert_eq!(c.counts(), &[1, 0, 0, 0, 2, 0, 0, 0, 1]);
        assert_eq!(c.miou().unwrap(), 1.0);
    }

    #[test]
    fn all_class_zero_predictions_fill_column_zero() {
        let mut c = ConfusionMatrix::new(3);
        let labels = LabelMap::new(1, 4, vec![0, 1, 2, 2]).unwrap();
        let logits = Tensor::<f32>::zeros(vec![3, 1, 4]);
        c.accumulate(&logits, &labels).unwrap();
        assert_eq!(c.counts(), &[1, 0, 0, 1, 0, 0, 2, 0, 0]);
    }

    #[test]
    fn miou_reference_values() {
        assert_eq!(cm(2, &[10, 0, 0, 10]).miou().unwrap(), 1.0);
        assert_eq!(cm(2, &[0, 5, 7, 0]).miou().unwrap(), 0.0);
        let v = cm(2, &[3, 1, 2, 4]).miou().unwrap();
        assert!((v - (3.0 / 6.0 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
        assert!((v - 0.5357).abs() < 5e-5);
    }

    #[test]
    fn zero_union_classes_excluded() {
        // class 2 never appears
        let v = cm(3, &[3, 1, 0, 2, 4, 0, 0, 0, 0]).miou().unwrap();
        assert!((v - (3.0 / 6.0 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(ConfusionMatrix::new(4).miou(), Err(Error::EmptyConfusion)));
    }

    #[test]
    fn accumulate_rejects_bad_labels() {
        let mut c = ConfusionMatrix::new(2);
        let labels = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        assert!(c.accumulate_predictions(&[0, 1], &labels).is_err());
    }

    #[test]
    fn mis_ratio_extremes_and_identity() {
        let labels = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let onehot = Tensor::<f64>::new(vec![2, 1, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(mis_ratio(&onehot, &labels).unwrap(), 0.0);
        let flipped = Tensor::<f64>::new(vec![2, 1, 3], vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(mis_ratio(&flipped, &labels).unwrap(), 1.0);

        let mut r = crate::rng::stream(3, 0);
        for _ in 0..50 {
            let z = Tensor::<f64>::new(vec![3, 2, 3], (0..18).map(|_| r.random()).collect()).unwrap();
            let l = LabelMap::new(2, 3, (0..6).map(|_| r.random_range(0..3)).collect()).unwrap();
            let s = split_pixels(&z, &l).unwrap();
            assert_eq!(
                mis_ratio(&z, &l).unwrap(),
                (6 - s.correct_count()) as f64 / 6.0
            );
        }
    }

    #[test]
    fn decomposition_cases() {
        let labels = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let all_correct = Tensor::<f64>::new(
            vec![2, 2, 2],
            vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let split = split_pixels(&all_correct, &labels).unwrap();
        let d = decompose_loss(&[0.1, 0.2, 0.3, 0.4], &split).unwrap();
        assert_eq!(d.f_loss, 0.0);
        assert!(d.f_empty && !d.t_empty);

        let d = decompose_loss(&[0.7; 4], &split).unwrap();
        assert_eq!(d.t_loss, 0.7);

        // pixels 0 and 3 correct
        let mixed = Tensor::<f64>::new(
            vec![2, 2, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let split = split_pixels(&mixed, &labels).unwrap();
        let losses = [1.0, 2.0, 3.0, 4.0];
        let d = decompose_loss(&losses, &split).unwrap();
        assert_eq!(d.t_loss, (1.0 + 4.0) / 2.0);
        assert_eq!(d.f_loss, (2.0 + 3.0) / 2.0);
        let row = TraceRow::record(1, 0.0, &losses, &split).unwrap();
        assert!(row.reconstruction_error() < 1e-15);
        assert_eq!(row.posi_ratio, 0.5);
    }

    #[test]
    fn trace_csv_header_and_rows() {
        let split = PixelSplit::from_mask(vec![true, false]);
        let row = TraceRow::record(0, 0.0, &[0.5f64, 1.5], &split).unwrap();
        let pre = TraceRow { t: -1, ..row };
        let trace = AttackTrace {
            pre_init: pre,
            rows: vec![row],
        };
        let s = trace.to_csv_string().unwrap();
        let mut lines = s.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,lambda,total_loss,t_loss,f_loss,posi_ratio,t_empty,f_empty"
        );
        assert_eq!(lines.next().unwrap(), "-1,0,1,0.5,1.5,0.5,0,0");
        assert_eq!(lines.next().unwrap(), "0,0,1,0.5,1.5,0.5,0,0");
    }
}
