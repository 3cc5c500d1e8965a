use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{argmax_classes, LabelMap, Scalar, Tensor};

/// Partition of the pixel grid into correctly (`P^T`) and wrongly (`P^F`)
/// classified pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelSplit {
    correct: Vec<bool>,
    n_correct: usize,
}

impl PixelSplit {
    pub fn from_mask(correct: Vec<bool>) -> Self {
        let n_correct = correct.iter().filter(|&&c| c).count();
        Self { correct, n_correct }
    }

    pub fn correct_mask(&self) -> &[bool] {
        &self.correct
    }

    pub fn wrong_mask(&self) -> Vec<bool> {
        self.correct.iter().map(|&c| !c).collect()
    }

    pub fn correct_count(&self) -> usize {
        self.n_correct
    }

    pub fn wrong_count(&self) -> usize {
        self.correct.len() - self.n_correct
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    pub fn mis_ratio(&self) -> f64 {
        self.wrong_count() as f64 / self.len() as f64
    }
}

/// Pixel `i` is in `P^T` iff the argmax of its logits (lowest index on ties)
/// equals its label.
pub fn split_pixels<F: Scalar>(logits: &Tensor<F>, labels: &LabelMap) -> Result<PixelSplit> {
    let (_, h, w) = logits.dims3()?;
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::shape(format!(
            "labels are {}x{} but logits are {h}x{w}",
            labels.height(),
            labels.width()
        )));
    }
    let pred = argmax_classes(logits)?;
    Ok(PixelSplit::from_mask(
        pred.iter()
            .zip(labels.data())
            .map(|(&p, &l)| p == usize::from(l))
            .collect(),
    ))
}

/// `((1-λ)·Σ_{P^T} L_j + λ·Σ_{P^F} L_k) / (H·W)` with the split held constant.
pub fn weighted_seg_loss<F: Scalar>(
    g: &mut Graph<F>,
    perpixel: Var,
    split: &PixelSplit,
    lambda: f64,
) -> Result<Var> {
    if g.value(perpixel).numel() != split.len() {
        return Err(Error::shape(format!(
            "loss map has {} pixels, split has {}",
            g.value(perpixel).numel(),
            split.len()
        )));
    }
    let (wt, wf) = (F::lit(1.0 - lambda), F::lit(lambda));
    let coeffs = split
        .correct_mask()
        .iter()
        .map(|&c| if c { wt } else { wf })
        .collect();
    g.weighted_mean(perpixel, coeffs)
}
