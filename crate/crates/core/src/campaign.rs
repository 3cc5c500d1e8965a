//! Attack campaigns over a set of images: white-box evaluation and transfer.
//!
//! Work is spread over the current rayon pool; outputs are always ordered by
//! sample index. Image `i` is attacked with seed `derive_seed(cfg.seed, i)`.

use rayon::prelude::*;

use crate::attacks::{run_attack, AttackConfig, AttackKind};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::metrics::{mis_ratio, AttackTrace, ConfusionMatrix};
use crate::model::Segmenter;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Per-image outcome. Confusion counts are stored so that summaries can be
/// rebuilt exactly from these records alone.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub clean_mis_ratio: f64,
    pub adv_mis_ratio: f64,
    pub clean_counts: Vec<u64>,
    pub adv_counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub images: usize,
    pub clean_miou: f64,
    pub adv_miou: f64,
    pub clean_mis_ratio: f64,
    pub adv_mis_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct CampaignOutput {
    pub images: Vec<ImageResult>,
    /// Present when traces were requested; one per image, same order.
    pub traces: Option<Vec<AttackTrace>>,
}

impl CampaignOutput {
    pub fn summary(&self, classes: usize) -> Result<Summary> {
        summarize(classes, &self.images)
    }
}

/// Aggregates per-image records: dataset-level confusion matrices for mIoU and
/// the arithmetic mean of per-image mis-ratios, both in index order.
pub fn summarize(classes: usize, images: &[ImageResult]) -> Result<Summary> {
    if images.is_empty() {
        return Err(Error::EmptyConfusion);
    }
    let mut clean = ConfusionMatrix::new(classes);
    let mut adv = ConfusionMatrix::new(classes);
    let (mut cm, mut am) = (0.0, 0.0);
    for r in images {
        clean.merge(&ConfusionMatrix::from_counts(classes, r.clean_counts.clone())?)?;
        adv.merge(&ConfusionMatrix::from_counts(classes, r.adv_counts.clone())?)?;
        cm += r.clean_mis_ratio;
        am += r.adv_mis_ratio;
    }
    let n = images.len() as f64;
    Ok(Summary {
        images: images.len(),
        clean_miou: clean.miou()?,
        adv_miou: adv.miou()?,
        clean_mis_ratio: cm / n,
        adv_mis_ratio: am / n,
    })
}

/// Clean-input confusion matrix of `model` over `samples`.
pub fn evaluate_clean<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    samples: &[SegSample],
) -> Result<ConfusionMatrix> {
    let parts: Vec<ConfusionMatrix> = samples
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(model.classes());
            cm.accumulate(&model.predict(&s.image.cast())?, &s.labels)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(model.classes());
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total)
}

/// White-box campaign: attack and evaluate on the same model.
pub fn run_campaign<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    samples: &[SegSample],
    kind: AttackKind,
    cfg: &AttackConfig,
    keep_traces: bool,
) -> Result<CampaignOutput> {
    run_transfer(model, model, samples, kind, cfg, keep_traces)
}

/// Crafts adversarial examples on `source` and scores them on `target`.
pub fn run_transfer<F, S, T>(
    source: &S,
    target: &T,
    samples: &[SegSample],
    kind: AttackKind,
    cfg: &AttackConfig,
    keep_traces: bool,
) -> Result<CampaignOutput>
where
    F: Scalar,
    S: Segmenter<F> + ?Sized,
    T: Segmenter<F> + ?Sized,
{
    if source.in_channels() != target.in_channels() || source.classes() != target.classes() {
        return Err(Error::config(format!(
            "source model (C={}, M={}) and target model (C={}, M={}) are incompatible",
            source.in_channels(),
            source.classes(),
            target.in_channels(),
            target.classes()
        )));
    }
    let classes = target.classes();
    let per_image: Vec<(ImageResult, AttackTrace)> = samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let image: Tensor<F> = s.image.cast();
            let cfg = AttackConfig {
                seed: rng::derive_seed(cfg.seed, index as u64),
                ..*cfg
            };
            let adv = run_attack(kind, source, &image, &s.labels, &cfg)?;
            let clean_logits = target.predict(&image)?;
            let adv_logits = target.predict(&adv.adversarial)?;
            let mut clean_cm = ConfusionMatrix::new(classes);
            clean_cm.accumulate(&clean_logits, &s.labels)?;
            let mut adv_cm = ConfusionMatrix::new(classes);
            adv_cm.accumulate(&adv_logits, &s.labels)?;
            let result = ImageResult {
                index,
                clean_mis_ratio: mis_ratio(&clean_logits, &s.labels)?,
                adv_mis_ratio: mis_ratio(&adv_logits, &s.labels)?,
                clean_counts: clean_cm.counts().to_vec(),
                adv_counts: adv_cm.counts().to_vec(),
            };
            Ok((result, adv.trace))
        })
        .collect::<Result<_>>()?;
    let (images, traces): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
    Ok(CampaignOutput {
        images,
        traces: keep_traces.then_some(traces),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, ShapesConfig};
    use crate::model::{build_model, Arch};

    fn data(n: usize) -> Vec<SegSample> {
        gen_dataset(&ShapesConfig { train: 0, val: n, ..ShapesConfig::default() }).unwrap()
    }

    fn cfg(t: usize) -> AttackConfig {
        AttackConfig { iterations: t, ..AttackConfig::default() }
    }

    #[test]
    fn transfer_to_self_equals_campaign() {
        let m = build_model::<f32>(Arch::MiniSegNet, 3, 4, 1).unwrap();
        let d = data(3);
        let a = run_campaign(&m, &d, AttackKind::SegPgd, &cfg(3), false).unwrap();
        let b = run_transfer(&m, &m.clone(), &d, AttackKind::SegPgd, &cfg(3), false).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn summary_matches_direct_evaluation() {
        let m = build_model::<f32>(Arch::PyramidLite, 3, 4, 1).unwrap();
        let d = data(4);
        let out = run_campaign(&m, &d, AttackKind::Pgd, &cfg(2), true).unwrap();
        assert_eq!(out.traces.as_ref().unwrap().len(), 4);
        let s = out.summary(4).unwrap();
        assert_eq!(s.clean_miou, evaluate_clean(&m, &d).unwrap().miou().unwrap());
        let again = summarize(4, &out.images).unwrap();
        assert_eq!(s, again);
        assert!(out.images.iter().enumerate().all(|(i, r)| r.index == i));
    }

    #[test]
    fn mismatched_models_rejected() {
        let a = build_model::<f32>(Arch::MiniSegNet, 3, 4, 1).unwrap();
        let b = build_model::<f32>(Arch::MiniSegNet, 3, 5, 1).unwrap();
        let err = run_transfer(&a, &b, &data(1), AttackKind::Pgd, &cfg(1), false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_summary_is_an_error() {
        assert!(summarize(4, &[]).is_err());
    }
}
