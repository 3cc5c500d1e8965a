//! Standard and adversarial training with SGD + momentum.
//!
//! Each optimizer step takes a mini-batch and splits it by position into a
//! first half (always clean) and a second half. In adversarial modes the second
//! half is replaced by attack outputs generated against the current parameters;
//! the step minimizes `L(first half) + L(second half)` where each `L` is the
//! mean per-pixel cross-entropy over that half. Standard training uses the same
//! objective with a clean second half, so an attack with zero steps and no
//! random start reproduces standard training exactly.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attacks::{run_attack, AttackConfig, AttackKind, Norm, Schedule};
use crate::checkpoint::TrainingMode;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::SegModel;
use crate::rng;
use crate::tensor::{LabelMap, Scalar, Tensor};

/// Attack settings used to craft the adversarial half of each batch.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrainAttack {
    pub iterations: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub random_init: bool,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
}

fn default_epsilon() -> f64 {
    crate::attacks::DEFAULT_EPSILON
}
fn default_alpha() -> f64 {
    crate::attacks::DEFAULT_ALPHA
}
fn default_true() -> bool {
    true
}
fn default_schedule() -> Schedule {
    Schedule::Linear
}

impl Default for AdvTrainAttack {
    fn default() -> Self {
        Self {
            iterations: 3,
            epsilon: default_epsilon(),
            alpha: default_alpha(),
            random_init: true,
            schedule: Schedule::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub mode: TrainingMode,
    #[serde(default)]
    pub attack: AdvTrainAttack,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            mode: TrainingMode::Standard,
            attack: AdvTrainAttack::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("training needs at least one iteration"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.mode.is_adversarial() && !self.batch_size.is_multiple_of(2) {
            return Err(Error::config("adversarial training needs an even batch size"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.mode.is_adversarial() {
            self.attack_config(0).check_ranges()?;
        }
        Ok(())
    }

    fn attack_kind(&self) -> Option<AttackKind> {
        match self.mode {
            TrainingMode::Standard => None,
            TrainingMode::PgdAt => Some(AttackKind::Pgd),
            TrainingMode::SegPgdAt => Some(AttackKind::SegPgd),
        }
    }

    fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: self.attack.epsilon,
            alpha: self.attack.alpha,
            iterations: self.attack.iterations,
            schedule: self.attack.schedule,
            norm: Norm::Linf,
            random_init: self.attack.random_init,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub model: SegModel<F>,
    pub curve: Vec<LossPoint>,
}

pub fn write_loss_csv<W: Write>(curve: &[LossPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "clean_loss", "adv_loss"])?;
    for p in curve {
        w.write_record([
            p.iteration.to_string(),
            p.clean_loss.to_string(),
            p.adv_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Gradient of `mean_b L_b` over `half` w.r.t. every parameter (flat, layout
/// order), plus that loss. Each image gets its own graph.
pub fn half_gradient<F: Scalar>(
    model: &SegModel<F>,
    half: &[(&Tensor<F>, &LabelMap)],
) -> Result<(Vec<F>, f64)> {
    let n = model.param_count();
    if half.is_empty() {
        return Ok((vec![F::zero(); n], 0.0));
    }
    let weight = F::lit(1.0 / half.len() as f64);
    let per_image: Vec<(Vec<F>, F)> = half
        .par_iter()
        .map(|(image, labels)| {
            let mut g = Graph::new();
            let x = g.constant((*image).clone());
            let (logits, params) = model.forward_trainable(&mut g, x)?;
            let ce = g.pixel_softmax_ce(logits, labels)?;
            let loss = g.mean(ce);
            let scaled = g.scale(loss, weight);
            g.backward(scaled)?;
            let mut flat = Vec::with_capacity(n);
            for p in params {
                flat.extend_from_slice(g.grad(p).expect("parameters are tracked"));
            }
            Ok((flat, g.value(loss).data()[0]))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![F::zero(); n];
    let mut loss = 0.0;
    for (g, l) in per_image {
        for (a, d) in grad.iter_mut().zip(g) {
            *a = *a + d;
        }
        loss += l.to_f64_lossless();
    }
    Ok((grad, loss / half.len() as f64))
}

/// Gradient of `L(first) + L(second)` as the sum of the two half gradients.
pub fn batch_gradient<F: Scalar>(
    model: &SegModel<F>,
    first: &[(&Tensor<F>, &LabelMap)],
    second: &[(&Tensor<F>, &LabelMap)],
) -> Result<(Vec<F>, f64, f64)> {
    let (mut g1, l1) = half_gradient(model, first)?;
    let (g2, l2) = half_gradient(model, second)?;
    for (a, b) in g1.iter_mut().zip(g2) {
        *a = *a + b;
    }
    Ok((g1, l1, l2))
}

/// Deterministic shuffled mini-batch stream over `0..len`.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut r = rng::stream(self.seed, 1 << 32 | self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut r);
        self.cursor = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Trains with the objective described at module level; `cfg.mode` selects
/// whether the second half of each batch is attacked.
pub fn train<F: Scalar>(
    model: &SegModel<F>,
    dataset: &[SegSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    train_unchecked(model, dataset, cfg)
}

pub fn train_standard<F: Scalar>(
    model: &SegModel<F>,
    dataset: &[SegSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    if cfg.mode != TrainingMode::Standard {
        return Err(Error::config("train_standard called with an adversarial mode"));
    }
    train(model, dataset, cfg)
}

pub fn train_adversarial<F: Scalar>(
    model: &SegModel<F>,
    dataset: &[SegSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    if !cfg.mode.is_adversarial() {
        return Err(Error::config("train_adversarial needs mode pgd-at or segpgd-at"));
    }
    cfg.validate()?;
    train_unchecked(model, dataset, cfg)
}

fn train_unchecked<F: Scalar>(
    model: &SegModel<F>,
    dataset: &[SegSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let images: Vec<Tensor<F>> = dataset.iter().map(|s| s.image.cast()).collect();
    let mut model = model.clone();
    let mut params = model.flat_params();
    let mut velocity = vec![F::zero(); params.len()];
    let (lr, mu) = (F::lit(cfg.learning_rate), F::lit(cfg.momentum));
    let mut sampler = BatchSampler::new(dataset.len(), cfg.seed);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let split = cfg.batch_size / 2;

    for it in 0..cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size);
        let (first_idx, second_idx) = batch.split_at(split);

        let adversarial: Option<Vec<Tensor<F>>> = match cfg.attack_kind() {
            None => None,
            Some(kind) => Some(
                second_idx
                    .par_iter()
                    .enumerate()
                    .map(|(pos, &i)| {
                        let seed = rng::derive_seed(cfg.seed, (it * cfg.batch_size + split + pos) as u64);
                        let acfg = cfg.attack_config(seed);
                        run_attack(kind, &model, &images[i], &dataset[i].labels, &acfg)
                            .map(|r| r.adversarial)
                    })
                    .collect::<Result<_>>()?,
            ),
        };

        let first: Vec<_> = first_idx.iter().map(|&i| (&images[i], &dataset[i].labels)).collect();
        let second: Vec<_> = match &adversarial {
            Some(adv) => adv.iter().zip(second_idx).map(|(x, &i)| (x, &dataset[i].labels)).collect(),
            None => second_idx.iter().map(|&i| (&images[i], &dataset[i].labels)).collect(),
        };
        let (grad, clean_loss, adv_loss) = batch_gradient(&model, &first, &second)?;
        if !(clean_loss + adv_loss).is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(it));
        }
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = mu * *v + *g;
            *p = *p - lr * *v;
        }
        model.set_flat_params(&params)?;
        curve.push(LossPoint {
            iteration: it,
            clean_loss,
            adv_loss,
        });
    }
    Ok(TrainOutcome { model, curve })
}
