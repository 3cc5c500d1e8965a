//! White-box attacks on segmentation models.
//!
//! Every attack is an instance of one loop: predict on the current adversarial
//! example, build a loss from the per-pixel cross-entropy map, take a gradient
//! step on the image, project back into the perturbation set and the valid
//! image range. What differs is the loss and the step:
//!
//! | attack | loss | step |
//! |---|---|---|
//! | PGD / FGSM | mean CE | `α·sign(∇)` |
//! | SegPGD / SegFGSM / DAG | `(1-λ)` on correct, `λ` on wrong pixels | `α·sign(∇)` |
//! | l2-BIM | mean CE | `α₂·∇/‖∇‖₂` |
//!
//! The pixel split is recomputed from the current iterate at every step and
//! enters the loss as a constant.

mod projection;
mod schedule;
mod split;

use rand::Rng;

pub use projection::{clip_valid, project_linf};
pub use schedule::{lambda_schedule, Schedule};
pub use split::{split_pixels, weighted_seg_loss, PixelSplit};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{AttackTrace, TraceRow};
use crate::model::Segmenter;
use crate::rng;
use crate::tensor::{LabelMap, Scalar, Tensor};
use projection::{clip_valid_in_place, l2_norm, project_l2_in_place, project_linf_in_place};

/// Default l∞ radius, 8/255.
pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
/// Default multi-step size.
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// l∞ radius in image units.
    pub epsilon: f64,
    /// Step size in image units.
    pub alpha: f64,
    pub iterations: usize,
    pub schedule: Schedule,
    pub norm: Norm,
    pub random_init: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            iterations: 20,
            schedule: Schedule::Linear,
            norm: Norm::Linf,
            random_init: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("attack needs at least one iteration"));
        }
        self.check_ranges()
    }

    pub(crate) fn check_ranges(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon && self.epsilon <= 1.0) {
            return Err(Error::config(format!(
                "need 0 < alpha <= epsilon <= 1, got alpha={}, epsilon={}",
                self.alpha, self.epsilon
            )));
        }
        self.schedule.validate()
    }

    /// l2 radius for l2-BIM: `epsilon * sqrt(n) / 2` for an image of `n` elements.
    pub fn l2_radius(&self, numel: usize) -> f64 {
        self.epsilon * (numel as f64).sqrt() / 2.0
    }

    /// l2 step for l2-BIM, scaled like [`AttackConfig::l2_radius`].
    pub fn l2_step(&self, numel: usize) -> f64 {
        self.alpha * (numel as f64).sqrt() / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Pgd,
    #[serde(alias = "seg_pgd")]
    SegPgd,
    Fgsm,
    #[serde(alias = "seg_fgsm")]
    SegFgsm,
    /// SegPGD with `λ` fixed at 0.
    Dag,
    #[serde(rename = "bim_l2")]
    BimL2,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Pgd => "pgd",
            AttackKind::SegPgd => "segpgd",
            AttackKind::Fgsm => "fgsm",
            AttackKind::SegFgsm => "segfgsm",
            AttackKind::Dag => "dag",
            AttackKind::BimL2 => "bim_l2",
        }
    }

    pub fn is_single_step(self) -> bool {
        matches!(self, AttackKind::Fgsm | AttackKind::SegFgsm)
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "pgd" => AttackKind::Pgd,
            "segpgd" | "seg_pgd" => AttackKind::SegPgd,
            "fgsm" => AttackKind::Fgsm,
            "segfgsm" | "seg_fgsm" => AttackKind::SegFgsm,
            "dag" => AttackKind::Dag,
            "bim_l2" | "bim-l2" | "bim" => AttackKind::BimL2,
            other => return Err(Error::config(format!("unknown attack '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvResult<F> {
    pub adversarial: Tensor<F>,
    pub trace: AttackTrace,
    /// MisRatio of the final adversarial example.
    pub mis_ratio: f64,
}

#[derive(Clone, Copy, Debug)]
enum Objective {
    Mean,
    Weighted(Schedule),
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Sign,
    L2,
}

/// Called with `(t, iterate)` for the initial state (`t = 0`) and after every step.
pub type Observer<'a, F> = &'a mut dyn FnMut(usize, &Tensor<F>);

/// Runs `kind` with `cfg`, applying the per-kind conventions (FGSM variants use
/// one step of size `ε` without random init; DAG fixes `λ = 0`).
pub fn run_attack<F: Scalar, M: Segmenter<F> + ?Sized>(
    kind: AttackKind,
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    cfg: &AttackConfig,
) -> Result<AdvResult<F>> {
    run_attack_observed(kind, model, image, labels, cfg, &mut |_, _| {})
}

pub fn run_attack_observed<F: Scalar, M: Segmenter<F> + ?Sized>(
    kind: AttackKind,
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    cfg: &AttackConfig,
    observer: Observer<'_, F>,
) -> Result<AdvResult<F>> {
    let single = AttackConfig {
        alpha: cfg.epsilon,
        iterations: 1,
        random_init: false,
        ..*cfg
    };
    match kind {
        AttackKind::Pgd => {
            require_norm(cfg, Norm::Linf)?;
            iterate(model, image, labels, cfg, Objective::Mean, Step::Sign, observer)
        }
        AttackKind::SegPgd => {
            require_norm(cfg, Norm::Linf)?;
            let obj = Objective::Weighted(cfg.schedule);
            iterate(model, image, labels, cfg, obj, Step::Sign, observer)
        }
        AttackKind::Dag => {
            require_norm(cfg, Norm::Linf)?;
            let obj = Objective::Weighted(Schedule::Constant(0.0));
            iterate(model, image, labels, cfg, obj, Step::Sign, observer)
        }
        AttackKind::Fgsm => {
            iterate(model, image, labels, &single, Objective::Mean, Step::Sign, observer)
        }
        AttackKind::SegFgsm => {
            let obj = Objective::Weighted(Schedule::OnlyCorrect);
            iterate(model, image, labels, &single, obj, Step::Sign, observer)
        }
        AttackKind::BimL2 => {
            require_norm(cfg, Norm::L2)?;
            iterate(model, image, labels, cfg, Objective::Mean, Step::L2, observer)
        }
    }
}

fn require_norm(cfg: &AttackConfig, norm: Norm) -> Result<()> {
    if cfg.norm != norm {
        return Err(Error::config(format!(
            "attack requires norm {norm:?}, config has {:?}",
            cfg.norm
        )));
    }
    Ok(())
}

/// l∞ PGD on the mean per-pixel cross-entropy.
pub fn pgd<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    cfg: &AttackConfig,
) -> Result<AdvResult<F>> {
    run_attack(AttackKind::Pgd, model, image, labels, cfg)
}

/// SegPGD: l∞ PGD on the split-weighted loss with `λ(t)` from `cfg.schedule`.
pub fn seg_pgd<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    cfg: &AttackConfig,
) -> Result<AdvResult<F>> {
    run_attack(AttackKind::SegPgd, model, image, labels, cfg)
}

/// SegPGD with `λ = 0` throughout (dense adversary generation).
pub fn dag<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    cfg: &AttackConfig,
) -> Result<AdvResult<F>> {
    run_attack(AttackKind::Dag, model, image, labels, cfg)
}

fn single_step_cfg(epsilon: f64) -> AttackConfig {
    AttackConfig {
        epsilon,
        alpha: epsilon,
        iterations: 1,
        random_init: false,
        ..AttackConfig::default()
    }
}

pub fn fgsm<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    epsilon: f64,
) -> Result<AdvResult<F>> {
    run_attack(AttackKind::Fgsm, model, image, labels, &single_step_cfg(epsilon))
}

/// One sign step of size `ε` on the loss of correctly classified pixels only.
pub fn seg_fgsm<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    epsilon: f64,
) -> Result<AdvResult<F>> {
    run_attack(AttackKind::SegFgsm, model, image, labels, &single_step_cfg(epsilon))
}

/// Basic iterative method under an l2 budget; see [`AttackConfig::l2_radius`].
pub fn bim_l2<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    cfg: &AttackConfig,
) -> Result<AdvResult<F>> {
    run_attack(AttackKind::BimL2, model, image, labels, cfg)
}

/// Loss whose input gradient [`input_gradient`] returns.
#[derive(Clone, Copy, Debug)]
pub enum LossSpec {
    Mean,
    Weighted { lambda: f64 },
}

/// Gradient of the chosen segmentation loss w.r.t. the image, with the pixel
/// split taken from the model's prediction on `image`.
pub fn input_gradient<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    image: &Tensor<F>,
    labels: &LabelMap,
    loss: LossSpec,
) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let logits = model.logits(&mut g, x)?;
    let ce = g.pixel_softmax_ce(logits, labels)?;
    let root = match loss {
        LossSpec::Mean => g.mean(ce),
        LossSpec::Weighted { lambda } => {
            let split = split_pixels(g.value(logits), labels)?;
            weighted_seg_loss(&mut g, ce, &split, lambda)?
        }
    };
    g.backward(root)?;
    Ok(g.grad(x)
        .map(<[F]>::to_vec)
        .unwrap_or_else(|| vec![F::zero(); image.numel()]))
}

/// Forward-only evaluation of one state.
fn observe_state<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    x: &Tensor<F>,
    labels: &LabelMap,
    t: i64,
    lambda: f64,
) -> Result<TraceRow> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let logits = model.logits(&mut g, xv)?;
    let ce = g.pixel_softmax_ce(logits, labels)?;
    let split = split_pixels(g.value(logits), labels)?;
    TraceRow::record(t, lambda, g.value(ce).data(), &split)
}

fn random_start<F: Scalar>(clean: &Tensor<F>, eps: f64, seed: u64) -> Tensor<F> {
    let mut r = rng::stream(seed, 0);
    let mut x = clean.clone();
    for v in x.data_mut() {
        // open interval (-eps, eps)
        let u = loop {
            let u = (2.0 * r.random::<f64>() - 1.0) * eps;
            if u > -eps {
                break u;
            }
        };
        *v = *v + F::lit(u);
    }
    x
}

fn iterate<F: Scalar, M: Segmenter<F> + ?Sized>(
    model: &M,
    clean: &Tensor<F>,
    labels: &LabelMap,
    cfg: &AttackConfig,
    objective: Objective,
    step: Step,
    observer: Observer<'_, F>,
) -> Result<AdvResult<F>> {
    cfg.check_ranges()?;
    let (c, h, w) = clean.dims3()?;
    if c != model.in_channels() {
        return Err(Error::shape(format!(
            "model expects {} channels, image has {c}",
            model.in_channels()
        )));
    }
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::shape("image and labels disagree on H x W"));
    }
    let numel = clean.numel();
    let eps = F::lit(cfg.epsilon);
    let alpha = F::lit(cfg.alpha);
    let (l2_radius, l2_step) = (cfg.l2_radius(numel), cfg.l2_step(numel));
    let project = |x: &mut Tensor<F>| {
        match step {
            Step::Sign => project_linf_in_place(x.data_mut(), clean.data(), eps),
            Step::L2 => project_l2_in_place(x.data_mut(), clean.data(), l2_radius),
        }
        clip_valid_in_place(x.data_mut());
    };

    let pre_init = observe_state(model, clean, labels, -1, 0.0)?;
    let mut adv = if cfg.random_init {
        let mut x = random_start(clean, cfg.epsilon, cfg.seed);
        project(&mut x);
        x
    } else {
        clean.clone()
    };
    observer(0, &adv);

    let total = cfg.iterations;
    let mut rows = Vec::with_capacity(total + 1);
    let mut prev_lambda = 0.0;
    for t in 1..=total {
        let lambda = match objective {
            Objective::Mean => 0.5,
            Objective::Weighted(s) => lambda_schedule(s, t, total)?,
        };
        let mut g = Graph::new();
        let xv = g.input(adv.clone());
        let logits = model.logits(&mut g, xv)?;
        let ce = g.pixel_softmax_ce(logits, labels)?;
        let split = split_pixels(g.value(logits), labels)?;
        rows.push(TraceRow::record(
            t as i64 - 1,
            prev_lambda,
            g.value(ce).data(),
            &split,
        )?);
        let loss = match objective {
            Objective::Mean => g.mean(ce),
            Objective::Weighted(_) => weighted_seg_loss(&mut g, ce, &split, lambda)?,
        };
        g.backward(loss)?;
        if let Some(grad) = g.grad(xv) {
            match step {
                Step::Sign => {
                    for (v, &d) in adv.data_mut().iter_mut().zip(grad) {
                        if d > F::zero() {
                            *v = *v + alpha;
                        } else if d < F::zero() {
                            *v = *v - alpha;
                        }
                    }
                }
                Step::L2 => {
                    let n = l2_norm(grad.iter().copied());
                    if n >= 1e-12 {
                        let k = F::lit(l2_step / n);
                        for (v, &d) in adv.data_mut().iter_mut().zip(grad) {
                            *v = *v + k * d;
                        }
                    }
                }
            }
        }
        project(&mut adv);
        observer(t, &adv);
        prev_lambda = lambda;
    }
    let last = observe_state(model, &adv, labels, total as i64, prev_lambda)?;
    rows.push(last);
    let mis_ratio = last.mis_ratio();
    Ok(AdvResult {
        adversarial: adv,
        trace: AttackTrace { pre_init, rows },
        mis_ratio,
    })
}

#[cfg(test)]
mod tests;
