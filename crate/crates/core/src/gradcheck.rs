//! Double-precision finite-difference checks of every differentiable op and of
//! the full model loss.
//!
//! Each case draws random inputs, reduces the op output to a scalar with a
//! random linear projection, and compares the backward pass against central
//! differences along one random direction plus a few single coordinates.
//! Relative error is `|a - n| / max(|a|, |n|, ERR_FLOOR)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attacks::{split_pixels, weighted_seg_loss};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{build_model, Arch, SegModel};
use crate::rng;
use crate::tensor::{LabelMap, Tensor};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;
/// Denominator floor so exactly-zero gradients compare on an absolute scale.
pub const ERR_FLOOR: f64 = 1e-3;
const COORDS_PER_CASE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckedOp {
    Conv2d,
    Relu,
    Pool,
    Concat,
    Ce,
    Mean,
    WeightedMean,
    Add,
    Scale,
    Model,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 10] = [
        CheckedOp::Conv2d,
        CheckedOp::Relu,
        CheckedOp::Pool,
        CheckedOp::Concat,
        CheckedOp::Ce,
        CheckedOp::Mean,
        CheckedOp::WeightedMean,
        CheckedOp::Add,
        CheckedOp::Scale,
        CheckedOp::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::Conv2d => "conv2d",
            CheckedOp::Relu => "relu",
            CheckedOp::Pool => "pool",
            CheckedOp::Concat => "concat",
            CheckedOp::Ce => "ce",
            CheckedOp::Mean => "mean",
            CheckedOp::WeightedMean => "weighted_mean",
            CheckedOp::Add => "add",
            CheckedOp::Scale => "scale",
            CheckedOp::Model => "model",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            CheckedOp::Model => MODEL_TOLERANCE,
            _ => OP_TOLERANCE,
        }
    }
}

impl fmt::Display for CheckedOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckedOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|o| o.name()).collect();
                Error::config(format!("unknown op {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub cases: usize,
    pub seed: u64,
    /// Test fixture: scales the analytic gradient of this op by `1 + 1e-3`,
    /// which a working harness must flag.
    pub corrupt: Option<CheckedOp>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            cases: 100,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    /// Cases discarded because a perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn run_gradcheck(scope: &[CheckedOp], opts: &GradcheckOptions) -> Result<Vec<OpReport>> {
    scope.iter().map(|&op| check_op(op, opts)).collect()
}

pub fn check_op(op: CheckedOp, opts: &GradcheckOptions) -> Result<OpReport> {
    let mut r = rng::stream(opts.seed, 0x6772_6164 + op as u64);
    let corrupt = opts.corrupt == Some(op);
    let (mut done, mut skipped, mut worst) = (0, 0, 0.0f64);
    while done < opts.cases {
        match run_case(op, &mut r, corrupt)? {
            Some(err) => {
                worst = worst.max(err);
                done += 1;
            }
            None => {
                skipped += 1;
                if skipped > 10 * opts.cases.max(1) {
                    return Err(Error::config(format!("{op}: too many kink crossings")));
                }
            }
        }
    }
    Ok(OpReport {
        op: op.name(),
        cases: done,
        skipped,
        worst_rel_err: worst,
        tolerance: op.tolerance(),
        passed: worst < op.tolerance(),
    })
}

fn normal(r: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Normal values pushed at least `margin` away from zero.
fn off_zero(r: &mut ChaCha8Rng, shape: Vec<usize>, margin: f64) -> Tensor<f64> {
    let mut t = normal(r, shape, 1.0);
    for v in t.data_mut() {
        *v += margin.copysign(*v);
    }
    t
}

fn labels(r: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> LabelMap {
    let data = (0..h * w).map(|_| r.random_range(0..classes) as u8).collect();
    LabelMap::new(h, w, data).expect("size agrees")
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn run_case(op: CheckedOp, r: &mut ChaCha8Rng, corrupt: bool) -> Result<Option<f64>> {
    let (c, h, w) = (r.random_range(1..=3), r.random_range(2..=5), r.random_range(2..=5));
    match op {
        CheckedOp::Conv2d => {
            let (cout, k) = (r.random_range(1..=3), [1, 3][r.random_range(0..2)]);
            let dil = r.random_range(1..=2);
            let inputs = vec![
                normal(r, vec![c, h, w], 1.0),
                normal(r, vec![cout, c, k, k], 0.5),
                normal(r, vec![cout], 0.5),
            ];
            let pad = dil * (k - 1) / 2;
            check_case(r, inputs, &move |g, v| g.conv2d(v[0], v[1], v[2], pad, dil), corrupt, false)
        }
        CheckedOp::Relu => {
            let inputs = vec![off_zero(r, vec![c, h, w], 1e-2)];
            check_case(r, inputs, &|g, v| Ok(g.relu(v[0])), corrupt, false)
        }
        CheckedOp::Pool => {
            let inputs = vec![normal(r, vec![c, h, w], 1.0)];
            check_case(r, inputs, &|g, v| g.global_avg_pool_broadcast(v[0]), corrupt, false)
        }
        CheckedOp::Concat => {
            let c2 = r.random_range(1..=3);
            let inputs = vec![normal(r, vec![c, h, w], 1.0), normal(r, vec![c2, h, w], 1.0)];
            check_case(r, inputs, &|g, v| g.concat_channels(v[0], v[1]), corrupt, false)
        }
        CheckedOp::Ce => {
            let m = r.random_range(2..=5);
            let y = labels(r, h, w, m);
            let inputs = vec![normal(r, vec![m, h, w], 2.0)];
            check_case(r, inputs, &move |g, v| g.pixel_softmax_ce(v[0], &y), corrupt, false)
        }
        CheckedOp::Mean => {
            let inputs = vec![normal(r, vec![c, h, w], 1.0)];
            check_case(r, inputs, &|g, v| Ok(g.mean(v[0])), corrupt, false)
        }
        CheckedOp::WeightedMean => {
            let coeffs = normal(r, vec![c * h * w], 1.0).into_data();
            let inputs = vec![normal(r, vec![c, h, w], 1.0)];
            check_case(r, inputs, &move |g, v| g.weighted_mean(v[0], coeffs.clone()), corrupt, false)
        }
        CheckedOp::Add => {
            let inputs = vec![normal(r, vec![c, h, w], 1.0), normal(r, vec![c, h, w], 1.0)];
            check_case(r, inputs, &|g, v| g.add(v[0], v[1]), corrupt, false)
        }
        CheckedOp::Scale => {
            let k: f64 = r.sample(StandardNormal);
            let inputs = vec![normal(r, vec![c, h, w], 1.0)];
            check_case(r, inputs, &move |g, v| Ok(g.scale(v[0], k)), corrupt, false)
        }
        CheckedOp::Model => model_case(r, corrupt),
    }
}

/// Full model loss w.r.t. the image and every parameter. Cycles through the
/// architectures and alternates plain mean CE with the weighted attack loss.
fn model_case(r: &mut ChaCha8Rng, corrupt: bool) -> Result<Option<f64>> {
    let arch = [Arch::MiniSegNet, Arch::PyramidLite, Arch::DilatedLite][r.random_range(0..3)];
    let (c, m, size) = (3, r.random_range(2..=4), r.random_range(4..=6));
    let model: SegModel<f64> = build_model(arch, 3, m, r.random())?;
    let y = labels(r, size, size, m);
    let image = Tensor::new(
        vec![c, size, size],
        (0..c * size * size).map(|_| r.random::<f64>()).collect(),
    )?;
    let weighted = r.random_bool(0.5).then(|| r.random::<f64>() * 0.5);
    // the correct/wrong split is a constant of the loss, fixed at the base point
    let split = {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let logits = crate::model::Segmenter::logits(&model, &mut g, x)?;
        split_pixels(g.value(logits), &y)?
    };
    let mut inputs = vec![image];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let logits = model.forward_with(g, v[0], &v[1..])?;
        let ce = g.pixel_softmax_ce(logits, &y)?;
        match weighted {
            Some(lambda) => weighted_seg_loss(g, ce, &split, lambda),
            None => Ok(g.mean(ce)),
        }
    };
    check_case(r, inputs, &build, corrupt, true)
}

fn forward(inputs: &[Tensor<f64>], build: &Build<'_>, proj: &[f64]) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let n = g.value(out).numel();
    let root = if n == 1 {
        out
    } else {
        let wm = g.weighted_mean(out, proj.to_vec())?;
        g.scale(wm, n as f64)
    };
    Ok((g, vars, root))
}

fn perturbed(inputs: &[Tensor<f64>], dir: &[Vec<f64>], step: f64) -> Vec<Tensor<f64>> {
    inputs
        .iter()
        .zip(dir)
        .map(|(t, d)| {
            let mut t = t.clone();
            for (v, dv) in t.data_mut().iter_mut().zip(d) {
                *v += step * dv;
            }
            t
        })
        .collect()
}

/// Worst relative error over one direction and a few coordinates, or `None`
/// when `kinks` is set and a perturbation changes any ReLU sign pattern.
fn check_case(
    r: &mut ChaCha8Rng,
    inputs: Vec<Tensor<f64>>,
    build: &Build<'_>,
    corrupt: bool,
    kinks: bool,
) -> Result<Option<f64>> {
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).numel()
    };
    let proj = normal(r, vec![out_len], 1.0).into_data();
    let (mut g, vars, root) = forward(&inputs, build, &proj)?;
    g.backward(root)?;
    let scale = if corrupt { 1.0 + 1e-3 } else { 1.0 };
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(d) => d.iter().map(|x| x * scale).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    let base_pattern = g.relu_pattern();

    let mut dirs = vec![inputs.iter().map(|t| normal(r, t.shape().to_vec(), 1.0).into_data()).collect::<Vec<_>>()];
    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    for _ in 0..COORDS_PER_CASE {
        let mut k = r.random_range(0..total);
        let mut d: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.numel()]).collect();
        for part in d.iter_mut() {
            if k < part.len() {
                part[k] = 1.0;
                break;
            }
            k -= part.len();
        }
        dirs.push(d);
    }

    let mut worst = 0.0f64;
    for d in &dirs {
        let analytic: f64 = grads
            .iter()
            .zip(d)
            .map(|(gr, dv)| gr.iter().zip(dv).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let mut side = [0.0; 2];
        for (s, sign) in side.iter_mut().zip([1.0, -1.0]) {
            let (gp, _, rp) = forward(&perturbed(&inputs, d, sign * STEP), build, &proj)?;
            if kinks && gp.relu_pattern() != base_pattern {
                return Ok(None);
            }
            *s = gp.value(rp).data()[0];
        }
        let numeric = (side[0] - side[1]) / (2.0 * STEP);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERR_FLOOR);
        worst = worst.max(err);
    }
    Ok(Some(worst))
}
