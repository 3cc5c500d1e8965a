//! Toy fully-convolutional segmentation networks.
//!
//! All three architectures are stride-1 and size-preserving, mapping a
//! `(C, H, W)` image to `(M, H, W)` logits:
//!
//! * `MiniSegNet`: conv3x3(C→16), ReLU, conv3x3(16→32), ReLU, conv1x1(32→M)
//! * `PyramidLite`: as MiniSegNet, with a global-average-pool branch of the
//!   32-channel features concatenated before the head (head is 64→M)
//! * `DilatedLite`: as MiniSegNet, with dilation 2 in the second conv

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

const HIDDEN1: usize = 16;
const HIDDEN2: usize = 32;

/// Anything that turns an image node into per-pixel logits.
///
/// Attacks only need this surface; parameters enter the graph as constants.
pub trait Segmenter<F: Scalar>: Sync {
    fn in_channels(&self) -> usize;
    fn classes(&self) -> usize;
    fn logits(&self, g: &mut Graph<F>, image: Var) -> Result<Var>;

    /// Forward pass outside any caller-owned graph.
    fn predict(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let y = self.logits(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Arch {
    #[serde(rename = "mini")]
    MiniSegNet,
    #[serde(rename = "pyramid")]
    PyramidLite,
    #[serde(rename = "dilated")]
    DilatedLite,
}

impl Arch {
    pub fn tag(self) -> u8 {
        match self {
            Arch::MiniSegNet => 0,
            Arch::PyramidLite => 1,
            Arch::DilatedLite => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Arch::MiniSegNet),
            1 => Ok(Arch::PyramidLite),
            2 => Ok(Arch::DilatedLite),
            other => Err(Error::config(format!("unknown architecture tag {other}"))),
        }
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn layout(self, channels: usize, classes: usize) -> Vec<(&'static str, Vec<usize>)> {
        let head_in = match self {
            Arch::PyramidLite => 2 * HIDDEN2,
            _ => HIDDEN2,
        };
        vec![
            ("conv1.weight", vec![HIDDEN1, channels, 3, 3]),
            ("conv1.bias", vec![HIDDEN1]),
            ("conv2.weight", vec![HIDDEN2, HIDDEN1, 3, 3]),
            ("conv2.bias", vec![HIDDEN2]),
            ("head.weight", vec![classes, head_in, 1, 1]),
            ("head.bias", vec![classes]),
        ]
    }

    pub fn param_count(self, channels: usize, classes: usize) -> usize {
        self.layout(channels, classes)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn conv2_dilation(self) -> usize {
        match self {
            Arch::DilatedLite => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::MiniSegNet => "mini",
            Arch::PyramidLite => "pyramid",
            Arch::DilatedLite => "dilated",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mini" | "minisegnet" => Ok(Arch::MiniSegNet),
            "pyramid" | "pyramidlite" => Ok(Arch::PyramidLite),
            "dilated" | "dilatedlite" => Ok(Arch::DilatedLite),
            other => Err(Error::config(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: &'static str,
    pub value: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<F> {
    arch: Arch,
    in_channels: usize,
    classes: usize,
    params: Vec<Param<F>>,
}

/// Builds a model with He-style Gaussian weights (std `sqrt(2 / fan_in)`) and
/// zero biases. Layer `i` draws from counter stream `i` under `seed`.
pub fn build_model<F: Scalar>(
    arch: Arch,
    in_channels: usize,
    classes: usize,
    seed: u64,
) -> Result<SegModel<F>> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if in_channels == 0 {
        return Err(Error::config("need at least one input channel"));
    }
    let params = arch
        .layout(in_channels, classes)
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let value = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let std = (2.0 / fan_in).sqrt();
                let mut r = rng::stream(seed, i as u64);
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        F::lit(z * std)
                    })
                    .collect();
                Tensor::new(shape, data).expect("layout shape")
            } else {
                Tensor::zeros(shape)
            };
            Param { name, value }
        })
        .collect();
    Ok(SegModel {
        arch,
        in_channels,
        classes,
        params,
    })
}

impl<F: Scalar> SegModel<F> {
    /// Reassembles a model from a flat parameter buffer in layout order.
    pub fn from_flat(arch: Arch, in_channels: usize, classes: usize, flat: &[F]) -> Result<Self> {
        let layout = arch.layout(in_channels, classes);
        let expected: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if flat.len() != expected {
            return Err(Error::shape(format!(
                "{arch} with C={in_channels}, M={classes} has {expected} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let params = layout
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let value = Tensor::new(shape, flat[offset..offset + n].to_vec())?;
                offset += n;
                Ok(Param { name, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            arch,
            in_channels,
            classes,
            params,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn flat_params(&self) -> Vec<F> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> SegModel<G> {
        SegModel {
            arch: self.arch,
            in_channels: self.in_channels,
            classes: self.classes,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Forward pass with parameters entered as tracked leaves.
    ///
    /// Returns the logits node and the parameter nodes in layout order.
    pub fn forward_trainable(&self, g: &mut Graph<F>, image: Var) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.iter().map(|p| g.input(p.value.clone())).collect();
        let out = self.forward_with(g, image, &vars)?;
        Ok((out, vars))
    }

    pub(crate) fn forward_with(&self, g: &mut Graph<F>, image: Var, p: &[Var]) -> Result<Var> {
        let (c, _, _) = g.value(image).dims3()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, image has {c}",
                self.in_channels
            )));
        }
        let h1 = g.conv2d(image, p[0], p[1], 1, 1)?;
        let h1 = g.relu(h1);
        let d = self.arch.conv2_dilation();
        let h2 = g.conv2d(h1, p[2], p[3], d, d)?;
        let mut h2 = g.relu(h2);
        if self.arch == Arch::PyramidLite {
            let pooled = g.global_avg_pool_broadcast(h2)?;
            h2 = g.concat_channels(h2, pooled)?;
        }
        g.conv2d(h2, p[4], p[5], 0, 1)
    }
}

impl<F: Scalar> Segmenter<F> for SegModel<F> {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, g: &mut Graph<F>, image: Var) -> Result<Var> {
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        self.forward_with(g, image, &vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::argmax_classes;

    fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut r = rng::stream(seed, 99);
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn parameter_count_follows_layer_formula() {
        // 3*16*9+16 + 16*32*9+32 + 32*4+4
        let by_formula = 3 * 16 * 9 + 16 + 16 * 32 * 9 + 32 + 32 * 4 + 4;
        assert_eq!(by_formula, 5220);
        assert_eq!(Arch::MiniSegNet.param_count(3, 4), by_formula);
        let m = build_model::<f32>(Arch::MiniSegNet, 3, 4, 0).unwrap();
        assert_eq!(m.param_count(), by_formula);
        assert_eq!(Arch::DilatedLite.param_count(3, 4), by_formula);
        assert_eq!(Arch::PyramidLite.param_count(3, 4), by_formula + 32 * 4);
    }

    #[test]
    fn build_is_deterministic() {
        for arch in [Arch::MiniSegNet, Arch::PyramidLite, Arch::DilatedLite] {
            let a = build_model::<f32>(arch, 3, 4, 11).unwrap();
            let b = build_model::<f32>(arch, 3, 4, 11).unwrap();
            let c = build_model::<f32>(arch, 3, 4, 12).unwrap();
            let bits = |m: &SegModel<f32>| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
            assert_ne!(bits(&a), bits(&c));
        }
    }

    #[test]
    fn rejects_single_class_and_unknown_tags() {
        assert!(build_model::<f32>(Arch::MiniSegNet, 3, 1, 0).is_err());
        assert!(Arch::from_tag(7).is_err());
        assert!("resnet".parse::<Arch>().is_err());
        assert_eq!("PyramidLite".parse::<Arch>().unwrap(), Arch::PyramidLite);
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        for arch in [Arch::MiniSegNet, Arch::PyramidLite, Arch::DilatedLite] {
            let m = build_model::<f64>(arch, 3, 4, 1).unwrap();
            let y = m.predict(&image(3, 16, 16, 0)).unwrap();
            assert_eq!(y.shape(), &[4, 16, 16]);
            let y = m.predict(&image(3, 8, 11, 1)).unwrap();
            assert_eq!(y.shape(), &[4, 8, 11]);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = build_model::<f32>(Arch::PyramidLite, 3, 5, 3).unwrap();
        let x = image(3, 12, 12, 4).cast::<f32>();
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = build_model::<f64>(Arch::MiniSegNet, 3, 4, 1).unwrap();
        assert!(matches!(m.predict(&image(2, 8, 8, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_invariant_to_per_pixel_logit_shift() {
        let m = build_model::<f64>(Arch::MiniSegNet, 3, 4, 5).unwrap();
        let x = image(3, 10, 10, 6);
        let base = argmax_classes(&m.predict(&x).unwrap()).unwrap();
        for shift in [-3.0, 0.25, 17.0] {
            let mut shifted = m.clone();
            let head_bias = shifted.params_mut().last_mut().unwrap();
            head_bias.value.data_mut().iter_mut().for_each(|b| *b += shift);
            let pred = argmax_classes(&shifted.predict(&x).unwrap()).unwrap();
            assert_eq!(pred, base);
        }
    }

    #[test]
    fn flat_round_trip() {
        let m = build_model::<f32>(Arch::DilatedLite, 3, 4, 9).unwrap();
        let back = SegModel::from_flat(Arch::DilatedLite, 3, 4, &m.flat_params()).unwrap();
        assert_eq!(back, m);
        assert!(SegModel::<f32>::from_flat(Arch::DilatedLite, 3, 4, &[0.0; 10]).is_err());
    }
}
