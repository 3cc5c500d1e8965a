use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn same_shape<F: Scalar>(x: &Tensor<F>, clean: &Tensor<F>) -> Result<()> {
    if x.shape() != clean.shape() {
        return Err(Error::shape(format!(
            "projection shape mismatch: {:?} vs {:?}",
            x.shape(),
            clean.shape()
        )));
    }
    Ok(())
}

/// Clamps `x` elementwise into `[clean - eps, clean + eps]`.
pub fn project_linf<F: Scalar>(x: &Tensor<F>, clean: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    same_shape(x, clean)?;
    let mut out = x.clone();
    project_linf_in_place(out.data_mut(), clean.data(), eps);
    Ok(out)
}

/// Clamps `x` elementwise into the valid image range `[0, 1]`.
pub fn clip_valid<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = x.clone();
    clip_valid_in_place(out.data_mut());
    out
}

pub(crate) fn project_linf_in_place<F: Scalar>(x: &mut [F], clean: &[F], eps: F) {
    for (v, &c) in x.iter_mut().zip(clean) {
        *v = v.max(c - eps).min(c + eps);
    }
}

pub(crate) fn clip_valid_in_place<F: Scalar>(x: &mut [F]) {
    for v in x {
        *v = v.max(F::zero()).min(F::one());
    }
}

pub(crate) fn l2_norm<F: Scalar>(v: impl Iterator<Item = F>) -> f64 {
    v.map(|a| {
        let a = a.to_f64_lossless();
        a * a
    })
    .sum::<f64>()
    .sqrt()
}

/// Pulls `x` onto the l2 ball of `radius` around `clean`. The realized
/// distance is re-measured after rounding and shrunk until it is within radius.
pub(crate) fn project_l2_in_place<F: Scalar>(x: &mut [F], clean: &[F], radius: f64) {
    for attempt in 0..16 {
        let n = l2_norm(x.iter().zip(clean).map(|(&a, &c)| a - c));
        if n <= radius {
            return;
        }
        let slack = if attempt == 0 { 1.0 } else { 1.0 - 1e-7 * f64::from(1u32 << attempt) };
        let k = F::lit(radius / n * slack);
        for (v, &c) in x.iter_mut().zip(clean) {
            *v = c + (*v - c) * k;
        }
    }
    // rounding could not settle; fall back to the center
    x.copy_from_slice(clean);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn inside_box_unchanged() {
        let clean = t(&[0.5, 0.2]);
        let x = t(&[0.51, 0.19]);
        assert_eq!(project_linf(&x, &clean, 0.03).unwrap(), x);
    }

    #[test]
    fn outside_box_clamped_to_edge() {
        let clean = t(&[0.5]);
        let x = t(&[0.5 + 0.06]);
        let p = project_linf(&x, &clean, 0.03).unwrap();
        assert_eq!(p.data()[0], 0.5f32 + 0.03);
    }

    #[test]
    fn validity_clamp_after_box() {
        let clean = t(&[0.99]);
        let x = t(&[1.05]);
        let p = clip_valid(&project_linf(&x, &clean, 0.03).unwrap());
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(project_linf(&t(&[0.1]), &t(&[0.1, 0.2]), 0.03).is_err());
    }

    #[test]
    fn l2_projection_respects_radius() {
        let clean = vec![0.5f32; 100];
        let mut x: Vec<f32> = (0..100).map(|i| 0.5 + (i as f32 * 0.37).sin()).collect();
        project_l2_in_place(&mut x, &clean, 0.8);
        let n = l2_norm(x.iter().zip(&clean).map(|(&a, &c)| a - c));
        assert!(n <= 0.8, "{n}");
        assert!(n > 0.79);
    }
}
