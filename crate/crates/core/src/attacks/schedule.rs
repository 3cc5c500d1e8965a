use crate::error::{Error, Result};

/// How the loss of wrongly classified pixels is weighted at each step.
///
/// The weight `λ(t)` multiplies the summed loss over `P^F`; `1 - λ(t)` multiplies
/// the summed loss over `P^T`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `(t - 1) / 2T`
    Linear,
    /// `log2(1 + (t - 1) / T) / 2`
    Log,
    /// `(2^((t - 1) / T) - 1) / 2`
    Exp,
    /// Fixed `λ`.
    Constant(f64),
    /// `λ = 0`: only correctly classified pixels contribute.
    OnlyCorrect,
    /// `λ = 1/2`: every pixel weighted equally.
    Baseline,
}

impl Schedule {
    pub fn is_dynamic(self) -> bool {
        matches!(self, Schedule::Linear | Schedule::Log | Schedule::Exp)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Schedule::Constant(c) if !(0.0..=1.0).contains(&c) => Err(Error::config(format!(
                "constant lambda must lie in [0, 1], got {c}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(self) -> String {
        match self {
            Schedule::Linear => "linear".into(),
            Schedule::Log => "log".into(),
            Schedule::Exp => "exp".into(),
            Schedule::Constant(c) => format!("constant({c})"),
            Schedule::OnlyCorrect => "only_correct".into(),
            Schedule::Baseline => "baseline".into(),
        }
    }
}

/// Weight `λ(t)` for step `t` of `total` (1-based).
pub fn lambda_schedule(kind: Schedule, t: usize, total: usize) -> Result<f64> {
    if t == 0 || t > total {
        return Err(Error::IterationOutOfRange { t, total });
    }
    let progress = (t - 1) as f64 / total as f64;
    Ok(match kind {
        Schedule::Linear => (t - 1) as f64 / (2 * total) as f64,
        Schedule::Log => 0.5 * (1.0 + progress).log2(),
        Schedule::Exp => 0.5 * (progress.exp2() - 1.0),
        Schedule::Constant(c) => c,
        Schedule::OnlyCorrect => 0.0,
        Schedule::Baseline => 0.5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_reference_values() {
        for total in [1, 7, 100] {
            assert_eq!(lambda_schedule(Schedule::Linear, 1, total).unwrap(), 0.0);
        }
        assert_eq!(lambda_schedule(Schedule::Linear, 6, 10).unwrap(), 0.25);
    }

    #[test]
    fn single_step_schedules_start_at_zero() {
        for kind in [Schedule::Linear, Schedule::Log, Schedule::Exp] {
            assert_eq!(lambda_schedule(kind, 1, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn exp_supremum_stays_below_half() {
        for total in [1usize, 2, 10, 1000] {
            let last = lambda_schedule(Schedule::Exp, total, total).unwrap();
            let bound = 0.5 * (((total - 1) as f64 / total as f64).exp2() - 1.0);
            assert_eq!(last, bound);
            assert!(last < 0.5);
        }
    }

    #[test]
    fn fixed_kinds() {
        assert_eq!(lambda_schedule(Schedule::Constant(0.3), 4, 9).unwrap(), 0.3);
        assert_eq!(lambda_schedule(Schedule::OnlyCorrect, 4, 9).unwrap(), 0.0);
        assert_eq!(lambda_schedule(Schedule::Baseline, 4, 9).unwrap(), 0.5);
    }

    #[test]
    fn out_of_range_steps_rejected() {
        assert!(lambda_schedule(Schedule::Linear, 0, 5).is_err());
        assert!(lambda_schedule(Schedule::Linear, 6, 5).is_err());
    }

    #[test]
    fn constant_must_be_a_weight() {
        assert!(Schedule::Constant(1.5).validate().is_err());
        assert!(Schedule::Constant(-0.1).validate().is_err());
        assert!(Schedule::Constant(0.0).validate().is_ok());
    }

    #[test]
    fn serde_names() {
        let s: Schedule = serde_json::from_str("\"only_correct\"").unwrap();
        assert_eq!(s, Schedule::OnlyCorrect);
        let s: Schedule = serde_json::from_str("{\"constant\": 0.2}").unwrap();
        assert_eq!(s, Schedule::Constant(0.2));
    }
}
