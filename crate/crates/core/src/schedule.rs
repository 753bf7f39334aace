//! Discrete DDPM noise schedule and the forward noising process.

use ndarray::{Array, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 5e-4;
/// Leaves `alpha_bar` at the last step near 6e-3.
pub const DEFAULT_BETA_END: f64 = 0.05;

/// Parameters of a linear schedule, as stored in checkpoints and configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                index: t,
                limit: self.len(),
            })
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`
    pub fn add_noise<D: Dimension>(
        &self,
        x0: &ArrayView<f64, D>,
        t: usize,
        eps: &ArrayView<f64, D>,
    ) -> Result<Array<f64, D>> {
        let ab = self.alpha_bar(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch(format!(
                "x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x0.to_owned();
        Zip::from(&mut out).and(eps).for_each(|o, &e| *o = a * *o + b * e);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr0, arr1};
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars, vec![0.9]);
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges() {
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    fn schedule_with_alpha_bar(ab: f64) -> NoiseSchedule {
        NoiseSchedule {
            betas: vec![1.0 - ab],
            alphas: vec![ab],
            alpha_bars: vec![ab],
        }
    }

    #[test]
    fn add_noise_cases() {
        let x0 = arr1(&[0.3, -1.2, 2.0]);
        let eps = arr1(&[1.0, 0.5, -0.25]);
        let s = schedule_with_alpha_bar(1.0);
        assert_eq!(s.add_noise(&x0.view(), 0, &eps.view()).unwrap(), x0);

        let s = NoiseSchedule::default_linear();
        let zeros = arr1(&[0.0; 3]);
        let t = 57;
        let scaled = s.add_noise(&x0.view(), t, &zeros.view()).unwrap();
        let expected = &x0 * s.alpha_bars[t].sqrt();
        assert_eq!(scaled, expected);

        let s = schedule_with_alpha_bar(0.25);
        let out = s.add_noise(&arr0(2.0).view(), 0, &arr0(1.0).view()).unwrap();
        assert!((out.into_scalar() - 1.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn add_noise_errors() {
        let s = NoiseSchedule::default_linear();
        let x = arr1(&[0.0; 3]);
        let e2 = arr1(&[0.0; 2]);
        assert!(matches!(
            s.add_noise(&x.view(), DEFAULT_STEPS, &x.view()),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            s.add_noise(&x.view(), 0, &e2.view()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn alpha_bar_is_positive_and_strictly_decreasing(
            steps in 1usize..400,
            start in 1e-5f64..0.05,
            extra in 0.0f64..0.4,
        ) {
            let s = NoiseSchedule::linear(steps, start, start + extra).unwrap();
            prop_assert!(s.alpha_bars[0] <= 1.0);
            for w in s.alpha_bars.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            prop_assert!(s.alpha_bars.iter().all(|&a| a > 0.0));
            prop_assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        }
    }
}
