use crate::error::DiffusionError;

/// Linear-beta DDPM noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(200, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.steps() {
            return Err(DiffusionError::BadTimestep { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Variance of the reverse step `t -> t-1` (the posterior variance).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }

    /// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        self.check(t)?;
        if x0.len() != eps.len() {
            return Err(spm_autodiff::AutodiffError::ShapeMismatch(format!("x0 {} vs eps {}", x0.len(), eps.len())).into());
        }
        let (a, s) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// Clean-signal estimate implied by a noise prediction.
    pub fn predict_x0(&self, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Vec<f64> {
        let (a, s) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
        x_t.iter().zip(eps_hat).map(|(x, e)| (x - s * e) / a).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 200);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bars[0] >= 0.9998);
        assert!(s.alpha_bars[0].sqrt() >= 0.99994);
        assert!((s.betas[199] - 0.02).abs() < 1e-15);
        assert!(matches!(s.q_sample(&[0.0], 200, &[0.0]), Err(DiffusionError::BadTimestep { .. })));
    }

    #[test]
    fn zero_noise_scales_exactly() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -0.7, 1.0];
        let xt = s.q_sample(&x0, 120, &[0.0; 3]).unwrap();
        for (a, b) in xt.iter().zip(x0) {
            assert_eq!(*a, s.alpha_bars[120].sqrt() * b);
        }
        let back = s.predict_x0(&s.q_sample(&x0, 50, &[0.2, 0.1, -0.4]).unwrap(), 50, &[0.2, 0.1, -0.4]);
        for (a, b) in back.iter().zip(x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
