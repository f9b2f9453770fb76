use super::{shape_err, ParamStore, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between learning-rate halvings; 0 disables the schedule.
    pub halve_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halve_every: 50,
        }
    }
}

/// Step schedule: `lr0` halved once per completed `halve_every` epochs.
pub fn lr_at_epoch(lr0: f64, epoch: usize, halve_every: usize) -> f64 {
    if halve_every == 0 {
        return lr0;
    }
    lr0 * 0.5f64.powi((epoch / halve_every) as i32)
}

/// Bias-corrected Adam with one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.config.lr, epoch, self.config.halve_every)
    }

    /// One update at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return shape_err(
                "adam",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            );
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return shape_err("adam", format!("{}: {} vs {}", p.name, p.len(), g.len()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p.data.iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                *w = *w - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", vec![1], vec![v]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_only_counts_the_step() {
        let mut s = store(0.3);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, &[vec![0.0]], 1e-3).unwrap();
        assert_eq!(s.get(0).data[0], 0.3);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [-5.0, 1e-3, 2.0, 40.0] {
            let mut s = store(1.0);
            let mut opt = Adam::new(AdamConfig::default(), &s);
            opt.step(&mut s, &[vec![g]], 1e-3).unwrap();
            let delta = s.get(0).data[0] - 1.0;
            // |g| / (|g| + eps) with eps = 1e-8
            assert!((delta.abs() - 1e-3).abs() < 1e-3 * 1e-5, "{delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn schedule_halves_every_fifty_epochs() {
        assert_eq!(lr_at_epoch(0.001, 0, 50), 0.001);
        assert_eq!(lr_at_epoch(0.001, 49, 50), 0.001);
        assert_eq!(lr_at_epoch(0.001, 50, 50), 0.0005);
        assert_eq!(lr_at_epoch(0.001, 120, 50), 0.00025);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut s = store(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        assert!(opt.step(&mut s, &[vec![1.0, 2.0]], 1e-3).is_err());
        assert!(opt.step(&mut s, &[], 1e-3).is_err());
    }
}
