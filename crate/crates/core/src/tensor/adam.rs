use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, in the order
/// the parameters were registered.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |p: &Tensor<T>| vec![T::zero(); p.numel()];
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Restores a saved optimizer state.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(TensorError::Contract("adam moments disagree in shape".into()));
        }
        if v.iter().flatten().any(|x| *x < T::zero()) {
            return Err(TensorError::Contract("adam second moment must be non-negative".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// One update using each parameter's accumulated gradient. Parameters
    /// without a gradient buffer are left untouched (their moments decay
    /// as if the gradient were zero).
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::Contract(format!(
                "adam tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.numel() != m.len() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; p.numel()],
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                data[i] = T::from_f64(data[i].as_f64() - update);
            }
            if !p.is_finite() {
                return Err(TensorError::NonFinite("adam_step"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::new(vec![1], vec![1.0]).unwrap().with_grad()];
        p[0].accumulate_grad(&[1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        adam.step(&mut p).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f32>::new(vec![2], vec![0.5, -0.5]).unwrap().with_grad()];
        p[0].accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p).unwrap();
        assert_eq!(p[0].data(), &[0.5, -0.5]);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mk = || {
            let mut t = Tensor::<f32>::new(vec![3], vec![0.2, 0.4, -1.0]).unwrap().with_grad();
            t.accumulate_grad(&[0.3, -2.0, 1e-3]).unwrap();
            t
        };
        let mut p = vec![mk(), mk()];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p[0].data(), p[1].data());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = vec![Tensor::<f32>::zeros(vec![2])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let mut other = vec![Tensor::<f32>::zeros(vec![3])];
        assert!(matches!(adam.step(&mut other), Err(TensorError::Shape { .. })));
    }
}
