use super::{GradError, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment buffers for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let (m, v) = params.into_iter().map(|p| (vec![S::zero(); p.len()], vec![S::zero(); p.len()])).unzip();
        Self { config, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update over `params`, in order. Gradients are
/// cleared afterwards.
///
/// All parameters are validated before any of them is touched, so an error
/// leaves both the parameters and the state unchanged.
pub fn adam_step<'a, S: Scalar>(
    params: impl IntoIterator<Item = &'a mut Tensor<S>>,
    state: &mut AdamState<S>,
) -> Result<(), GradError> {
    let mut params: Vec<&mut Tensor<S>> = params.into_iter().collect();
    if params.len() != state.m.len() {
        return Err(GradError::StateMismatch(format!("{} parameters for a state of {}", params.len(), state.m.len())));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(GradError::MissingGrad(i));
        }
        if state.m[i].len() != p.len() {
            return Err(GradError::StateMismatch(format!(
                "parameter {i} has {} elements, moments have {}",
                p.len(),
                state.m[i].len()
            )));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = S::from_f64_lossy(c.beta1);
    let b2 = S::from_f64_lossy(c.beta2);
    let one = S::one();
    let bc1 = S::from_f64_lossy(1.0 - c.beta1.powi(t));
    let bc2 = S::from_f64_lossy(1.0 - c.beta2.powi(t));
    let lr = S::from_f64_lossy(c.lr);
    let eps = S::from_f64_lossy(c.epsilon);

    for (i, p) in params.iter_mut().enumerate() {
        let g = p.take_grad().expect("validated above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            data[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap().with_grad()
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = param(3.0);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        p.accumulate_grad(vec![0.0]).unwrap();
        adam_step([&mut p], &mut st).unwrap();
        assert_eq!(p.data(), &[3.0]);
        assert_eq!(st.step_count(), 1);
        assert!(p.grad().is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 on the first step: delta = lr / (1 + eps)
        let cfg = AdamConfig::with_lr(0.1);
        let expected = 0.1 / (1.0 + cfg.epsilon);
        let mut p = param(1.0);
        let mut st = AdamState::new(cfg, [&p]);
        p.accumulate_grad(vec![1.0]).unwrap();
        adam_step([&mut p], &mut st).unwrap();
        let moved = 1.0 - p.data()[0];
        assert!((moved - expected).abs() < 1e-12);
        assert!((moved - 0.1).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = param(5.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.05), [&p]);
        let mut steps = 0;
        while p.data()[0].abs() >= 0.1 {
            let w = p.data()[0];
            p.accumulate_grad(vec![2.0 * w]).unwrap();
            adam_step([&mut p], &mut st).unwrap();
            steps += 1;
            assert!(steps <= 500, "did not converge");
        }
        assert_eq!(st.step_count(), steps);
    }

    #[test]
    fn errors_leave_state_untouched() {
        let mut a = param(1.0);
        let mut b = param(2.0);
        let mut st = AdamState::new(AdamConfig::default(), [&a, &b]);
        a.accumulate_grad(vec![1.0]).unwrap();
        assert!(matches!(adam_step([&mut a, &mut b], &mut st), Err(GradError::MissingGrad(1))));
        assert_eq!(st.step_count(), 0);
        assert_eq!(a.data(), &[1.0]);

        let mut wide = Tensor::<f64>::zeros(&[3]).with_grad();
        wide.accumulate_grad(vec![0.0; 3]).unwrap();
        let mut st1 = AdamState::new(AdamConfig::default(), [&a]);
        assert!(matches!(adam_step([&mut wide], &mut st1), Err(GradError::StateMismatch(_))));
    }
}
