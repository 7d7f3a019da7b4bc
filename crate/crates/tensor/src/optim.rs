use crate::error::{Result, TensorError};
use crate::{Real, Tensor};

/// Momentum SGD state with a step learning-rate schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Real> {
    velocities: Vec<Vec<F>>,
    pub learning_rate: F,
    pub momentum: F,
    pub weight_decay: F,
    pub epoch_counter: usize,
    /// Divide the learning rate by ten every this many epochs; 0 disables.
    pub schedule_period: usize,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(learning_rate: F, momentum: F, weight_decay: F, schedule_period: usize) -> Self {
        Self {
            velocities: Vec::new(),
            learning_rate,
            momentum,
            weight_decay,
            epoch_counter: 0,
            schedule_period,
        }
    }

    pub fn end_epoch(&mut self) {
        self.epoch_counter += 1;
        if self.schedule_period > 0 && self.epoch_counter.is_multiple_of(self.schedule_period) {
            self.learning_rate /= F::from_f64(10.0);
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[F]> {
        self.velocities.get(index).map(Vec::as_slice)
    }
}

/// A named parameter handed to [`sgd_step`]; its gradient is read from the
/// tensor's gradient buffer.
pub struct ParamRef<'a, F: Real> {
    pub name: String,
    pub tensor: &'a mut Tensor<F>,
}

/// One momentum-SGD update of every parameter that requires a gradient:
/// `v = momentum * v + grad + weight_decay * param; param -= lr * v`.
///
/// Parameters are matched to velocity slots by position, so callers must
/// pass them in the same order on every step.
pub fn sgd_step<F: Real>(params: &mut [ParamRef<'_, F>], state: &mut OptimizerState<F>) -> Result<()> {
    for p in params.iter() {
        if let Some(g) = p.tensor.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient { param: p.name.clone() });
            }
        }
    }
    if state.velocities.len() < params.len() {
        state.velocities.resize(params.len(), Vec::new());
    }
    let (lr, mom, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (slot, p) in params.iter_mut().enumerate() {
        if !p.tensor.requires_grad {
            continue;
        }
        let n = p.tensor.len();
        let vel = &mut state.velocities[slot];
        if vel.is_empty() {
            vel.resize(n, F::ZERO);
        } else if vel.len() != n {
            return Err(TensorError::Shape {
                op: "sgd_step",
                detail: format!("velocity for `{}` has {} entries, parameter {n}", p.name, vel.len()),
            });
        }
        let grad: Vec<F> = match p.tensor.grad() {
            Some(g) => g.to_vec(),
            None => vec![F::ZERO; n],
        };
        for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
            *v = mom * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64, grad: f64) -> Tensor<f64> {
        let mut t = Tensor::new(&[1], vec![value]).unwrap().into_param();
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = scalar(0.37, 0.0);
        let mut st = OptimizerState::new(0.1, 0.9, 0.0, 0);
        sgd_step(&mut [ParamRef { name: "p".into(), tensor: &mut p }], &mut st).unwrap();
        assert_eq!(p.data()[0], 0.37);
    }

    #[test]
    fn single_plain_step() {
        let mut p = scalar(1.0, 1.0);
        let mut st = OptimizerState::new(0.1, 0.0, 0.0, 0);
        sgd_step(&mut [ParamRef { name: "p".into(), tensor: &mut p }], &mut st).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut p = scalar(0.0, 1.0);
        let mut st = OptimizerState::new(0.1, 0.9, 0.0, 0);
        sgd_step(&mut [ParamRef { name: "p".into(), tensor: &mut p }], &mut st).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-12);
        sgd_step(&mut [ParamRef { name: "p".into(), tensor: &mut p }], &mut st).unwrap();
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(0.0, f64::NAN);
        let mut st = OptimizerState::new(0.1, 0.9, 0.0, 0);
        let err = sgd_step(&mut [ParamRef { name: "conv1.weight".into(), tensor: &mut p }], &mut st)
            .unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
    }

    #[test]
    fn schedule_divides_by_ten() {
        let mut st = OptimizerState::<f32>::new(0.1, 0.9, 1e-4, 2);
        st.end_epoch();
        assert_eq!(st.learning_rate, 0.1);
        st.end_epoch();
        assert!((st.learning_rate - 0.01).abs() < 1e-9);
    }
}
