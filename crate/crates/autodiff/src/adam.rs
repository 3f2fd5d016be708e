use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    store_id: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            store_id: store.id(),
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to every parameter of `store`.
    ///
    /// Every parameter must have received a gradient since the last `zero_grad`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.id() != self.store_id || store.len() != self.first.len() {
            return Err(Error::Contract("optimizer used with a different store".into()));
        }
        if let Some(p) = store.iter().find(|p| !p.has_grad()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = T::from_f64(self.lr / c1);
        let inv_sqrt_c2 = T::from_f64(1.0 / c2.sqrt());
        let eps = T::from_f64(self.eps);
        let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
        let one = T::one();
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let grads = p.grad.data();
            let values = p.tensor.data_mut();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *x = *x - step_size * *m / ((*v).sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = scalar_store(1.5);
        let mut adam = Adam::new(&store, 0.1);
        store.zero_grad();
        let mut g = Graph::new();
        let b = g.bind(&store, true).unwrap();
        let loss = g.scale(b[crate::ParamId(0)], 0.0).unwrap();
        store.accumulate(&g.backward(loss).unwrap());
        adam.step(&mut store).unwrap();
        assert_eq!(store.iter().next().unwrap().tensor.data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, 0.1);
        let mut g = Graph::new();
        let b = g.bind(&store, true).unwrap();
        let loss = g.sum(b[crate::ParamId(0)]).unwrap(); // d/dp = 1
        store.accumulate(&g.backward(loss).unwrap());
        adam.step(&mut store).unwrap();
        let p = store.iter().next().unwrap().tensor.data()[0];
        assert!((p + 0.1).abs() < 1e-8, "p = {p}");
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, 0.01);
        let target = Tensor::scalar(2.0);
        for _ in 0..1000 {
            store.zero_grad();
            let mut g = Graph::new();
            let b = g.bind(&store, true).unwrap();
            let t = g.constant(target.clone()).unwrap();
            let d = g.sub(b[crate::ParamId(0)], t).unwrap();
            let loss = g.sum_squares(d).unwrap();
            store.accumulate(&g.backward(loss).unwrap());
            adam.step(&mut store).unwrap();
        }
        let p = store.iter().next().unwrap().tensor.data()[0];
        assert!((p - 2.0).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store, 0.1);
        assert!(matches!(adam.step(&mut store), Err(Error::MissingGrad(_))));
    }
}
