use super::store::ParameterStore;
use super::Tensor;

/// Adaptive-moment optimizer over the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        self.moments.resize(store.len(), None);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let (m, v) = self.moments[id.0].get_or_insert_with(|| {
                (Tensor::zeros(p.value.rows(), p.value.cols()), Tensor::zeros(p.value.rows(), p.value.cols()))
            });
            let values = p.value.data_mut();
            for (((x, g), mi), vi) in values.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
