use crate::{Element, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with coupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter expected");
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::c(self.cfg.beta1);
        let b2 = T::c(self.cfg.beta2);
        let bc1 = T::c(1.0 - self.cfg.beta1.powi(t));
        let bc2 = T::c(1.0 - self.cfg.beta2.powi(t));
        let lr = T::c(self.cfg.lr);
        let eps = T::c(self.cfg.eps);
        let wd = T::c(self.cfg.weight_decay);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let gv = gv + wd * *pv;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment buffers as named tensors (`adam.m.<param>`, `adam.v.<param>`)
    /// plus the step count as a one-element tensor.
    pub fn state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(T::c(self.step as f64)))];
        for id in store.ids() {
            let i = id.index();
            if let (Some(Some(m)), Some(Some(v))) = (self.m.get(i), self.v.get(i)) {
                out.push((format!("adam.m.{}", store.name(id)), m.clone()));
                out.push((format!("adam.v.{}", store.name(id)), v.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, state: &[(String, Tensor<T>)]) -> Result<(), String> {
        self.m = vec![None; store.len()];
        self.v = vec![None; store.len()];
        self.step = 0;
        for (name, value) in state {
            if name == "adam.step" {
                self.step = value.data()[0].to_u64().ok_or("invalid adam.step")?;
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                let id = store.id(p).ok_or_else(|| format!("optimizer state for unknown parameter {p}"))?;
                self.m[id.index()] = Some(value.clone());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                let id = store.id(p).ok_or_else(|| format!("optimizer state for unknown parameter {p}"))?;
                self.v[id.index()] = Some(value.clone());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut store, &[Some(Tensor::new(&[2], vec![3.0, -0.5]))]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(&[3], vec![0.3, -2.0, 7.5]));
        let before = store.get(id).clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, weight_decay: 1e-4, ..Default::default() });
        for _ in 0..5 {
            adam.step(&mut store, &[Some(Tensor::new(&[3], vec![1.0, 2.0, -3.0]))]);
        }
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[1], vec![2.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() });
        adam.step(&mut store, &[Some(Tensor::zeros(&[1]))]);
        assert!(store.get(id).data()[0] < 2.0);
    }
}
