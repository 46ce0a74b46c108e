use crate::model::{Gradients, ParameterStore};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub(crate) m: Gradients,
    pub(crate) v: Gradients,
}

impl Adam {
    pub fn new(params: &ParameterStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }

    pub fn first_moment(&self) -> &Gradients {
        &self.m
    }

    pub fn second_moment(&self) -> &Gradients {
        &self.v
    }

    pub fn update(&mut self, params: &mut ParameterStore, grads: &Gradients, learning_rate: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.slot(name);
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.slot(name);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((w, mi), vi) in p.values.iter_mut().zip(m).zip(v) {
                *w -= learning_rate * (mi / c1) / ((vi / c2).sqrt() + self.epsilon);
            }
        }
    }
}
