use super::{ParamId, ParamStore, Tensor};

/// Per-parameter Adam moments.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }
}

impl Adam {
    /// One bias-corrected step. Parameters without a gradient keep their
    /// values; frozen parameters are never touched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        let n = store.len();
        self.state.m.resize(n, None);
        self.state.v.resize(n, None);
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            let shape = (g.rows(), g.cols());
            let m = self.state.m[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.state.v[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.state.m[id.0].as_ref().unwrap(), self.state.v[id.0].as_ref().unwrap());
            let p = store.value_mut(*id);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[(ParamId, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_by_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
