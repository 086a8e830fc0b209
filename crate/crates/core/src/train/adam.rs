use crate::nn::{ParamId, ParamStore};

/// Adam without weight decay. Moments are allocated lazily the first time
/// a parameter receives a gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Apply one update. Only parameters that are trainable and present in
    /// `grads` move.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f32>)]) {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.requires_grad {
                continue;
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = p.value.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads
            .iter_mut()
            .flat_map(|(_, g)| g.iter_mut())
            .for_each(|x| *x *= s);
    }
    norm
}
