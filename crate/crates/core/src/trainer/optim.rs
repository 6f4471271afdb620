use crate::nn::{ParamStore, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ` using the gradients in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = params.grad(id).data().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.value_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps) + lr * self.weight_decay * p[k];
            }
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let n = params.grad_norm();
    if max_norm > 0.0 && n > max_norm {
        params.scale_grads(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", Tensor::matrix(1, vals.len(), vals.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = AdamW::new(&s, 0.0);
        for _ in 0..5 {
            opt.step(&mut s, 0.1);
        }
        assert_eq!(s.value(s.id("p").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut s = store(&[3.0]);
        let mut opt = AdamW::new(&s, 0.5);
        let id = s.id("p").unwrap();
        for k in 1..=4 {
            opt.step(&mut s, 0.1);
            let expected = 3.0 * (1.0f64 - 0.05).powi(k);
            assert!((s.value(id).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut s = store(&[0.0]);
        let mut opt = AdamW::new(&s, 0.0);
        let id = s.id("p").unwrap();
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..200 {
            s.grad_mut(id).data_mut()[0] = 0.37;
            opt.step(&mut s, 0.01);
            let now = s.value(id).data()[0];
            last_step = prev - now;
            prev = now;
        }
        // bias-corrected m̂ = g and v̂ = g² exactly for a constant gradient
        let expected = 0.01 * 0.37 / (0.37 + 1e-8);
        assert!((last_step - expected).abs() < 1e-12, "{last_step}");
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = store(&[0.0, 0.0]);
        let id = s.id("p").unwrap();
        s.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 0.1), 5.0);
        assert!((s.grad_norm() - 0.1).abs() < 1e-15);
    }
}
