use crate::params::ParamStore;
use crate::tensor::Float;

/// Adam with bias correction. Moments exist only for tensors that were
/// trainable when the optimizer was created.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    state: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Float> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let state = params
            .iter()
            .map(|(_, t)| t.requires_grad().then(|| (vec![T::zero(); t.len()], vec![T::zero(); t.len()])))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            state,
        }
    }

    /// Number of tensors with optimizer state.
    pub fn tracked(&self) -> usize {
        self.state.iter().filter(|s| s.is_some()).count()
    }

    /// Applies one update from the gradients stored on the parameters.
    pub fn update(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / c1);
        let c2s = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        for id in params.ids() {
            let Some((m, v)) = &mut self.state[id] else { continue };
            let p = params.get_mut(id);
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / c2s + eps);
            }
        }
    }
}

/// Global L2 norm of all trainable gradients.
pub fn grad_norm<T: Float>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grads<T: Float>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let c = T::of(max_norm / norm);
        for id in params.ids() {
            if let Some(g) = params.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|x| *x *= c);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap(), Role::Shared);
        p.get_mut(id).accumulate_grad(&[0.3, -2.0]);
        let mut opt = Adam::new(&p);
        opt.update(&mut p, 0.1);
        let w = p.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("w", Tensor::zeros(&[3]), Role::Shared);
        p.get_mut(id).accumulate_grad(&[3.0, 4.0, 12.0]);
        assert_eq!(clip_grads(&mut p, 1.0), 13.0);
        assert!(grad_norm(&p) <= 1.0 + 1e-12);
    }

    #[test]
    fn frozen_tensors_have_no_state() {
        let mut p = ParamStore::<f32>::new();
        p.add("a", Tensor::zeros(&[3]), Role::Shared);
        let b = p.add("b", Tensor::zeros(&[3]), Role::Shared);
        p.get_mut(b).set_requires_grad(false);
        assert_eq!(Adam::new(&p).tracked(), 1);
    }
}
