use crate::autodiff::{ParamId, Var};
use crate::error::{Error, Result};
use crate::params::{xavier, ParamStore, Role};
use crate::tensor::{Float, Tensor};

use super::{Forward, LangId};

/// Parameters of one language's bottleneck MLP.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

/// Serial per-language adapter: `x + W_up · gelu(W_down · LN(x))`.
///
/// `W_up` starts at zero, so inserting an adapter does not change the
/// output until it is trained.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub d: usize,
    pub hidden: usize,
    pub eps: f64,
    pub langs: Vec<AdapterParams>,
}

impl Adapter {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, langs: usize, eps: f64, seed: u64) -> Self {
        let langs = (0..langs)
            .map(|l| {
                let role = Role::Adapter(l);
                let p = format!("{name}.{l}");
                AdapterParams {
                    ln_gamma: store.add(format!("{p}.ln.gamma"), Tensor::ones(&[d]), role),
                    ln_beta: store.add(format!("{p}.ln.beta"), Tensor::zeros(&[d]), role),
                    down_w: store.add(format!("{p}.down.weight"), xavier(seed, &format!("{p}.down.weight"), d, hidden), role),
                    down_b: store.add(format!("{p}.down.bias"), Tensor::zeros(&[hidden]), role),
                    up_w: store.add(format!("{p}.up.weight"), Tensor::zeros(&[hidden, d]), role),
                    up_b: store.add(format!("{p}.up.bias"), Tensor::zeros(&[d]), role),
                }
            })
            .collect();
        Self { d, hidden, eps, langs }
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var, lang: LangId) -> Result<Var> {
        let p = self.langs.get(lang).ok_or(Error::Language(lang))?;
        if *fx.g.shape(x).last().unwrap() != self.d {
            return Err(Error::dims("adapter", fx.g.shape(x), &[self.d]));
        }
        let (g, b) = (fx.p(p.ln_gamma), fx.p(p.ln_beta));
        let h = fx.g.layer_norm(x, g, b, self.eps)?;
        let (dw, db) = (fx.p(p.down_w), fx.p(p.down_b));
        let h = fx.g.matmul(h, dw)?;
        let h = fx.g.add_bias(h, db)?;
        let h = fx.g.gelu(h);
        let (uw, ub) = (fx.p(p.up_w), fx.p(p.up_b));
        let h = fx.g.matmul(h, uw)?;
        let h = fx.g.add_bias(h, ub)?;
        fx.g.add(x, h)
    }

    /// Scalars per language: both projections, their biases and the norm.
    pub fn params_per_language(&self) -> usize {
        2 * self.d * self.hidden + self.hidden + self.d + 2 * self.d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_up_projection_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let ad = Adapter::new(&mut store, "a", 4, 2, 2, 1e-5, 3);
        let xt = Tensor::from_f64(&[2, 4], &[0.3, -1.0, 2.0, 0.5, 1.0, 1.5, -0.2, 0.0]).unwrap();
        let mut fx = Forward::new(&store);
        let x = fx.g.leaf(&xt, false);
        let y = ad.forward(&mut fx, x, 1).unwrap();
        assert_eq!(fx.g.value(y), xt.data());
    }

    #[test]
    fn bottleneck_by_hand() {
        // d = 2, h = 1; LN of [1, 3] is [-1, 1] (eps tiny).
        let mut store = ParamStore::<f64>::new();
        let ad = Adapter::new(&mut store, "a", 2, 1, 1, 1e-12, 0);
        let p = ad.langs[0].clone();
        *store.get_mut(p.down_w) = Tensor::from_f64(&[2, 1], &[0.5, 2.0]).unwrap();
        *store.get_mut(p.down_b) = Tensor::from_f64(&[1], &[0.25]).unwrap();
        *store.get_mut(p.up_w) = Tensor::from_f64(&[1, 2], &[1.0, -3.0]).unwrap();
        *store.get_mut(p.up_b) = Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap();
        let mut fx = Forward::new(&store);
        let x = fx.g.leaf(&Tensor::from_f64(&[1, 2], &[1.0, 3.0]).unwrap(), false);
        let y = ad.forward(&mut fx, x, 0).unwrap();

        // hidden pre-activation: -1*0.5 + 1*2 + 0.25 = 1.75
        let z: f64 = 1.75;
        let gelu = 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh());
        let want = [1.0 + gelu * 1.0 + 0.1, 3.0 + gelu * -3.0 + 0.2];
        for (a, b) in fx.g.value(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unknown_language() {
        let mut store = ParamStore::<f32>::new();
        let ad = Adapter::new(&mut store, "a", 4, 2, 2, 1e-5, 3);
        let mut fx = Forward::new(&store);
        let x = fx.g.leaf(&Tensor::zeros(&[1, 4]), false);
        assert!(matches!(ad.forward(&mut fx, x, 2), Err(Error::Language(2))));
    }
}
