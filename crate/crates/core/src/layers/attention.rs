//! Multi-head attention, absolute or with learned relative positions.
//!
//! In relative mode the logit between query `i` and key `j` is
//!
//! ```text
//! ((q_i + u) · k_j  +  (q_i + v) · e_{clip(j - i)}) / sqrt(d_head)
//! ```
//!
//! with a per-head content bias `u`, position bias `v` and one embedding per
//! clipped distance in `[-D, D]`. With `u`, `v` and all `e` zero this is
//! exactly the absolute-mode logit.

use crate::autodiff::{AttnMask, ParamId, Var};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore, Role};
use crate::tensor::{Float, Tensor};

use super::{AdaptiveLinear, Forward, LangId};

#[derive(Clone, Debug)]
pub struct RelPosParams {
    /// `[n_heads, 2D + 1, d_head]`
    pub emb: ParamId,
    /// content bias, `[n_heads, d_head]`
    pub u: ParamId,
    /// position bias, `[n_heads, d_head]`
    pub v: ParamId,
    pub max_dist: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: AdaptiveLinear,
    pub k: AdaptiveLinear,
    pub v: AdaptiveLinear,
    pub o: AdaptiveLinear,
    pub n_heads: usize,
    pub d_model: usize,
    pub rel: Option<RelPosParams>,
}

impl MultiHeadAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_model: usize, n_heads: usize, seed: u64, role: Role) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let mk = |store: &mut ParamStore<T>, p: &str| AdaptiveLinear::new(store, &format!("{name}.{p}"), d_model, d_model, seed, role);
        Ok(Self {
            q: mk(store, "q"),
            k: mk(store, "k"),
            v: mk(store, "v"),
            o: mk(store, "o"),
            n_heads,
            d_model,
            rel: None,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Adds relative-position parameters (embeddings random, biases zero).
    pub fn add_relative<T: Float>(&mut self, store: &mut ParamStore<T>, name: &str, max_dist: usize, seed: u64, role: Role) {
        let (h, dh) = (self.n_heads, self.d_head());
        let en = format!("{name}.rel.emb");
        let emb = store.add(en.clone(), normal(seed, &en, &[h, 2 * max_dist + 1, dh], 0.02), role);
        let u = store.add(format!("{name}.rel.u"), Tensor::zeros(&[h, dh]), role);
        let v = store.add(format!("{name}.rel.v"), Tensor::zeros(&[h, dh]), role);
        self.rel = Some(RelPosParams { emb, u, v, max_dist });
    }

    pub fn add_factors<T: Float>(&mut self, store: &mut ParamStore<T>, name: &str, langs: usize, k_scale: usize, k_bias: usize, seed: u64) {
        for (p, lin) in [("q", &mut self.q), ("k", &mut self.k), ("v", &mut self.v), ("o", &mut self.o)] {
            lin.add_factors(store, &format!("{name}.{p}"), langs, k_scale, k_bias, seed);
        }
    }

    /// `[B, T, d] -> [B * H, T, d_head]`
    fn split_heads<T: Float>(&self, fx: &mut Forward<T>, x: Var) -> Result<Var> {
        let s = fx.g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let x = fx.g.reshape(x, &[b, t, self.n_heads, self.d_head()])?;
        let x = fx.g.swap_axes12(x)?;
        fx.g.reshape(x, &[b * self.n_heads, t, self.d_head()])
    }

    /// Pre-softmax attention logits `[B * H, Tq, Tk]` (already scaled) and
    /// the projected values `[B * H, Tk, d_head]`.
    pub fn scores<T: Float>(&self, fx: &mut Forward<T>, xq: Var, xkv: Var, lang: LangId) -> Result<(Var, Var)> {
        let sq = fx.g.shape(xq).to_vec();
        let sk = fx.g.shape(xkv).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.d_model || sk[2] != self.d_model {
            return Err(Error::dims("attention", &sq, &sk));
        }
        let tk = sk[1];
        let scale = 1.0 / (self.d_head() as f64).sqrt();
        let q = self.q.forward(fx, xq, lang)?;
        let k = self.k.forward(fx, xkv, lang)?;
        let v = self.v.forward(fx, xkv, lang)?;
        let kh = self.split_heads(fx, k)?;
        let vh = self.split_heads(fx, v)?;
        let logits = match &self.rel {
            None => {
                let qh = self.split_heads(fx, q)?;
                fx.g.bmm(qh, kh, true)?
            }
            Some(rel) => {
                let d = self.d_model;
                let u = fx.p(rel.u);
                let u = fx.g.reshape(u, &[d])?;
                let pv = fx.p(rel.v);
                let pv = fx.g.reshape(pv, &[d])?;
                let qu = fx.g.add_bias(q, u)?;
                let qu = self.split_heads(fx, qu)?;
                let content = fx.g.bmm(qu, kh, true)?;
                let qv = fx.g.add_bias(q, pv)?;
                let qv = self.split_heads(fx, qv)?;
                let emb = fx.p(rel.emb);
                let by_dist = fx.g.bmm(qv, emb, true)?;
                let position = fx.g.rel_gather(by_dist, tk, rel.max_dist)?;
                fx.g.add(content, position)?
            }
        };
        Ok((fx.g.scale(logits, scale), vh))
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, xq: Var, xkv: Var, mask: Option<&AttnMask>, lang: LangId) -> Result<Var> {
        let (b, tq) = {
            let s = fx.g.shape(xq);
            (s[0], s[1])
        };
        let (logits, vh) = self.scores(fx, xq, xkv, lang)?;
        let probs = fx.g.masked_softmax(logits, mask)?;
        let probs = fx.dropout(probs);
        let ctx = fx.g.bmm(probs, vh, false)?;
        let ctx = fx.g.reshape(ctx, &[b, self.n_heads, tq, self.d_head()])?;
        let ctx = fx.g.swap_axes12(ctx)?;
        let ctx = fx.g.reshape(ctx, &[b, tq, self.d_model])?;
        self.o.forward(fx, ctx, lang)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_attention(store: &mut ParamStore<f64>, d: usize, heads: usize) -> MultiHeadAttention {
        let att = MultiHeadAttention::new(store, "att", d, heads, 1, Role::Shared).unwrap();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        for lin in [&att.q, &att.k, &att.v, &att.o] {
            *store.get_mut(lin.w) = Tensor::from_f64(&[d, d], &eye).unwrap();
        }
        att
    }

    #[test]
    fn single_position_returns_value_row() {
        let mut store = ParamStore::<f64>::new();
        let att = identity_attention(&mut store, 3, 1);
        let mut fx = Forward::new(&store);
        let x = fx.g.leaf(&Tensor::from_f64(&[1, 1, 3], &[0.5, -1.0, 2.0]).unwrap(), false);
        let y = att.forward(&mut fx, x, x, None, 0).unwrap();
        assert_eq!(fx.g.value(y), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn causal_first_position_sees_only_itself() {
        let mut store = ParamStore::<f64>::new();
        let att = identity_attention(&mut store, 4, 2);
        let mut fx = Forward::new(&store);
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = fx.g.leaf(&Tensor::from_f64(&[1, 3, 4], &data).unwrap(), false);
        let mask = AttnMask::new(&[3], 3, 3, true);
        let y = att.forward(&mut fx, x, x, Some(&mask), 0).unwrap();
        for j in 0..4 {
            assert!((fx.g.value(y)[j] - data[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::<f32>::new();
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "a", 6, 4, 0, Role::Shared),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_relative_parameters_reduce_to_absolute() {
        let mut store = ParamStore::<f64>::new();
        let abs = MultiHeadAttention::new(&mut store, "att", 8, 2, 5, Role::Shared).unwrap();
        let mut rel = abs.clone();
        rel.add_relative(&mut store, "att", 3, 5, Role::Shared);
        let emb = rel.rel.as_ref().unwrap().emb;
        let shape = store.get(emb).shape().to_vec();
        *store.get_mut(emb) = Tensor::zeros(&shape);
        let data: Vec<f64> = (0..2 * 5 * 8).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let xt = Tensor::from_f64(&[2, 5, 8], &data).unwrap();
        let mut fx = Forward::new(&store);
        let x = fx.g.leaf(&xt, false);
        let (la, _) = abs.scores(&mut fx, x, x, 0).unwrap();
        let (lr, _) = rel.scores(&mut fx, x, x, 0).unwrap();
        for (a, b) in fx.g.value(la).iter().zip(fx.g.value(lr)) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }
}
