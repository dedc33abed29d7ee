//! Language-adaptive linear projections.
//!
//! A shared weight `W_S: [m, n]` is modulated per language `L` by an
//! elementwise scale `W_ML` and an additive bias `W_BL`, each the sum of
//! `k` rank-1 outer products:
//!
//! ```text
//! y = (W_S ∘ W_ML + W_BL)ᵀ x + b_S,      W_ML = Σᵢ rᵢ sᵢᵀ,  W_BL = Σⱼ r'ⱼ s'ⱼᵀ
//! ```
//!
//! Factors are stored stacked: `R: [m, k]` holds the `rᵢ` as columns and
//! `S: [k, n]` holds the `sᵢ` as rows, so the sum is the product `R S`.
//!
//! At initialization the scale is exactly all-ones and the bias exactly zero,
//! so an adapted layer reproduces the shared layer bit-for-bit.

use crate::autodiff::{ParamId, Var};
use crate::error::{Error, Result};
use crate::kernels::Gemm;
use crate::params::{normal, xavier, ParamStore, Role};
use crate::tensor::{Float, Tensor};

use super::{Forward, LangId};

/// Scale and bias factors of one language. Either part may be absent when
/// its rank is zero.
#[derive(Clone, Debug)]
pub struct FactorSet {
    pub scale: Option<(ParamId, ParamId)>,
    pub bias: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct LanguageFactors {
    pub k_scale: usize,
    pub k_bias: usize,
    pub langs: Vec<FactorSet>,
}

#[derive(Clone, Debug)]
pub struct AdaptiveLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub factors: Option<LanguageFactors>,
}

impl AdaptiveLinear {
    /// Shared projection without any language factors yet.
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, seed: u64, role: Role) -> Self {
        let wn = format!("{name}.weight");
        let w = store.add(wn.clone(), xavier(seed, &wn, d_in, d_out), role);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), role);
        Self {
            w,
            b,
            d_in,
            d_out,
            factors: None,
        }
    }

    /// Registers identity-initialized factors for `langs` languages.
    ///
    /// The first scale pair is all-ones; further scale pairs and all bias
    /// pairs get a random `r` and a zero `s`, so their products start at
    /// exactly zero while still receiving gradient through `s`.
    pub fn add_factors<T: Float>(&mut self, store: &mut ParamStore<T>, name: &str, langs: usize, k_scale: usize, k_bias: usize, seed: u64) {
        let (m, n) = (self.d_in, self.d_out);
        let mut sets = Vec::with_capacity(langs);
        for l in 0..langs {
            let role = Role::LangFactor(l);
            let scale = (k_scale > 0).then(|| {
                let rn = format!("{name}.scale_r.{l}");
                let mut r: Tensor<T> = normal(seed, &rn, &[m, k_scale], 1.0);
                let mut s = Tensor::<T>::zeros(&[k_scale, n]);
                for i in 0..m {
                    r.data_mut()[i * k_scale] = T::one();
                }
                s.data_mut()[..n].iter_mut().for_each(|v| *v = T::one());
                (
                    store.add(rn, r, role),
                    store.add(format!("{name}.scale_s.{l}"), s, role),
                )
            });
            let bias = (k_bias > 0).then(|| {
                let rn = format!("{name}.bias_r.{l}");
                let r: Tensor<T> = normal(seed, &rn, &[m, k_bias], 1.0);
                (
                    store.add(rn, r, role),
                    store.add(format!("{name}.bias_s.{l}"), Tensor::<T>::zeros(&[k_bias, n]), role),
                )
            });
            sets.push(FactorSet { scale, bias });
        }
        self.factors = Some(LanguageFactors {
            k_scale,
            k_bias,
            langs: sets,
        });
    }

    /// Effective weight for `lang` as a graph node.
    pub fn effective_weight<T: Float>(&self, fx: &mut Forward<T>, lang: LangId) -> Result<Var> {
        let w = fx.p(self.w);
        let Some(f) = &self.factors else {
            return Ok(w);
        };
        let set = f.langs.get(lang).ok_or(Error::Language(lang))?;
        let mut eff = w;
        if let Some((r, s)) = set.scale {
            let (r, s) = (fx.p(r), fx.p(s));
            let scale = fx.g.matmul(r, s)?;
            eff = fx.g.mul(eff, scale)?;
        }
        if let Some((r, s)) = set.bias {
            let (r, s) = (fx.p(r), fx.p(s));
            let bias = fx.g.matmul(r, s)?;
            eff = fx.g.add(eff, bias)?;
        }
        Ok(eff)
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var, lang: LangId) -> Result<Var> {
        let last = *fx.g.shape(x).last().unwrap();
        if last != self.d_in {
            return Err(Error::dims("adaptive_linear", fx.g.shape(x), &[self.d_in, self.d_out]));
        }
        let w = self.effective_weight(fx, lang)?;
        let b = fx.p(self.b);
        let y = fx.g.matmul(x, w)?;
        fx.g.add_bias(y, b)
    }

    /// Number of registered languages (0 when unadapted).
    pub fn languages(&self) -> usize {
        self.factors.as_ref().map_or(0, |f| f.langs.len())
    }
}

/// Materializes `Σᵢ rᵢ sᵢᵀ` from `k` factor pairs `(rᵢ: [m], sᵢ: [n])`.
pub fn materialize_factorized<T: Float>(factors: &[(Tensor<T>, Tensor<T>)], k: usize) -> Result<Tensor<T>> {
    if k == 0 || factors.len() != k {
        return Err(Error::Dimension(format!(
            "expected {k} factor pairs, got {}",
            factors.len()
        )));
    }
    let m = factors[0].0.len();
    let n = factors[0].1.len();
    let mut r = vec![T::zero(); m * k];
    let mut s = Vec::with_capacity(k * n);
    for (i, (ri, si)) in factors.iter().enumerate() {
        if ri.len() != m || si.len() != n {
            return Err(Error::Dimension(format!(
                "factor {i} has lengths ({}, {}), expected ({m}, {n})",
                ri.len(),
                si.len()
            )));
        }
        for (row, &v) in ri.data().iter().enumerate() {
            r[row * k + i] = v;
        }
        s.extend_from_slice(si.data());
    }
    let mut out = vec![T::zero(); m * n];
    Gemm::new(m, k, n).run(&r, &s, &mut out);
    Tensor::new(vec![m, n], out)
}
