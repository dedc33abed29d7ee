//! Encoder and decoder stacks assembled from the layers in [`crate::layers`].
//!
//! All stacks are pre-norm: every sublayer reads `LN(x)` and adds its output
//! back onto `x`. An optional per-language adapter follows the last sublayer.

use crate::autodiff::{AttnMask, ParamId, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Adapter, FeedForward, Forward, LangId, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{normal, ParamStore, Role};
use crate::tensor::{Float, Tensor};

/// Sinusoidal position table `[t, d]`.
pub fn sinusoid(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Adds the same `[t, d]` position table to every batch row of `x: [B, t, d]`.
fn add_positions<T: Float>(fx: &mut Forward<T>, x: Var) -> Result<Var> {
    let s = fx.g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let table = sinusoid(t, d);
    let mut data = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        data.extend(table.iter().map(|&v| T::of(v)));
    }
    let pe = fx.g.constant(&s, data);
    fx.g.add(x, pe)
}

/// Token embedding lookup scaled by `sqrt(d)` plus sinusoidal positions.
pub fn embed_tokens<T: Float>(fx: &mut Forward<T>, table: ParamId, ids: &[usize], b: usize, l: usize) -> Result<Var> {
    let d = fx.params().get(table).shape()[1];
    let e = fx.p(table);
    let x = fx.g.gather_rows(e, ids, &[b, l, d])?;
    let x = fx.g.scale(x, (d as f64).sqrt());
    let x = add_positions(fx, x)?;
    Ok(fx.dropout(x))
}

/// Prime factors of `n` in ascending order (`[1]` for `n = 1`).
fn strides(n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![1];
    }
    let (mut n, mut p, mut out) = (n, 2, Vec::new());
    while n > 1 {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    out
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub proj: Linear,
    pub kernel: usize,
    pub stride: usize,
}

/// Strided 1-D convolutions reducing time by `factor` overall. Each stage
/// has kernel `stride + 1` and repeats an utterance's last frame at its
/// right edge, so `T' = ceil(T / factor)`.
#[derive(Clone, Debug)]
pub struct ConvFrontEnd {
    pub layers: Vec<ConvLayer>,
    pub factor: usize,
}

impl ConvFrontEnd {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, features: usize, d: usize, factor: usize, seed: u64) -> Self {
        let mut c_in = features;
        let layers = strides(factor)
            .into_iter()
            .enumerate()
            .map(|(i, stride)| {
                let kernel = if stride == 1 { 1 } else { stride + 1 };
                let proj = Linear::new(store, &format!("{name}.{i}"), kernel * c_in, d, seed, Role::Shared);
                c_in = d;
                ConvLayer { proj, kernel, stride }
            })
            .collect();
        Self { layers, factor }
    }

    /// Output length for an input of `t` frames.
    pub fn out_len(&self, t: usize) -> usize {
        self.layers.iter().fold(t, |t, l| t.div_ceil(l.stride))
    }

    /// `x: [B, T, F]` with per-utterance lengths; returns `[B, T', d]` and
    /// the downsampled lengths.
    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var, lens: &[usize]) -> Result<(Var, Vec<usize>)> {
        if let Some(&short) = lens.iter().find(|&&l| l < self.factor) {
            return Err(Error::Data(format!(
                "utterance of {short} frames is shorter than the downsampling factor {}",
                self.factor
            )));
        }
        let (mut x, mut lens) = (x, lens.to_vec());
        for layer in &self.layers {
            let u = fx.g.unfold1d(x, &lens, layer.kernel, layer.stride)?;
            let y = layer.proj.forward(fx, u)?;
            x = fx.g.gelu(y);
            lens = lens.iter().map(|l| l.div_ceil(layer.stride)).collect();
        }
        Ok((x, lens))
    }
}

/// Self-attention + feed-forward block shared by the acoustic and text encoders.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub adapter: Option<Adapter>,
}

impl EncoderLayer {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rel: bool, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let mut attn = MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.n_heads, seed, Role::Shared)?;
        if rel {
            attn.add_relative(store, &format!("{name}.self_attn"), cfg.rel_window, seed, Role::Shared);
        }
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, cfg.ln_eps, Role::Shared),
            attn,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, cfg.ln_eps, Role::Shared),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, seed, Role::Shared),
            adapter: None,
        })
    }

    pub fn add_factors<T: Float>(&mut self, store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, seed: u64) {
        let (l, ks, kb) = (cfg.num_languages, cfg.k_scale, cfg.k_bias);
        self.attn.add_factors(store, &format!("{name}.self_attn"), l, ks, kb, seed);
        self.ffn.add_factors(store, &format!("{name}.ffn"), l, ks, kb, seed);
    }

    pub fn add_adapter<T: Float>(&mut self, store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, seed: u64) {
        self.adapter = Some(Adapter::new(
            store,
            &format!("{name}.adapter"),
            cfg.d_model,
            cfg.adapter_hidden,
            cfg.num_languages,
            cfg.ln_eps,
            seed,
        ));
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var, mask: &AttnMask, lang: LangId) -> Result<Var> {
        let h = self.ln1.forward(fx, x)?;
        let h = self.attn.forward(fx, h, h, Some(mask), lang)?;
        let h = fx.dropout(h);
        let x = fx.g.add(x, h)?;
        let h = self.ln2.forward(fx, x)?;
        let h = self.ffn.forward(fx, h, lang)?;
        let h = fx.dropout(h);
        let x = fx.g.add(x, h)?;
        match &self.adapter {
            Some(a) => a.forward(fx, x, lang),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
    pub adapter: Option<Adapter>,
}

impl DecoderLayer {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let x = Role::CrossAttention;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, cfg.ln_eps, Role::Shared),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.n_heads, seed, Role::Shared)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d, cfg.ln_eps, x),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.n_heads, seed, x)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d, cfg.ln_eps, Role::Shared),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, seed, Role::Shared),
            adapter: None,
        })
    }

    pub fn add_factors<T: Float>(&mut self, store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, seed: u64) {
        let (l, ks, kb) = (cfg.num_languages, cfg.k_scale, cfg.k_bias);
        self.self_attn.add_factors(store, &format!("{name}.self_attn"), l, ks, kb, seed);
        self.cross_attn.add_factors(store, &format!("{name}.cross_attn"), l, ks, kb, seed);
        self.ffn.add_factors(store, &format!("{name}.ffn"), l, ks, kb, seed);
    }

    pub fn add_adapter<T: Float>(&mut self, store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, seed: u64) {
        self.adapter = Some(Adapter::new(
            store,
            &format!("{name}.adapter"),
            cfg.d_model,
            cfg.adapter_hidden,
            cfg.num_languages,
            cfg.ln_eps,
            seed,
        ));
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var, memory: Var, self_mask: &AttnMask, cross_mask: &AttnMask, lang: LangId) -> Result<Var> {
        let h = self.ln1.forward(fx, x)?;
        let h = self.self_attn.forward(fx, h, h, Some(self_mask), lang)?;
        let h = fx.dropout(h);
        let x = fx.g.add(x, h)?;
        let h = self.ln_cross.forward(fx, x)?;
        let h = self.cross_attn.forward(fx, h, memory, Some(cross_mask), lang)?;
        let h = fx.dropout(h);
        let x = fx.g.add(x, h)?;
        let h = self.ln3.forward(fx, x)?;
        let h = self.ffn.forward(fx, h, lang)?;
        let h = fx.dropout(h);
        let x = fx.g.add(x, h)?;
        match &self.adapter {
            Some(a) => a.forward(fx, x, lang),
            None => Ok(x),
        }
    }
}

/// Convolutional front end followed by a transformer encoder and final norm.
#[derive(Clone, Debug)]
pub struct AcousticEncoder {
    pub conv: ConvFrontEnd,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
    pub rel_pos: bool,
}

impl AcousticEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let conv = ConvFrontEnd::new(store, "enc.conv", cfg.feature_dim, cfg.d_model, cfg.conv_downsample_factor, seed);
        let layers = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("enc.layers.{i}"), cfg, cfg.rel_pos, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            conv,
            layers,
            final_ln: LayerNorm::new(store, "enc.final_ln", cfg.d_model, cfg.ln_eps, Role::Shared),
            rel_pos: cfg.rel_pos,
        })
    }

    /// Downsampled features `[B, T', d]` before any masking or context.
    pub fn features<T: Float>(&self, fx: &mut Forward<T>, frames: &Tensor<f32>, lens: &[usize]) -> Result<(Var, Vec<usize>)> {
        let s = frames.shape();
        if s.len() != 3 || s[0] != lens.len() {
            return Err(Error::Dimension(format!(
                "frames of shape {s:?} do not match {} lengths",
                lens.len()
            )));
        }
        let x = fx.g.leaf(&frames.cast(), false);
        self.conv.forward(fx, x, lens)
    }

    /// Transformer context over downsampled features.
    pub fn contextualize<T: Float>(&self, fx: &mut Forward<T>, x: Var, lens: &[usize], lang: LangId) -> Result<Var> {
        let t = fx.g.shape(x)[1];
        let mut x = if self.rel_pos { x } else { add_positions(fx, x)? };
        x = fx.dropout(x);
        let mask = AttnMask::new(lens, t, t, false);
        for layer in &self.layers {
            x = layer.forward(fx, x, &mask, lang)?;
        }
        self.final_ln.forward(fx, x)
    }
}

/// Text encoder layers. Inside the denoising pretrainer it ends with its own
/// norm; when stacked on the acoustic encoder only the layers are used.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: Option<LayerNorm>,
}

impl TextEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, with_final_ln: bool, seed: u64) -> Result<Self> {
        let layers = (0..cfg.text_enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("text_enc.layers.{i}"), cfg, false, seed))
            .collect::<Result<_>>()?;
        let final_ln = with_final_ln.then(|| LayerNorm::new(store, "text_enc.final_ln", cfg.d_model, cfg.ln_eps, Role::Shared));
        Ok(Self { layers, final_ln })
    }

    pub fn forward<T: Float>(&self, fx: &mut Forward<T>, x: Var, lens: &[usize], lang: LangId) -> Result<Var> {
        let t = fx.g.shape(x)[1];
        let mask = AttnMask::new(lens, t, t, false);
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(fx, x, &mask, lang)?;
        }
        match &self.final_ln {
            Some(ln) => ln.forward(fx, x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
    pub out_proj: Linear,
    pub vocab: usize,
}

impl Decoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let en = "dec.embed.weight";
        let embed = store.add(en, normal(seed, en, &[v, d], (1.0 / d as f64).sqrt()), Role::Shared);
        let layers = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(store, &format!("dec.layers.{i}"), cfg, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            layers,
            final_ln: LayerNorm::new(store, "dec.final_ln", d, cfg.ln_eps, Role::Shared),
            out_proj: Linear::new(store, "dec.out_proj", d, v, seed, Role::Shared),
            vocab: v,
        })
    }

    /// Next-token logits `[B, L, V]` for token ids `[B, L]` (row-major,
    /// right-padded; `tgt_lens[b]` real tokens per row).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        fx: &mut Forward<T>,
        memory: Var,
        mem_lens: &[usize],
        ids: &[usize],
        tgt_lens: &[usize],
        l: usize,
        lang: LangId,
    ) -> Result<Var> {
        let b = tgt_lens.len();
        let tm = fx.g.shape(memory)[1];
        let mut x = embed_tokens(fx, self.embed, ids, b, l)?;
        let self_mask = AttnMask::new(tgt_lens, l, l, true);
        let cross_mask = AttnMask::new(mem_lens, l, tm, false);
        for layer in &self.layers {
            x = layer.forward(fx, x, memory, &self_mask, &cross_mask, lang)?;
        }
        let x = self.final_ln.forward(fx, x)?;
        self.out_proj.forward(fx, x)
    }
}
