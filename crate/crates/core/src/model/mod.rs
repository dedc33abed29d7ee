//! Encoder-decoder assembly for every point on the ablation ladder.

mod build;
pub mod checkpoint;
pub mod transformer;
mod variant;

pub use build::{build_model, freeze_pretrained, stack_encoders, DECODER_KIND, ENCODER_KIND};
pub use checkpoint::Checkpoint;
pub use transformer::{AcousticEncoder, ConvFrontEnd, Decoder, DecoderLayer, EncoderLayer, TextEncoder};
pub use variant::AblationVariant;

use crate::autodiff::{Reduction, Var};
use crate::config::ModelConfig;
use crate::data::{Batch, Vocab};
use crate::error::{Error, Result};
use crate::layers::{Forward, LangId};
use crate::params::{ParamStore, Role};
use crate::tensor::{Float, Tensor};

/// Wiring of a model; parameter ids point into the owning [`Model`]'s store.
#[derive(Clone, Debug)]
pub struct Arch {
    pub encoder: AcousticEncoder,
    /// Text-encoder layers appended after the acoustic encoder when stacked.
    pub stacked: Option<TextEncoder>,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub variant: AblationVariant,
    /// Initialization seed (per-parameter streams are derived from it).
    pub seed: u64,
    pub arch: Arch,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    /// Freshly initialized model. Language parameters are added according
    /// to `variant`; text-encoder layers when `config.stack_text_encoder`.
    pub fn new(config: &ModelConfig, variant: AblationVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size < Vocab::size_for(config.num_languages) {
            return Err(Error::Config(format!(
                "model.vocab_size {} cannot hold {} language tags (need {})",
                config.vocab_size,
                config.num_languages,
                Vocab::size_for(config.num_languages)
            )));
        }
        let mut params = ParamStore::new();
        let mut encoder = AcousticEncoder::new(&mut params, config, seed)?;
        let mut stacked = if config.stack_text_encoder {
            Some(TextEncoder::new(&mut params, config, false, seed)?)
        } else {
            None
        };
        let mut decoder = Decoder::new(&mut params, config, seed)?;
        let enc_names = (0..config.enc_layers).map(|i| format!("enc.layers.{i}"));
        let text_names = (0..config.text_enc_layers).map(|i| format!("text_enc.layers.{i}"));
        let mut enc_like: Vec<_> = encoder.layers.iter_mut().zip(enc_names).collect();
        if let Some(t) = &mut stacked {
            enc_like.extend(t.layers.iter_mut().zip(text_names));
        }
        for (layer, name) in enc_like {
            if variant.has_factors() {
                layer.add_factors(&mut params, &name, config, seed);
            }
            if variant.has_adapters() {
                layer.add_adapter(&mut params, &name, config, seed);
            }
        }
        for (i, layer) in decoder.layers.iter_mut().enumerate() {
            let name = format!("dec.layers.{i}");
            if variant.has_factors() {
                layer.add_factors(&mut params, &name, config, seed);
            }
            if variant.has_adapters() {
                layer.add_adapter(&mut params, &name, config, seed);
            }
        }
        Ok(Self {
            config: config.clone(),
            variant,
            seed,
            arch: Arch {
                encoder,
                stacked,
                decoder,
            },
            params,
        })
    }

    /// Encoder memory `[B, T', d]` and its valid lengths.
    pub fn encode(&self, fx: &mut Forward<T>, frames: &Tensor<f32>, lens: &[usize], lang: LangId) -> Result<(Var, Vec<usize>)> {
        let enc = &self.arch.encoder;
        let (x, lens) = enc.features(fx, frames, lens)?;
        let mut x = enc.contextualize(fx, x, &lens, lang)?;
        if let Some(text) = &self.arch.stacked {
            x = text.forward(fx, x, &lens, lang)?;
        }
        Ok((x, lens))
    }

    /// Teacher-forced next-token logits `[B, L, V]`.
    pub fn logits(&self, fx: &mut Forward<T>, batch: &Batch) -> Result<(Var, crate::data::DecoderIo)> {
        let (memory, mem_lens) = self.encode(fx, &batch.frames, &batch.frame_lens, batch.lang)?;
        let io = batch.decoder_io();
        let logits = self
            .arch
            .decoder
            .forward(fx, memory, &mem_lens, &io.inputs, &io.lens, io.width, batch.lang)?;
        Ok((logits, io))
    }

    /// Label-smoothed cross-entropy of `batch`.
    pub fn loss(&self, fx: &mut Forward<T>, batch: &Batch, smoothing: f64, reduction: Reduction) -> Result<Var> {
        let (logits, io) = self.logits(fx, batch)?;
        let v = self.config.vocab_size;
        let flat = fx.g.reshape(logits, &[batch.size() * io.width, v])?;
        fx.g.cross_entropy(flat, &io.targets, smoothing, reduction)
    }

    /// Names of parameters the optimizer updates.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params.trainable_names()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.count(&self.params.trainable())
    }

    /// Per-language scalars actually registered in this model.
    pub fn language_param_count(&self, lang: LangId) -> usize {
        self.params
            .iter()
            .filter(|(info, _)| info.role.language() == Some(lang))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn shared_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(info, _)| !info.role.is_language_specific() && info.role != Role::PretrainOnly)
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            variant: self.variant,
            seed: self.seed,
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Checkpoint with every tensor, the variant and the config echo.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("kind", "model");
        c.set_meta("variant", self.variant.label());
        for (k, v) in self.config.echo() {
            c.set_meta(&k, v);
        }
        for (info, t) in self.params.iter() {
            let mut t: Tensor<f32> = t.cast();
            t.set_requires_grad(false);
            c.tensors.push((info.name.clone(), t));
        }
        c
    }
}

impl Model<f32> {
    /// Rebuilds a model from its own checkpoint (config and variant taken
    /// from the echo).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_echo(&ckpt.meta)?;
        Self::from_checkpoint_with(ckpt, &config)
    }

    /// Rebuilds a model for `config`, rejecting tensors whose shapes differ.
    pub fn from_checkpoint_with(ckpt: &Checkpoint, config: &ModelConfig) -> Result<Self> {
        if ckpt.meta("kind") != Some("model") {
            return Err(Error::Checkpoint(format!(
                "expected a model checkpoint, found kind {:?}",
                ckpt.meta("kind").unwrap_or("?")
            )));
        }
        let variant: AblationVariant = ckpt
            .meta("variant")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no variant".into()))?
            .parse()?;
        let mut model = Self::new(config, variant, 0)?;
        for id in model.params.ids() {
            let name = model.params.info(id).name.clone();
            let src = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from checkpoint")))?;
            let dst = model.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?} does not match model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        if let Some((extra, _)) = ckpt.tensors.iter().find(|(n, _)| model.params.id(n).is_none()) {
            return Err(Error::Checkpoint(format!("tensor {extra} is not part of this model")));
        }
        Ok(model)
    }
}
