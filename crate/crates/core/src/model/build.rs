use super::{AblationVariant, Checkpoint, Model};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Origin, Role};

pub const ENCODER_KIND: &str = "encoder";
pub const DECODER_KIND: &str = "decoder";

/// Checks that a pretraining checkpoint can feed a model of `config`.
fn check_source(ckpt: &Checkpoint, kind: &str, config: &ModelConfig) -> Result<ModelConfig> {
    if ckpt.meta("kind") != Some(kind) {
        return Err(Error::Config(format!(
            "expected a {kind} pretraining checkpoint, found kind {:?}",
            ckpt.meta("kind").unwrap_or("?")
        )));
    }
    let src = ModelConfig::from_echo(&ckpt.meta)?;
    if src.d_model != config.d_model {
        return Err(Error::Config(format!(
            "{kind} checkpoint has d_model {}, model has {}",
            src.d_model, config.d_model
        )));
    }
    if kind == DECODER_KIND && src.vocab_size != config.vocab_size {
        return Err(Error::Config(format!(
            "decoder checkpoint has vocab_size {}, model has {}",
            src.vocab_size, config.vocab_size
        )));
    }
    Ok(src)
}

/// Copies every checkpoint tensor whose name satisfies `want` into the
/// model and records `origin`. Shared tensors absent from the checkpoint
/// keep their fresh values.
fn load_from(model: &mut Model<f32>, ckpt: &Checkpoint, origin: Origin, want: impl Fn(&str, Role) -> bool) -> Result<usize> {
    let mut loaded = 0;
    for id in model.params.ids() {
        let info = model.params.info(id);
        if !want(&info.name, info.role) {
            continue;
        }
        let name = info.name.clone();
        let Some(src) = ckpt.tensor(&name) else { continue };
        let dst = model.params.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} does not match model shape {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
        model.params.set_origin(id, origin);
        loaded += 1;
    }
    Ok(loaded)
}

/// Assembles a model for `variant`.
///
/// * `TF`: random initialization.
/// * `W`: acoustic encoder tensors from `enc`.
/// * `WM` and above: additionally the decoder's embedding, self-attention,
///   feed-forward, norms and output projection from `dec`; cross-attention
///   stays freshly initialized.
/// * `WMA`/`WMF` add adapters/factors; `FWMA`/`FWMF` also freeze every
///   loaded tensor.
///
/// With `config.stack_text_encoder` the text-encoder layers of `dec` are
/// appended after the acoustic encoder.
pub fn build_model(
    config: &ModelConfig,
    variant: AblationVariant,
    enc: Option<&Checkpoint>,
    dec: Option<&Checkpoint>,
    seed: u64,
) -> Result<Model<f32>> {
    if variant.needs_encoder_ckpt() && enc.is_none() {
        return Err(Error::Config(format!("variant {variant} requires an encoder checkpoint")));
    }
    if variant.needs_decoder_ckpt() && dec.is_none() {
        return Err(Error::Config(format!("variant {variant} requires a decoder checkpoint")));
    }
    if config.stack_text_encoder && dec.is_none() {
        return Err(Error::Config("stacking the text encoder requires a decoder checkpoint".into()));
    }
    let base = ModelConfig {
        stack_text_encoder: false,
        ..config.clone()
    };
    let mut model = Model::new(&base, variant, seed)?;
    if variant.needs_encoder_ckpt() {
        let enc = enc.unwrap();
        check_source(enc, ENCODER_KIND, config)?;
        load_from(&mut model, enc, Origin::EncoderCheckpoint, |n, r| {
            n.starts_with("enc.") && r == Role::Shared
        })?;
    }
    if variant.needs_decoder_ckpt() {
        let dec = dec.unwrap();
        check_source(dec, DECODER_KIND, config)?;
        load_from(&mut model, dec, Origin::DecoderCheckpoint, |n, r| {
            n.starts_with("dec.") && r == Role::Shared
        })?;
    }
    if config.stack_text_encoder {
        model = stack_encoders(model, dec.unwrap())?;
    }
    if variant.is_frozen() {
        freeze_pretrained(&mut model)?;
    }
    Ok(model)
}

/// Appends the text-encoder layers of a decoder-pretraining checkpoint
/// after the acoustic encoder. Sequence length is unchanged; the decoder
/// cross-attends to the stacked output. Both stacks stay trainable.
pub fn stack_encoders(model: Model<f32>, dec: &Checkpoint) -> Result<Model<f32>> {
    if model.arch.stacked.is_some() {
        return Err(Error::Usage("model is already stacked".into()));
    }
    let src = check_source(dec, DECODER_KIND, &model.config)?;
    let config = ModelConfig {
        stack_text_encoder: true,
        text_enc_layers: src.text_enc_layers,
        ..model.config.clone()
    };
    let mut stacked = Model::new(&config, model.variant, model.seed)?;
    for (info, t) in model.params.iter() {
        let id = stacked.params.id(&info.name).expect("stacked model is a superset");
        *stacked.params.get_mut(id) = t.clone();
        stacked.params.set_origin(id, info.origin);
    }
    let loaded = load_from(&mut stacked, dec, Origin::DecoderCheckpoint, |n, r| {
        n.starts_with("text_enc.layers.") && r == Role::Shared
    })?;
    if loaded == 0 {
        return Err(Error::Checkpoint("decoder checkpoint holds no text-encoder layers".into()));
    }
    Ok(stacked)
}

/// Stops gradient flow into every tensor that came from a pretraining
/// checkpoint. Only valid for the frozen variants.
pub fn freeze_pretrained(model: &mut Model<f32>) -> Result<()> {
    if !model.variant.is_frozen() {
        return Err(Error::Usage(format!(
            "freeze_pretrained called on non-frozen variant {}",
            model.variant
        )));
    }
    for id in model.params.ids() {
        if model.params.info(id).origin.is_pretrained() {
            model.params.get_mut(id).set_requires_grad(false);
        }
    }
    Ok(())
}
