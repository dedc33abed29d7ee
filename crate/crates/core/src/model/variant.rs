use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Position on the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationVariant {
    /// No pretraining.
    Tf,
    /// Pretrained acoustic encoder.
    W,
    /// Pretrained encoder and decoder.
    Wm,
    /// WM plus per-language adapters.
    Wma,
    /// WM plus per-language factorized weights.
    Wmf,
    /// WMA with every pretrained tensor frozen.
    Fwma,
    /// WMF with every pretrained tensor frozen.
    Fwmf,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Tf,
        AblationVariant::W,
        AblationVariant::Wm,
        AblationVariant::Wma,
        AblationVariant::Wmf,
        AblationVariant::Fwma,
        AblationVariant::Fwmf,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Tf => "TF",
            AblationVariant::W => "W",
            AblationVariant::Wm => "WM",
            AblationVariant::Wma => "WMA",
            AblationVariant::Wmf => "WMF",
            AblationVariant::Fwma => "FWMA",
            AblationVariant::Fwmf => "FWMF",
        }
    }

    pub fn needs_encoder_ckpt(self) -> bool {
        !matches!(self, AblationVariant::Tf)
    }

    pub fn needs_decoder_ckpt(self) -> bool {
        !matches!(self, AblationVariant::Tf | AblationVariant::W)
    }

    pub fn has_adapters(self) -> bool {
        matches!(self, AblationVariant::Wma | AblationVariant::Fwma)
    }

    pub fn has_factors(self) -> bool {
        matches!(self, AblationVariant::Wmf | AblationVariant::Fwmf)
    }

    pub fn is_frozen(self) -> bool {
        matches!(self, AblationVariant::Fwma | AblationVariant::Fwmf)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.label().to_lowercase().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("wmx".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn checkpoint_requirements() {
        use AblationVariant::*;
        assert!(!Tf.needs_encoder_ckpt());
        assert!(W.needs_encoder_ckpt() && !W.needs_decoder_ckpt());
        for v in [Wm, Wma, Wmf, Fwma, Fwmf] {
            assert!(v.needs_encoder_ckpt() && v.needs_decoder_ckpt());
        }
    }
}
