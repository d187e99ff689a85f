use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::PipelineError;
use crate::gates::AfsVariant;
use crate::transformer::{BeamConfig, LengthPenalty};

/// Which encoder outputs feed the st model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionKind {
    /// Positions with an open expected temporal gate.
    Afs,
    /// Every `fixed_rate_k`-th position.
    FixedRate,
    /// Strided depthwise-separable convolution, trained with the st model.
    Cnn,
    /// Every position, ungated.
    All,
}

impl SelectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionKind::Afs => "afs",
            SelectionKind::FixedRate => "fixed-rate",
            SelectionKind::Cnn => "cnn",
            SelectionKind::All => "all",
        }
    }
}

impl fmt::Display for SelectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "afs" => Ok(SelectionKind::Afs),
            "fixed-rate" | "fixed" => Ok(SelectionKind::FixedRate),
            "cnn" => Ok(SelectionKind::Cnn),
            "all" | "asr-pt" => Ok(SelectionKind::All),
            _ => Err(format!("unknown selection `{s}`")),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(u64, usize, f64, bool, SelectionKind);

impl ConfigValue for Option<AfsVariant> {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "none" => Some(None),
            "t" => Some(Some(AfsVariant::T)),
            "tf" => Some(Some(AfsVariant::TF)),
            _ => None,
        }
    }

    fn render(&self) -> String {
        self.map_or("none", AfsVariant::as_str).to_string()
    }
}

impl ConfigValue for LengthPenalty {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "gnmt" => Some(LengthPenalty::Gnmt),
            "power" => Some(LengthPenalty::Power),
            _ => None,
        }
    }

    fn render(&self) -> String {
        match self {
            LengthPenalty::Gnmt => "gnmt",
            LengthPenalty::Power => "power",
        }
        .to_string()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $field:ident: $ty:ty = $default:expr,)*) => {
        /// Every knob of a run, read from `key = value` lines.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            /// Every recognised key, in file order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field),)*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
                let bad = || PipelineError::InvalidValue { key: key.to_string(), value: value.to_string() };
                match key {
                    $(stringify!($field) => self.$field = ConfigValue::parse_value(value).ok_or_else(bad)?,)*
                    _ => return Err(PipelineError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// All keys as `key = value` lines; parsing the result gives back `self`.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", stringify!($field), self.$field.render()));)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 1,
    d_model: usize = 64,
    heads: usize = 4,
    d_ff: usize = 128,
    /// Layers of the asr and mt encoders.
    encoder_layers: usize = 2,
    decoder_layers: usize = 2,
    st_encoder_layers: usize = 2,
    max_positions: usize = 2048,
    attention_dropout: f64 = 0.1,
    residual_dropout: f64 = 0.2,
    label_smoothing: f64 = 0.1,
    asr_steps: u64 = 3000,
    afs_steps: u64 = 1000,
    st_steps: u64 = 3000,
    mt_steps: u64 = 3000,
    warmup: u64 = 400,
    /// Target tokens per batch.
    batch_tokens: usize = 1000,
    /// Multiplier on the inverse-square-root schedule.
    lr_scale: f64 = 1.0,
    /// CTC weight; the MLE weight is `1 - gamma`.
    gamma: f64 = 0.3,
    lambda: f64 = 0.5,
    afs_variant: Option<AfsVariant> = Some(AfsVariant::TF),
    /// Initial feature log-alpha.
    feature_init: f64 = 3.0,
    /// Finetune only the gate weights.
    gates_only: bool = false,
    /// Restart the schedule at step 1 in later stages.
    reset_lr: bool = false,
    selection: SelectionKind = SelectionKind::Afs,
    fixed_rate_k: usize = 6,
    cnn_kernel: usize = 5,
    cnn_stride: usize = 6,
    cnn_padding: usize = 2,
    /// Train the asr encoder (and gates) jointly with the st model.
    unfreeze_asr: bool = false,
    /// Expected temporal gates must exceed this to be kept.
    gate_threshold: f64 = 0.0,
    beam: usize = 4,
    length_penalty: f64 = 0.6,
    penalty_form: LengthPenalty = LengthPenalty::Gnmt,
    max_decode_len: usize = 100,
    /// Snapshot interval in steps; 0 keeps only the final state.
    checkpoint_every: u64 = 0,
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Like [`RunConfig::parse`], but over `self` instead of the defaults.
    pub fn apply(&mut self, text: &str) -> Result<(), PipelineError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| PipelineError::ConfigSyntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.fixed_rate_k == 0 {
            return bad("fixed_rate_k must be at least 1");
        }
        if self.cnn_kernel == 0 || self.cnn_stride == 0 {
            return bad("cnn kernel and stride must be positive");
        }
        if self.beam == 0 {
            return bad("beam must be at least 1");
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive");
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return bad("lr_scale must be positive");
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        1.0 - self.gamma
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            alpha: self.length_penalty,
            penalty: self.penalty_form,
            max_len: self.max_decode_len,
            ..BeamConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            lambda: 0.25,
            afs_variant: None,
            selection: SelectionKind::Cnn,
            penalty_form: LengthPenalty::Power,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = RunConfig::parse("# run\n\nlambda = 0.3  # sweep\nafs_variant = t\n").unwrap();
        assert_eq!(cfg.lambda, 0.3);
        assert_eq!(cfg.afs_variant, Some(AfsVariant::T));
        assert_eq!(cfg.eta(), 0.7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse("lamda = 0.3"), Err(PipelineError::UnknownKey(k)) if k == "lamda"));
        assert!(matches!(
            RunConfig::parse("beam = four"),
            Err(PipelineError::InvalidValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse("beam 4"),
            Err(PipelineError::ConfigSyntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("gamma = 1.5"),
            Err(PipelineError::InvalidConfig(_))
        ));
        assert!(matches!(
            RunConfig::parse("lambda = -1"),
            Err(PipelineError::InvalidConfig(_))
        ));
    }
}
