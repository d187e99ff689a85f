//! Speech translation with learned sparse encoder outputs: L0-gated feature
//! pruning between a pretrained speech recognizer and a translation model.

pub mod ctc;
pub mod frontend;
pub mod gates;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod transformer;
