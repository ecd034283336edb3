//! The guided LSTM captioner with time-dependent, text-conditional guidance.

mod cell;
mod guidance;
mod params;
mod sequence;

pub use cell::{glstm_step, GateCache, LstmState};
pub use guidance::{
    guidance, guidance_full_tensor, history_vector, GuidanceCache, GuidanceMode, GuidanceVariant, History,
};
pub use params::{
    CondInit, FullTensorParams, Gate, GateParams, InitConfig, ModelDims, ModelParams, ParamGroup,
    MAX_TENSOR_ENTRIES,
};
pub use sequence::{
    backward_sequence, embed_image, embed_word, forward_sequence, forward_with_guidance, ForwardTrace, StepTrace,
};

pub(crate) use cell::step;
pub(crate) use guidance::compute as compute_guidance;
pub(crate) use params::cond_seed;
