//! Layer forward/backward passes and the two composite architectures.

pub mod blstm;
pub mod linear;
pub mod lstm;
pub mod model;
pub mod tconv;

pub use blstm::{blstm_backward, blstm_forward, blstm_forward_cached, BlstmCache};
pub use linear::{linear_backward, linear_forward, relu_backward};
pub use lstm::{
    lstm_sequence, lstm_sequence_backward, lstm_step, lstm_step_backward, lstm_step_cached,
    LstmParams, LstmState, StepCache, DEFAULT_CELL_CLIP,
};
pub use model::{
    backward, backward_with_cache, forward, forward_logits, init_params, FeedForwardSpec,
    ForwardCache, LayerParams, LayerShape, ModelParams, ModelSpec, RecurrentSpec,
};
pub use tconv::{gather_windows, time_convolution, time_convolution_backward};
