//! Dense tensors, tape-based reverse-mode gradients, MLP and LSTM layers,
//! Adam, and the `PATP` parameter snapshot format.

mod adam;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{LstmCellSpec, MlpSpec, OutputActivation};
pub use params::{
    decode_params, encode_params, flatten_params, load_params, save_params, unflatten_params, Layout,
    Param, ParamSet, SNAPSHOT_MAGIC, SNAPSHOT_VERSION,
};
pub use tape::{sigmoid, softmax_in_place, Gradients, ParamVars, Tape, Var};
pub use tensor::Tensor;
