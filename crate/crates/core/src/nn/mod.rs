//! Layers, parameter storage and the forward context that ties them to the tape.

mod layer;
mod session;
mod store;

pub use layer::{
    init_params, Activation, Layer, LayerKind, LayerSpec, Network, NormKind, BN_EPS, BN_MOMENTUM,
};
pub use session::Session;
pub use store::{ParamKind, ParamStore, TieGroupId};
