//! The learned estimator: a small reverse-mode autodiff engine, the
//! tri-branch encoder-decoder model with attentional fusion, named
//! parameter storage, and the on-disk checkpoint format.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use graph::{NodeId, Tape};
pub use model::{
    aifm_fuse, dcb_forward, iem_forward, images_to_nchw, init_params, maps_to_nchw, model_forward,
    model_graph, nchw_to_map, param_specs, ucb_forward, BranchOutput, IemConfig, ModelConfig,
    ModelGraph, BRANCH_DIVISORS,
};
pub use params::ParamStore;
