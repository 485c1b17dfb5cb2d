//! Probabilistic circuits: a generic sum/product/input DAG with exact
//! log-space inference, plus the trainable balanced-tree models and their
//! mixtures.

mod balanced;
mod dag;
mod mixture;

pub use balanced::{BalancedTreePc, PcConfig, PcStructure};
pub use dag::{
    mix, Circuit, CircuitBuilder, InputDist, LatentInterface, NodeId, NodeKind, ValidationReport,
    VarState,
};
pub use mixture::PcMixture;
