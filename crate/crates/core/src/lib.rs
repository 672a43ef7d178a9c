//! Memory matching for semi-supervised video object segmentation.
//!
//! Three ways of reading a value map out of past frames for a query frame:
//!
//! * [`softmax_matching`]: attention over every stored memory position.
//! * [`linear_matching`]: kernelized matching whose memory collapses into a
//!   fixed-size [`MatchState`], in parallel and recurrent form.
//! * [`gating`]: the recurrent state with a data-dependent forget gate.
//!
//! Around them sit [`multiobject`] (one state per tracked object plus
//! soft-aggregation), [`synthvos`] (a synthetic end-to-end propagation
//! pipeline with stub encoders) and [`bench`] (latency and accounted-memory
//! scaling). The guide in `book/` walks through each piece.

pub mod bench;
pub mod error;
pub mod gating;
pub mod linear_matching;
pub mod multiobject;
pub mod numerics;
pub mod softmax_matching;
pub mod synthvos;
pub mod verify;

pub use error::{Error, Result};
pub use gating::{GateProjector, GateVector, Reduction};
pub use linear_matching::{linear_match_parallel, phi, MatchState};
pub use multiobject::{soft_aggregate, MultiObjectTracker, ObjectId, ProbMap, TrackerConfig};
pub use numerics::{DType, Scalar, Tensor2D};
pub use softmax_matching::{generalized_match, softmax_match, MemoryBank};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/softmax-matching.md")]
    mod softmax_matching {}
    #[doc = include_str!("../../../book/src/linear-matching.md")]
    mod linear_matching {}
    #[doc = include_str!("../../../book/src/gating.md")]
    mod gating {}
    #[doc = include_str!("../../../book/src/multi-object.md")]
    mod multi_object {}
    #[doc = include_str!("../../../book/src/propagation.md")]
    mod propagation {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
