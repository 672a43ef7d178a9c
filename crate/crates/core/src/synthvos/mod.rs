//! Desk-scale mask propagation on synthetic videos.
//!
//! [`generate_sequence`] renders moving rectangles and disks over a textured
//! background, [`StubEncoders`] turn frames and masks into keys, values and
//! gate features, and [`propagate`] runs any of the matchers end to end and
//! scores every frame with [`jaccard`].

mod encoder;
mod metrics;
mod propagate;
mod sequence;

pub use encoder::{
    downsample_mask, patch_occupancy, patchify, EncoderConfig, StubEncoder, StubEncoders,
};
pub use metrics::{jaccard, write_jaccard_csv, write_pgm, JaccardRow};
pub use propagate::{
    matched_round_trip_jaccard, propagate, round_trip_jaccard, FrameOutput, PropagationConfig,
    PropagationResult, Regime,
};
pub use sequence::{
    generate_sequence, Image, Mask, ObjectSpec, SequenceSpec, ShapeKind, SyntheticSequence,
};
