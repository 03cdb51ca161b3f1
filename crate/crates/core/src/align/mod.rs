//! Timestamp alignment of asynchronous camera, wrench and pose streams, plus
//! action extraction (pose deltas, gripper events, normalization).

mod gripper;
mod normalize;
mod pose;
mod window;

pub use gripper::{infer_gripper_state, GripperEvent, GripperEventKind, GripperState, GripperTrack};
pub use normalize::{ActionStats, Normalized};
pub use pose::{apply_delta, pose_delta, transform_marker_to_tcp, DeltaPose, Pose};
pub use window::{
    assign_windows, decimate, pair_cameras, resample_block, BlockFill, FtBlock, TimedStream,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignError {
    #[error("stream '{stream}' is not strictly increasing at index {index}")]
    Unordered { stream: String, index: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
