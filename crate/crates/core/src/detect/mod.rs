//! Anchor-based single-stage detection: anchors, matching, the multibox
//! loss with hard negative mining, decoding, suppression and training.

mod anchors;
mod boxes;
mod decode;
mod loss;
mod matching;
mod train;

pub use anchors::{generate_anchors, AnchorError, AnchorSet};
pub use boxes::{decode, encode, BBox, Detection, VARIANCES};
pub use decode::{decode_and_nms, lesion_score, nms, CONF_THRESHOLD, NMS_IOU};
pub use loss::{mine_negatives, LossOutput, NEG_RATIO};
pub use matching::{match_anchors, AnchorLabel, MatchResult, ThresholdError, NEG_IOU, POS_IOU};
pub use train::{
    log_csv, predict, select_input, LogRow, ModelInfo, TrainConfig, TrainError, Trainer,
};
