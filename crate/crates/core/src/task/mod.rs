//! Machine-task proxy: synthetic stereo scenes, a small detection and
//! disparity head, its distortion, and the proxy AP metric.

mod head;
mod metric;
mod scene;

pub use head::{
    task_distortion, DistortionVars, Head, HeadConfig, PredVars, TaskPrediction, TaskTargets, FOCAL_ALPHA, FOCAL_GAMMA,
    SMOOTH_L1_BETA,
};
pub use metric::{average_precision, detect, truth_rects, CellRect, Detection, MATCH_IOU, NMS_IOU, SCORE_THRESHOLD};
pub use scene::{generate_scene, load_rgb, tensor_to_rgb, SceneBox, SceneConfig, SyntheticScene};
