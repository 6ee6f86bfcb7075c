//! AUROC and ROC analysis, class activation maps, box extraction and IoU.

mod localize;
mod metrics;
mod render;

pub use localize::{
    cam, cam_raw, evaluate_localization, heatmap_to_box, iou, localization_table, normalize_heatmap, oracle_feature,
    upsample, HeatBox, LocalizationItem, LocalizationRow,
};
pub use metrics::{auroc, roc_curve, roc_table, select_threshold, trapezoid_area, MetricReport, RocPoint};
pub use render::{draw_rect, image_to_rgb, overlay, roc_plot, save_png, GT_COLOR, PRED_COLOR};
