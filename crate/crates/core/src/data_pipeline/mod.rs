//! Label, split and box files of the benchmark, segmentation data, and the
//! image preprocessing shared by every model.

mod boxes;
mod image;
mod jsrt;
mod manifest;

pub use self::image::{
    annotation_to_mask, load_image, load_mask, load_preprocessed, preprocess, save_mask, ImageTensor, PreprocessConfig,
};
pub use boxes::{load_boxes, to_frame, BoxAnnotation, FrameBox, Rect};
pub use jsrt::load_seg_dataset;
pub use manifest::{
    benchmark_counts, count_diff, format_counts, load_manifest, make_val_split, parse_findings, read_label_file,
    DatasetManifest, ManifestEntry, ManifestSources, Split, SplitCounts,
};
