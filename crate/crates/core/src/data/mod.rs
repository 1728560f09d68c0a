//! Volumes, NIfTI I/O, preprocessing, patch sampling and synthetic phantoms.

mod dataset;
mod io;
mod labels;
mod phantom;
mod preprocess;
mod sampling;
mod volume;

pub use dataset::{list_cases, preprocess_image, preprocess_labels, write_case, CaseFiles};
pub use io::{geometry_from_header, read_image, read_labels, write_image, write_labels};
pub use labels::{LabelMap, AORTA_CLASSES};
pub use phantom::{count_components, synthetic_phantom, PHANTOM_SPACING};
pub use preprocess::{
    normalize_intensity, resample_image, resample_image_to, resample_labels, resample_labels_to,
    resampled_dims,
};
pub use sampling::{crop_pos_neg, CropDraw, CropSampler, SamplePatch};
pub use volume::{Geometry, ImageVolume, LabelVolume, Volume};
