//! Dataset schema, ingestion, state generalization, image preprocessing,
//! normalization, temporal windowing and multi-dataset mixing.

pub mod image;
pub mod io;
pub mod manifest;
pub mod mixing;
pub mod normalizer;
pub mod state;
pub mod window;

pub use self::image::{imagenet_normalize, CROP_SIZE, DEFAULT_IMAGE_SIZE, preprocess_image, preprocess_unit, UnitImage};
pub use manifest::{load_manifest, save_manifest, CameraModel, ClipEntry, ClipTags, DatasetManifest};
pub use mixing::{mix_datasets, LoadedDataset, MixedSplit, TestClip, TrainMode};
pub use normalizer::{apply_normalizer, fit_normalizer, Normalizer};
pub use state::{
    compute_velocities, generalize_state, GeneralizedState, RawState, StateField, StateLayout,
    StateVelocities, STATE_DIM,
};
pub use window::{build_windows, Clip, Frame, SampleWindow, WINDOW_LEN};
