//! Synthetic stand-ins for the speaker feature extractors and listener
//! labels, and the tensor container used for every file on disk.

pub mod config;
pub mod container;
pub mod dataset;
pub mod synth;

pub use config::{FeatureConfig, DIM_3DMM, DIM_EMO, EMO_AU, EMO_FE, EMO_VA};
pub use container::Container;
pub use dataset::{synth_dataset, write_dataset, Dataset, Manifest, ManifestEntry, Split};
pub use synth::{check_emotion_ranges, read_clip, synth_clip, write_clip, Clip, SpeakerFeatures};
