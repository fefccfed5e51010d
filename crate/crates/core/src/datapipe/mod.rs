//! Data ingestion, augmentation, fold planning and synthetic data.

pub mod augment;
pub mod baseline;
pub mod folds;
pub mod image;
pub mod manifest;
pub mod synth;

pub use self::augment::{augment_train, augment_with, eval_image, preprocess_eval, AugmentConfig, AugmentDraws};
pub use self::baseline::{intensity_histogram, HistogramLogistic};
pub use self::folds::{split_folds, FoldPlan, NUM_FOLDS};
pub use self::image::{ingest_directory, IngestOptions, IngestWarning, Ingested, Label, LabeledImage};
pub use self::manifest::{dataset_id, read_manifest, write_image_dataset, write_manifest, ManifestRow};
pub use self::synth::{blob_mask, synth_generate, synth_generate_samples, SynthSample, SynthSpec};
