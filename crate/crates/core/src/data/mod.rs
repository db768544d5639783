//! On-disk formats and dataset construction.

mod checkpoint;
mod features;
mod records;
mod synthetic;

pub use checkpoint::{Checkpoint, RngState, TrainProgress, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use features::{FeatureStore, ImageFeatures, FEATURE_MAGIC, FEATURE_VERSION};
pub use records::{
    load_dialogs, load_records, load_vqa, save_records, DialogRecord, DialogRound, Record, VqaRecord, MAX_ROUNDS,
};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticData, SyntheticPaths, SyntheticSpec};
