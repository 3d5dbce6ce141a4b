//! Trajectory-table ingestion, down-sampling, scene windowing, splits, and
//! a synthetic multi-vehicle scene generator for desk-scale experiments.

mod synthetic;
mod tracks;
mod window;

pub use synthetic::{generate_synthetic, Scenario, SyntheticSpec};
pub use tracks::{
    load_tracks, save_canonical_csv, ColumnMap, DataError, Recording, SourceFormat, TrackPoint,
    TrackTable, Unit, CHD_COLUMNS, FEET_TO_METERS, NGSIM_COLUMNS,
};
pub use window::{
    downsample, split, window_scenes, windows_to_tracks, DatasetConfig, DatasetFile, SceneVehicle,
    SceneWindow, SplitManifest, DATASET_SCHEMA_VERSION,
};
