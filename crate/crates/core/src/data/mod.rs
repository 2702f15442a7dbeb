//! CSV ingestion, preprocessing and synthetic cohorts.

pub mod preprocess;
pub mod synth;
pub mod table;

pub use preprocess::{dataset_to_table, preprocess, PreprocessOptions, PreprocessParams};
pub use synth::{generate_synthetic, smooth_sparse_weights, SyntheticSpec};
pub use table::{load_csv, write_csv, LongitudinalTable, TableRow, TableSchema};
