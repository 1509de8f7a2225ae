//! On-disk formats: IDX datasets, netpbm images, model checkpoints, and
//! attack-run manifests.

pub mod checkpoint;
pub mod idx;
pub mod netpbm;
pub mod run;

pub use checkpoint::{read_model, write_model};
pub use idx::{read_idx, write_idx};
pub use netpbm::{read_image, write_image};
pub use run::{load_run, save_run, RunEntry, RunRecord};
