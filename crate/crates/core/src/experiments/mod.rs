//! Datasets, model construction and the evaluation artifacts behind the CLI.

pub mod bench;
pub mod builders;
pub mod config;
pub mod datasets;
pub mod grid;
pub mod metrics;
pub mod model_io;
pub mod run;
pub mod trace;

use std::fs::File;
use std::io;
use std::path::Path;

use crate::error::{Error, Result};

pub use bench::{bench_passes, BenchReport};
pub use builders::build_chain;
pub use config::{DatasetKind, DatasetSpec, EvalConfig, ExperimentConfig, ModelSpec};
pub use datasets::{gen_dataset, gen_samples, Dataset, Samples, TrueDensity};
pub use grid::{density_grid, DensityGrid};
pub use metrics::{bits_per_dim, score_heldout, HeldoutScore, MetricsReport, PassCounts};
pub use model_io::{load_model, save_model, SavedModel};
pub use run::{evaluate_models, matched_baseline, run_experiment, RunOutput, RunStreams};
pub use trace::{latent_trace, LatentTrace, TracePoint};

/// Writes through a sibling temp file and renames it over `path`, so readers
/// never see a partial file.
pub(crate) fn write_atomic(path: &Path, write: impl FnOnce(&mut File) -> io::Result<()>) -> Result<()> {
    let file_name =
        path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = File::create(&tmp).and_then(|mut f| {
        write(&mut f)?;
        f.sync_all()
    });
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
