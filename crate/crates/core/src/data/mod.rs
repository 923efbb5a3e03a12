//! Synthetic corpora and the on-disk formats for features, datasets and
//! run configuration.

pub mod config;
pub mod dataset;
pub mod features;
pub mod synthetic;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use config::{load_config, RunConfig};
pub use dataset::{Dataset, Split};
pub use features::{read_features, write_features, FeatureFile, FeatureModality};
pub use synthetic::{generate_corpus, Corpus, SyntheticSpec};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
