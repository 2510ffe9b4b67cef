use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use tastecf_core::data::DataError;
use tastecf_core::inference::InferenceError;
use tastecf_core::learn::LearnError;
use tastecf_core::ltm::ModelError;
use tastecf_core::metrics::MetricsError;
use tastecf_core::recommend::RecommendError;
use tastecf_core::synth::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Data { source: DataError, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Model { source: ModelError, path: PathBuf },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Usage(String),
}

pub fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// All-or-nothing output writing: files go to `<path>.tmp` first and are
/// renamed into place only on `commit`; a drop without commit removes every
/// staged temporary, so failures leave no partial outputs behind.
pub struct StagedOutputs {
    staged: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl StagedOutputs {
    pub fn new() -> Self {
        StagedOutputs {
            staged: Vec::new(),
            committed: false,
        }
    }

    pub fn write(&mut self, path: &Path, content: &str) -> Result<(), CliError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, content).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.staged.push((path.to_path_buf(), tmp));
        Ok(())
    }

    pub fn commit(mut self) -> Result<(), CliError> {
        let staged = std::mem::take(&mut self.staged);
        let mut renamed: Vec<PathBuf> = Vec::with_capacity(staged.len());
        for (path, tmp) in &staged {
            if let Err(source) = fs::rename(tmp, path) {
                for done in &renamed {
                    let _ = fs::remove_file(done);
                }
                for (_, tmp) in &staged {
                    let _ = fs::remove_file(tmp);
                }
                self.committed = true; // nothing left to clean in drop
                return Err(CliError::Io {
                    path: path.clone(),
                    source,
                });
            }
            renamed.push(path.clone());
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for StagedOutputs {
    fn drop(&mut self) {
        if !self.committed {
            for (_, tmp) in &self.staged {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}
