//! Support code for the `conmh` binary: config merging, exit codes and run
//! manifests.

pub mod config;
pub mod exit;
pub mod manifest;

use std::path::Path;

use exit::CliError;

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
