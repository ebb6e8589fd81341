use std::fs;
use std::io::Write;
use std::path::Path;

use crate::CliError;

/// Creates `dir` if needed and checks that it takes new files.
pub fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    let fail = |e: std::io::Error| {
        CliError::Validation(format!("output directory {}: {e}", dir.display()))
    };
    fs::create_dir_all(dir).map_err(fail)?;
    tempfile::tempfile_in(dir).map_err(fail)?;
    Ok(())
}

/// Writes through a temporary file in the same directory, then renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::Runtime(format!("writing {}: {e}", path.display()));
    let tmp = tempfile::Builder::new()
        .prefix(".partial-")
        .tempfile_in(dir)
        .map_err(fail)?;
    fill(tmp.path())?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, |tmp| {
        let mut f = fs::File::create(tmp).map_err(CliError::runtime)?;
        f.write_all(bytes).map_err(CliError::runtime)?;
        f.sync_all().map_err(CliError::runtime)
    })
}
