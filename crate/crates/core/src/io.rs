use std::io::Write;
use std::path::Path;

use crate::error::{MimeError, Result};

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failure never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| MimeError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| MimeError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| MimeError::io(path, e))?;
    tmp.persist(path).map_err(|e| MimeError::io(path, e.error))?;
    Ok(())
}
