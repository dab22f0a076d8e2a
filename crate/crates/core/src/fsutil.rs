//! Small filesystem helpers shared by the file formats.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Write via a sibling temp file and rename, so readers never observe a
/// partially written file.
pub fn atomic_write(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("path {} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut w = BufWriter::new(File::create(&tmp)?);
    match f(&mut w) {
        Ok(()) => {}
        Err(e) => {
            drop(w);
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
    }
    if let Err(e) = w.flush() {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Atomic write of a complete byte buffer.
pub fn atomic_write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, |w| Ok(w.write_all(bytes)?))
}
