//! Shared output formatting: CSV cells and JSON manifests.

use std::fs;
use std::io;
use std::path::Path;

pub const CSV_HEADER_TRAJECTORY: &str = "step,state,action,reward\n";
pub const CSV_HEADER_METRIC: &str = "x,y,value\n";

/// Version string embedded in every manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Formats a real with 17 significant digits and a '.' decimal separator.
pub fn fmt_real(x: f64) -> String {
    if x == 0.0 {
        // avoid "-0" so identical tables serialize identically
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)
}
