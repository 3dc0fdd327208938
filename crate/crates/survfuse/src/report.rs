//! Run reports as TOML: one `[[folds]]` table per fold (with its test
//! predictions), the `[aggregate]` C-index summary and the pooled log-rank
//! test.

use std::fs;
use std::path::Path;

use survfuse_core::cv::CvReport;

use crate::error::{Error, Result};

pub fn to_toml(report: &CvReport) -> Result<String> {
    toml::to_string(report).map_err(|e| Error::Usage(format!("cannot serialise report: {e}")))
}

pub fn from_toml(text: &str, path: &Path) -> Result<CvReport> {
    toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save(path: &Path, report: &CvReport) -> Result<()> {
    fs::write(path, to_toml(report)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<CvReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_toml(&text, path)
}
