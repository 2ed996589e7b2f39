//! Suites compiled into the library.
//!
//! The names table is a synthetic Zipf-like sample of 40 made-up names; it
//! stands in for real birth-record frequencies.

use std::path::Path;

use super::{parse_suite, SuiteConfig};
use crate::error::{Error, Result};

/// `(file name, contents)` for every bundled file.
pub const FILES: &[(&str, &str)] = &[
    ("rng.suite", include_str!("../../data/rng.suite")),
    ("range.suite", include_str!("../../data/range.suite")),
    ("loo.suite", include_str!("../../data/loo.suite")),
    ("bios.suite", include_str!("../../data/bios.suite")),
    ("names.tsv", include_str!("../../data/names.tsv")),
];

fn file(name: &str) -> Result<String> {
    FILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| text.to_string())
        .ok_or_else(|| Error::Config(format!("no bundled file `{name}`")))
}

/// Parses the bundled suite `name` (`rng`, `range`, `loo`, or `bios`).
pub fn suite(name: &str) -> Result<SuiteConfig> {
    let file_name = format!("{name}.suite");
    parse_suite(&file(&file_name)?, &file_name, &file)
}

pub fn rng_suite() -> SuiteConfig {
    suite("rng").expect("bundled rng suite is valid")
}

pub fn range_suite() -> SuiteConfig {
    suite("range").expect("bundled range suite is valid")
}

pub fn loo_suite() -> SuiteConfig {
    suite("loo").expect("bundled leave-one-out suite is valid")
}

pub fn bios_suite() -> SuiteConfig {
    suite("bios").expect("bundled bios suite is valid")
}

/// Writes every bundled file into `dir`.
pub fn export(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in FILES {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
