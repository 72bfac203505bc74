//! Manifest templates for the three public retinal datasets. Paths are
//! relative to the dataset root; copy a template next to the data and
//! load it with [`load_manifest`](super::load_manifest).

use super::DatasetManifest;
use crate::error::Result;

pub const HRF: &str = include_str!("../../templates/hrf.json");
pub const OCTA_6M: &str = include_str!("../../templates/octa6m.json");
pub const PRIME_FP20: &str = include_str!("../../templates/prime_fp20.json");

/// `(name, json)` for every shipped template.
pub const ALL: [(&str, &str); 3] = [("hrf", HRF), ("octa6m", OCTA_6M), ("prime_fp20", PRIME_FP20)];

pub fn hrf() -> Result<DatasetManifest> {
    DatasetManifest::from_json_str(HRF)
}

pub fn octa_6m() -> Result<DatasetManifest> {
    DatasetManifest::from_json_str(OCTA_6M)
}

pub fn prime_fp20() -> Result<DatasetManifest> {
    DatasetManifest::from_json_str(PRIME_FP20)
}

pub fn by_name(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, j)| *j)
}
