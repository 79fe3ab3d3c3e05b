//! Run manifest: everything needed to reproduce an output directory
//! byte for byte. Written before any other output.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io;
use std::path::Path;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_path: String,
    pub config_sha256: String,
    pub spec_paths: Vec<String>,
    pub spec_sha256: Vec<String>,
    pub seed: u64,
    pub replicates: u64,
    pub imputations: usize,
    pub n_oracle: usize,
    pub out_dir: String,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
