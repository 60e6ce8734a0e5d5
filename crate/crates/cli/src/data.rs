//! Dataset paths: files are taken as given, directories contribute their
//! `.pcseg` and `.pcsb` files in name order.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use codecforge_core::point::PointCloud;
use codecforge_harness::pcio;

fn is_cloud_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("pcseg" | "pcsb")
    )
}

pub fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()
                .with_context(|| format!("listing {}", path.display()))?;
            found.retain(|p| p.is_file() && is_cloud_file(p));
            if found.is_empty() {
                bail!("{} holds no .pcseg or .pcsb files", path.display());
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(path.clone());
        }
    }
    Ok(out)
}

pub fn load_all(paths: &[PathBuf]) -> Result<Vec<PointCloud>> {
    expand(paths)?
        .iter()
        .map(|p| pcio::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}
