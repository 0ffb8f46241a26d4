//! Dataset generation: expert demos at the collection rate, decimated to the
//! training rate, written with a manifest and normalization statistics.

use std::path::{Path, PathBuf};

use crate::dataset::{
    compute_norm_stats, downsample, write_episode, write_manifest, DatasetManifest, ManifestEntry,
    FORMAT_VERSION,
};
use crate::harness::{io_err, HarnessError, TRAIN_RATE_HZ};
use crate::sim::{generate_demos, task_by_name, SimConfig};

/// Generate `count` successful demonstrations of `task`, decimate them to the
/// training rate, and write episodes + manifest + stats under `out_dir`.
/// Returns the manifest path.
pub fn cmd_gen_data(
    task_name: &str,
    count: usize,
    noise_scale: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf, HarnessError> {
    let task = task_by_name(task_name)?;
    let sim = SimConfig::default();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let raw = generate_demos(&task, count, noise_scale, seed, &sim)?;
    let factor = (sim.sim_hz / TRAIN_RATE_HZ) as usize;
    let mut entries = Vec::with_capacity(count);
    let mut decimated = Vec::with_capacity(count);
    for (i, ep) in raw.iter().enumerate() {
        let ds = downsample(ep, factor)?;
        let path = out_dir.join(format!("{task_name}_{i:03}.bin"));
        write_episode(&ds, &path)?;
        entries.push(ManifestEntry {
            path,
            frames: ds.frames,
            task: ds.task.clone(),
            success: ds.subscores.overall(),
        });
        decimated.push(ds);
    }
    let stats = if decimated.is_empty() {
        crate::dataset::NormStats::identity(2 * crate::sim::JOINTS_PER_ARM)
    } else {
        compute_norm_stats(&decimated)?
    };
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        stats,
        episodes: entries,
    };
    let manifest_path = out_dir.join("manifest.txt");
    write_manifest(&manifest, &manifest_path)?;
    Ok(manifest_path)
}
